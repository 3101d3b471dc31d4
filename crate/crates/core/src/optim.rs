//! Adaptive-moment optimizer with decoupled weight decay, global-norm
//! gradient clipping, and an exponential moving average of the parameters.
//!
//! All persistent training state — parameters, EMA shadow, and both moment
//! buffers — is snapped to the f32 grid after every update. Computation runs
//! in f64; the snap makes the f32 checkpoint payload a lossless image of the
//! live state, so training resumed from a checkpoint is bit-identical to
//! training that never stopped.

use crate::error::{Error, Result};
use crate::generator::ParamSet;
use crate::tensor::Tensor;

/// Rounds to the nearest f32 and widens back.
#[inline]
pub fn snap_f32(x: f64) -> f64 {
    x as f32 as f64
}

pub fn snap_tensor(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = snap_f32(*v);
    }
}

pub fn snap_params(params: &mut ParamSet) {
    for (_, t) in params.iter_mut() {
        snap_tensor(t);
    }
}

/// Scales all gradients so their joint Euclidean norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::contract(format!(
                "betas must lie in [0,1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::contract(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::contract(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Moment buffers mirror the parameter set entry for entry.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(AdamW { cfg, m, v, steps: 0 })
    }

    /// Rebuilds the optimizer mid-run from checkpointed moments.
    pub fn from_state(
        params: &ParamSet,
        cfg: AdamWConfig,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        steps: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::contract(format!(
                "moment buffers ({}, {}) do not match parameter count {}",
                m.len(),
                v.len(),
                params.len()
            )));
        }
        for ((name, p), (mm, vv)) in params.iter().zip(m.iter().zip(&v)) {
            if mm.shape() != p.shape() || vv.shape() != p.shape() {
                return Err(Error::contract(format!("moment shape mismatch for {name}")));
            }
        }
        Ok(AdamW { cfg, m, v, steps })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update:
    ///   m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²,
    ///   p ← p − lr·(m̂/(√v̂ + ε) + wd·p)
    /// with m̂, v̂ the bias-corrected moments. Every mutated buffer is snapped
    /// to f32 before the call returns.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "got {} gradient buffers for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for ((entry, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (name, p) = entry;
            if g.len() != p.len() {
                return Err(Error::contract(format!(
                    "gradient length {} != parameter length {} for {name}",
                    g.len(),
                    p.len()
                )));
            }
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = snap_f32(self.cfg.beta1 * md[i] + (1.0 - self.cfg.beta1) * g[i]);
                vd[i] = snap_f32(self.cfg.beta2 * vd[i] + (1.0 - self.cfg.beta2) * g[i] * g[i]);
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                let update = mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * pd[i];
                pd[i] = snap_f32(pd[i] - lr * update);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of the parameters, updated after each
/// optimizer step as ema ← p + d·(ema − p): the gap to the live parameters
/// decays by exactly d per step (up to the f32 snap).
#[derive(Debug, Clone)]
pub struct Ema {
    decay: f64,
    shadow: ParamSet,
}

impl Ema {
    pub fn new(params: &ParamSet, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::contract(format!("ema decay must be in [0,1), got {decay}")));
        }
        Ok(Ema { decay, shadow: params.clone() })
    }

    pub fn from_shadow(shadow: ParamSet, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::contract(format!("ema decay must be in [0,1), got {decay}")));
        }
        Ok(Ema { decay, shadow })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &ParamSet {
        &self.shadow
    }

    pub fn into_shadow(self) -> ParamSet {
        self.shadow
    }

    pub fn update(&mut self, params: &ParamSet) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::contract("ema shadow does not match parameter set"));
        }
        for ((_, s), (_, p)) in self.shadow.iter_mut().zip(params.iter()) {
            let sd = s.data_mut();
            let pd = p.data();
            for i in 0..sd.len() {
                sd[i] = snap_f32(pd[i] + self.decay * (sd[i] - pd[i]));
            }
        }
        Ok(())
    }
}
