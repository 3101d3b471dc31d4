//! Kernel attraction/repulsion drift fields over residual batches, and the
//! losses built on them.
//!
//! A batch of generated residuals r̂ is pulled toward a batch of real
//! residuals (attraction) and pushed apart from itself (repulsion); both terms
//! are kernel-weighted means of displacement vectors, and their difference is
//! the drift V. Training regresses each r̂ onto the frozen target r̂ + V, so
//! the whole field is computed outside the gradient graph and enters the loss
//! as a constant.
//!
//! Distances are Euclidean on flattened residuals, optionally divided by √D
//! (per-dimension scaling, the default) so temperature values keep their
//! meaning when the image size changes.

use crate::error::{Error, Result};
use crate::graph::{Graph, ValueId};
use crate::linalg::matmul_nn;
use crate::tensor::Tensor;

/// How kernel distances scale with the flattened dimension D.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScaling {
    /// Literal Euclidean distance of the flattened vectors.
    Raw,
    /// Distance divided by √D; an RMS per-pixel difference.
    PerDimension,
}

impl NormScaling {
    fn apply(self, dist: f64, dim: usize) -> f64 {
        match self {
            NormScaling::Raw => dist,
            NormScaling::PerDimension => dist / (dim as f64).sqrt(),
        }
    }
}

/// Everything the total objective needs: temperature set, pixel-loss weight,
/// and the distance scaling convention.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftConfig {
    pub temperatures: Vec<f64>,
    pub lambda: f64,
    pub norm_scaling: NormScaling,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig { temperatures: vec![1.0], lambda: 0.0, norm_scaling: NormScaling::PerDimension }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperatures.is_empty() {
            return Err(Error::contract("temperature set must be non-empty".to_string()));
        }
        for &t in &self.temperatures {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::contract(format!("temperatures must be positive, got {t}")));
            }
        }
        for i in 0..self.temperatures.len() {
            for j in i + 1..self.temperatures.len() {
                if self.temperatures[i] == self.temperatures[j] {
                    return Err(Error::contract(format!(
                        "temperatures must be distinct, {} appears twice",
                        self.temperatures[i]
                    )));
                }
            }
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::contract(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    Real,
    Generated,
}

/// A batch of residual images [B, C, H, W]. Generated batches built from a
/// live graph node keep the node id so losses can attach gradients; real
/// batches are always detached.
#[derive(Debug, Clone)]
pub struct ResidualBatch {
    samples: Tensor,
    kind: BatchKind,
    node: Option<ValueId>,
}

impl ResidualBatch {
    fn check_shape(samples: &Tensor) -> Result<()> {
        if samples.shape().len() != 4 {
            return Err(Error::dimension(format!(
                "residual batch must be [B,C,H,W], got {:?}",
                samples.shape()
            )));
        }
        if samples.shape()[0] == 0 {
            return Err(Error::contract("residual batch must contain at least one sample"));
        }
        Ok(())
    }

    pub fn real(samples: Tensor) -> Result<Self> {
        Self::check_shape(&samples)?;
        Ok(ResidualBatch { samples, kind: BatchKind::Real, node: None })
    }

    /// Wraps a graph node holding generated residuals; the stored samples are
    /// a detached copy of the node's current value.
    pub fn generated(graph: &Graph, node: ValueId) -> Result<Self> {
        let samples = graph.tensor(node);
        Self::check_shape(&samples)?;
        Ok(ResidualBatch { samples, kind: BatchKind::Generated, node: Some(node) })
    }

    /// A generated batch with no gradient linkage (field analysis only).
    pub fn generated_detached(samples: Tensor) -> Result<Self> {
        Self::check_shape(&samples)?;
        Ok(ResidualBatch { samples, kind: BatchKind::Generated, node: None })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn kind(&self) -> BatchKind {
        self.kind
    }

    pub fn batch_size(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn sample_dim(&self) -> usize {
        self.samples.len() / self.batch_size()
    }

    pub fn node(&self) -> Option<ValueId> {
        self.node
    }
}

/// Per-sample drift and its two components, all [B, C, H, W].
#[derive(Debug, Clone)]
pub struct FieldOutput {
    pub drift: Tensor,
    pub attraction: Tensor,
    pub repulsion: Tensor,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::contract(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

/// Similarity kernel exp(−‖r − r′‖/τ) on flat vectors.
pub fn kernel(r: &[f64], r_prime: &[f64], tau: f64, scaling: NormScaling) -> Result<f64> {
    check_tau(tau)?;
    if r.len() != r_prime.len() {
        return Err(Error::dimension(format!(
            "kernel operands have lengths {} and {}",
            r.len(),
            r_prime.len()
        )));
    }
    let sq: f64 = r.iter().zip(r_prime).map(|(a, b)| (a - b) * (a - b)).sum();
    let dist = scaling.apply(sq.sqrt(), r.len());
    Ok((-dist / tau).exp())
}

/// Kernel-normalized weights of `x` against a set: w_j = k(x, s_j)/Σ k.
/// The normalizer is floored at machine-tiny so a fully underflowed row
/// degrades gracefully instead of dividing by zero.
pub fn kernel_weights(
    x: &[f64],
    set: &[Vec<f64>],
    tau: f64,
    scaling: NormScaling,
) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::contract("kernel weight set must be non-empty".to_string()));
    }
    let mut k = Vec::with_capacity(set.len());
    for s in set {
        k.push(kernel(x, s, tau, scaling)?);
    }
    let z: f64 = k.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    for w in &mut k {
        *w /= z;
    }
    Ok(k)
}

/// Kernel-weighted mean displacement from `x` toward the members of `set`:
/// (1/Z) Σ_j k(x, s_j)(s_j − x). This single formula realizes both the
/// attraction and the repulsion estimator.
fn displacement_mean(
    x: &[f64],
    set: &[Vec<f64>],
    tau: f64,
    scaling: NormScaling,
) -> Result<Vec<f64>> {
    let weights = kernel_weights(x, set, tau, scaling)?;
    let mut out = vec![0.0; x.len()];
    for (w, s) in weights.iter().zip(set) {
        if s.len() != x.len() {
            return Err(Error::dimension(format!(
                "set member has length {}, expected {}",
                s.len(),
                x.len()
            )));
        }
        for (o, (sv, xv)) in out.iter_mut().zip(s.iter().zip(x)) {
            *o += w * (sv - xv);
        }
    }
    Ok(out)
}

/// Pull of `x` toward a set of target residuals.
pub fn attraction(
    x: &[f64],
    targets: &[Vec<f64>],
    tau: f64,
    scaling: NormScaling,
) -> Result<Vec<f64>> {
    if targets.is_empty() {
        return Err(Error::contract("attraction target set must be non-empty".to_string()));
    }
    displacement_mean(x, targets, tau, scaling)
}

/// Push of `x` away from its peers. During training `x` is itself a member of
/// `peers`; the self term adds k = 1 to the normalizer and zero displacement.
pub fn repulsion(
    x: &[f64],
    peers: &[Vec<f64>],
    tau: f64,
    scaling: NormScaling,
) -> Result<Vec<f64>> {
    if peers.is_empty() {
        return Err(Error::contract("repulsion peer set must be non-empty".to_string()));
    }
    displacement_mean(x, peers, tau, scaling)
}

/// Pairwise distance matrix (n×m) between row sets, computed directly as
/// √Σ(aᵢ − bⱼ)². The direct form is exactly zero for bitwise-equal rows —
/// so a sample's distance to itself is 0 and its kernel weight exactly 1 —
/// and stays well conditioned when the residuals share a large common
/// offset. With the small sample counts used here it is also cheap; only
/// the weightsˣvalues aggregation is worth a matrix multiply.
fn pairwise_dists(
    a: &[f64],
    b: &[f64],
    n: usize,
    m: usize,
    d: usize,
    scaling: NormScaling,
) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..m {
            let bj = &b[j * d..(j + 1) * d];
            let sq: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            out[i * m + j] = scaling.apply(sq.sqrt(), d);
        }
    }
    out
}

/// Row-normalized kernel matrix applied to a value matrix, minus the probe
/// rows themselves: row i of the result is (Σ_j w_ij v_j) − x_i. This is the
/// batched form of `displacement_mean`.
fn batched_displacement(
    probes: &[f64],
    values: &[f64],
    dists: &[f64],
    n: usize,
    m: usize,
    d: usize,
    tau: f64,
) -> Vec<f64> {
    let mut weights = vec![0.0; n * m];
    for i in 0..n {
        let row = &dists[i * m..(i + 1) * m];
        let mut z = 0.0;
        for (w, dist) in weights[i * m..(i + 1) * m].iter_mut().zip(row) {
            *w = (-dist / tau).exp();
            z += *w;
        }
        let z = z.max(f64::MIN_POSITIVE);
        for w in &mut weights[i * m..(i + 1) * m] {
            *w /= z;
        }
    }
    let mut out = matmul_nn(&weights, values, n, m, d);
    for (o, p) in out.iter_mut().zip(probes) {
        *o -= p;
    }
    out
}

/// The drift field V = attraction − repulsion for every generated sample,
/// computed entirely outside any gradient graph.
pub fn drift_field(
    generated: &ResidualBatch,
    real: &ResidualBatch,
    tau: f64,
    scaling: NormScaling,
) -> Result<FieldOutput> {
    check_tau(tau)?;
    if generated.samples.shape()[1..] != real.samples.shape()[1..] {
        return Err(Error::dimension(format!(
            "generated samples {:?} and real samples {:?} have different per-sample shapes",
            generated.samples.shape(),
            real.samples.shape()
        )));
    }
    let bg = generated.batch_size();
    let br = real.batch_size();
    let d = generated.sample_dim();
    let gdata = generated.samples.data();
    let rdata = real.samples.data();

    let cross = pairwise_dists(gdata, rdata, bg, br, d, scaling);
    let within = pairwise_dists(gdata, gdata, bg, bg, d, scaling);
    let attraction = batched_displacement(gdata, rdata, &cross, bg, br, d, tau);
    let repulsion = batched_displacement(gdata, gdata, &within, bg, bg, d, tau);
    let drift: Vec<f64> = attraction.iter().zip(&repulsion).map(|(a, r)| a - r).collect();

    let shape = generated.samples.shape();
    Ok(FieldOutput {
        drift: Tensor::new(drift, shape)?,
        attraction: Tensor::new(attraction, shape)?,
        repulsion: Tensor::new(repulsion, shape)?,
    })
}

/// Drift loss at one temperature: (1/B) Σ_i ‖r̂_i − (r̂_i + V_i)ᶜ‖₂², where ᶜ
/// marks a constant (the stop-gradient target). Returns the scalar loss node.
pub fn drift_loss(
    graph: &mut Graph,
    generated: &ResidualBatch,
    real: &ResidualBatch,
    tau: f64,
    scaling: NormScaling,
) -> Result<ValueId> {
    let rhat = generated.node.ok_or_else(|| {
        Error::contract("drift_loss needs a graph-linked generated batch (use ResidualBatch::generated)".to_string())
    })?;
    let field = drift_field(generated, real, tau, scaling)?;
    let target_data: Vec<f64> = generated
        .samples
        .data()
        .iter()
        .zip(field.drift.data())
        .map(|(r, v)| r + v)
        .collect();
    let target = Tensor::new(target_data, generated.samples.shape())?;
    let tid = graph.constant(&target);
    let diff = graph.sub(rhat, tid)?;
    let sq = graph.square(diff);
    let total = graph.sum_all(sq);
    Ok(graph.div_scalar(total, generated.batch_size() as f64))
}

/// Mean absolute error between index-aligned generated and real residuals,
/// averaged over every element and sample.
pub fn pixel_loss(
    graph: &mut Graph,
    generated: &ResidualBatch,
    real: &ResidualBatch,
) -> Result<ValueId> {
    let rhat = generated.node.ok_or_else(|| {
        Error::contract("pixel_loss needs a graph-linked generated batch".to_string())
    })?;
    if generated.samples.shape() != real.samples.shape() {
        return Err(Error::dimension(format!(
            "pixel_loss batches must be index-aligned with equal shapes, got {:?} vs {:?}",
            generated.samples.shape(),
            real.samples.shape()
        )));
    }
    let rid = graph.constant(&real.samples);
    let diff = graph.sub(rhat, rid)?;
    let a = graph.abs(diff);
    Ok(graph.mean_all(a))
}

/// The loss nodes making up one total objective evaluation.
pub struct LossBreakdown {
    pub total: ValueId,
    /// (τ, scalar node) per temperature, in config order.
    pub drift_terms: Vec<(f64, ValueId)>,
    /// Unweighted ℓ1 node; present only when λ > 0.
    pub pixel: Option<ValueId>,
}

/// Σ_τ drift_loss(τ) + λ·pixel_loss. The pixel term is skipped entirely at
/// λ = 0.
pub fn total_loss(
    graph: &mut Graph,
    generated: &ResidualBatch,
    real: &ResidualBatch,
    cfg: &DriftConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let mut drift_terms = Vec::with_capacity(cfg.temperatures.len());
    let mut total: Option<ValueId> = None;
    for &tau in &cfg.temperatures {
        let l = drift_loss(graph, generated, real, tau, cfg.norm_scaling)?;
        drift_terms.push((tau, l));
        total = Some(match total {
            Some(acc) => graph.add(acc, l)?,
            None => l,
        });
    }
    let mut total = total.expect("validated non-empty temperature set");
    let mut pixel = None;
    if cfg.lambda > 0.0 {
        let p = pixel_loss(graph, generated, real)?;
        pixel = Some(p);
        let weighted = graph.mul_scalar(p, cfg.lambda);
        total = graph.add(total, weighted)?;
    }
    Ok(LossBreakdown { total, drift_terms, pixel })
}
