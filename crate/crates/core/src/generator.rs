//! The conditional one-step generator: a compact encoder–decoder with skip
//! connections mapping a noise image concatenated with the observed low-dose
//! image to a residual estimate r̂, with reconstruction x̂ = y − r̂.
//!
//! Structure at depth 2 (the default):
//!
//! ```text
//! concat(ε, y) → enc0 ─────────────────────────────→ concat → dec0 → head
//!                 └ down1 → enc1 ──────→ concat → dec1 ↑ up1
//!                            └ down2 → enc2 ──→ up2 ────┘
//! ```
//!
//! Every block is two [3×3 conv → bias → x·σ(x)] stages; downsampling is a
//! stride-2 3×3 conv that doubles channels, upsampling a 2×2 stride-2
//! transposed conv that halves them, and the head a linear 3×3 conv. There is
//! no normalization; the smooth activation keeps finite-difference gradient
//! checks tight.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::graph::{Graph, ValueId};
use crate::rng::{NoiseSource, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    /// Number of 2× down/up levels; input spatial dims must divide 2^depth.
    pub depth: usize,
    /// Channels entering the first block (noise + condition).
    pub in_channels: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { base_channels: 16, depth: 2, in_channels: 2, out_channels: 1, seed: 0 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.out_channels == 0 {
            return Err(Error::contract("channel counts must be positive"));
        }
        if self.in_channels != 2 {
            return Err(Error::contract(format!(
                "generator takes noise + condition (2 input channels), got {}",
                self.in_channels
            )));
        }
        if self.depth == 0 {
            return Err(Error::contract("depth must be at least 1"));
        }
        Ok(())
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Named parameter tensors in a fixed structural order. The order is the
/// contract for optimizer state and checkpoints.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (name, _) in &entries {
            if entries.iter().filter(|(n, _)| n == name).count() > 1 {
                return Err(Error::contract(format!("duplicate parameter name {name}")));
            }
        }
        Ok(ParamSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut (String, Tensor)> {
        self.entries.iter_mut()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Bitwise equality of every tensor, used by round-trip checks.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Per-layer shapes in initialization order. Every conv weight is
/// [Cout, Cin, k, k]; transposed-conv weights are [Cin, Cout, k, k].
fn layer_plan(cfg: &GeneratorConfig) -> Vec<(String, Vec<usize>)> {
    let mut plan = Vec::new();
    let block = |plan: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize| {
        plan.push((format!("{name}.conv1.w"), vec![cout, cin, 3, 3]));
        plan.push((format!("{name}.conv1.b"), vec![cout]));
        plan.push((format!("{name}.conv2.w"), vec![cout, cout, 3, 3]));
        plan.push((format!("{name}.conv2.b"), vec![cout]));
    };
    block(&mut plan, "enc0", cfg.in_channels, cfg.base_channels);
    for l in 1..=cfg.depth {
        let cin = cfg.channels_at(l - 1);
        let cout = cfg.channels_at(l);
        plan.push((format!("down{l}.w"), vec![cout, cin, 3, 3]));
        plan.push((format!("down{l}.b"), vec![cout]));
        block(&mut plan, &format!("enc{l}"), cout, cout);
    }
    for l in (1..=cfg.depth).rev() {
        let cin = cfg.channels_at(l);
        let cout = cfg.channels_at(l - 1);
        plan.push((format!("up{l}.w"), vec![cin, cout, 2, 2]));
        plan.push((format!("up{l}.b"), vec![cout]));
        block(&mut plan, &format!("dec{}", l - 1), 2 * cout, cout);
    }
    plan.push(("head.w".to_string(), vec![cfg.out_channels, cfg.base_channels, 3, 3]));
    plan.push(("head.b".to_string(), vec![cfg.out_channels]));
    plan
}

/// Scalar parameter count implied by a config; initialization must agree.
pub fn expected_param_count(cfg: &GeneratorConfig) -> usize {
    layer_plan(cfg).iter().map(|(_, shape)| shape.iter().product::<usize>()).sum()
}

/// The (name, shape) table a config implies, in initialization order — the
/// contract checkpoint loaders validate against.
pub fn param_layout(cfg: &GeneratorConfig) -> Vec<(String, Vec<usize>)> {
    layer_plan(cfg)
}

/// Fan-in scaled normal weights (std = √(2 / (Cin·k²))), zero biases.
/// Deterministic per config seed.
pub fn init_params(cfg: &GeneratorConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = NoiseSource::for_stream(cfg.seed, Stream::Init, 0);
    let mut entries = Vec::new();
    for (name, shape) in layer_plan(cfg) {
        let t = if shape.len() == 4 {
            let fan_in = if name.starts_with("up") {
                shape[0] * shape[2] * shape[3] // transposed layout [Cin, Cout, k, k]
            } else {
                shape[1] * shape[2] * shape[3]
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let mut t = rng.standard_normal(&shape);
            for v in t.data_mut() {
                *v *= std;
            }
            t
        } else {
            Tensor::zeros(&shape)
        };
        entries.push((name, t.with_requires_grad()));
    }
    ParamSet::from_entries(entries)
}

/// Graph nodes for every parameter, in `ParamSet` order.
pub struct BoundParams {
    nodes: Vec<(String, ValueId)>,
}

impl BoundParams {
    /// Assembles a binding from explicit (name, node) pairs — used by tests
    /// that make one parameter tensor a differentiable leaf and freeze the
    /// rest as constants.
    pub fn from_nodes(nodes: Vec<(String, ValueId)>) -> Self {
        BoundParams { nodes }
    }

    fn get(&self, name: &str) -> ValueId {
        self.nodes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, ValueId)> {
        self.nodes.iter()
    }
}

/// Installs every parameter into a graph. `trainable` leaves carry gradients;
/// frozen binding is for inference-only forwards.
pub fn bind_params(graph: &mut Graph, params: &ParamSet, trainable: bool) -> BoundParams {
    let nodes = params
        .iter()
        .map(|(name, t)| {
            let id = if trainable { graph.leaf(t) } else { graph.constant(t) };
            (name.clone(), id)
        })
        .collect();
    BoundParams { nodes }
}

fn check_forward_shapes(cfg: &GeneratorConfig, eps: &[usize], y: &[usize]) -> Result<()> {
    if eps.len() != 4 || y.len() != 4 {
        return Err(Error::dimension(format!(
            "generator inputs must be [B,1,H,W], got {eps:?} and {y:?}"
        )));
    }
    if eps != y {
        return Err(Error::dimension(format!("noise shape {eps:?} != condition shape {y:?}")));
    }
    if eps[1] != 1 {
        return Err(Error::dimension(format!("inputs must be single-channel, got {eps:?}")));
    }
    let div = 1usize << cfg.depth;
    if eps[2] % div != 0 || eps[3] % div != 0 {
        return Err(Error::dimension(format!(
            "spatial dims {}x{} must be divisible by 2^depth = {div}",
            eps[2], eps[3]
        )));
    }
    Ok(())
}

fn conv_block(
    graph: &mut Graph,
    bound: &BoundParams,
    name: &str,
    x: ValueId,
) -> Result<ValueId> {
    let mut h = x;
    for stage in ["conv1", "conv2"] {
        let w = bound.get(&format!("{name}.{stage}.w"));
        let b = bound.get(&format!("{name}.{stage}.b"));
        h = graph.conv2d(h, w, 1, 1)?;
        h = graph.bias_add(h, b)?;
        h = graph.silu(h);
    }
    Ok(h)
}

/// Builds the full forward pass on an existing graph; `eps` and `y` must be
/// nodes of shape [B,1,H,W]. Returns the residual estimate node [B,1,H,W].
pub fn forward_graph(
    graph: &mut Graph,
    cfg: &GeneratorConfig,
    bound: &BoundParams,
    eps: ValueId,
    y: ValueId,
) -> Result<ValueId> {
    cfg.validate()?;
    let eps_shape = graph.shape(eps).to_vec();
    let y_shape = graph.shape(y).to_vec();
    check_forward_shapes(cfg, &eps_shape, &y_shape)?;

    let x = graph.concat_channels(eps, y)?;
    let mut h = conv_block(graph, bound, "enc0", x)?;
    let mut skips = Vec::with_capacity(cfg.depth);
    for l in 1..=cfg.depth {
        skips.push(h);
        let w = bound.get(&format!("down{l}.w"));
        let b = bound.get(&format!("down{l}.b"));
        h = graph.conv2d(h, w, 2, 1)?;
        h = graph.bias_add(h, b)?;
        h = graph.silu(h);
        h = conv_block(graph, bound, &format!("enc{l}"), h)?;
    }
    for l in (1..=cfg.depth).rev() {
        let w = bound.get(&format!("up{l}.w"));
        let b = bound.get(&format!("up{l}.b"));
        h = graph.conv_transpose2d(h, w, 2)?;
        h = graph.bias_add(h, b)?;
        h = graph.silu(h);
        let skip = skips.pop().expect("one skip per level");
        h = graph.concat_channels(h, skip)?;
        h = conv_block(graph, bound, &format!("dec{}", l - 1), h)?;
    }
    let w = bound.get("head.w");
    let b = bound.get("head.b");
    h = graph.conv2d(h, w, 1, 1)?;
    graph.bias_add(h, b)
}

/// One inference forward on a scratch graph with frozen parameters.
pub fn forward(
    cfg: &GeneratorConfig,
    params: &ParamSet,
    eps: &Tensor,
    y: &Tensor,
) -> Result<Tensor> {
    let mut graph = Graph::new();
    let bound = bind_params(&mut graph, params, false);
    let eps_id = graph.constant(eps);
    let y_id = graph.constant(y);
    let out = forward_graph(&mut graph, cfg, &bound, eps_id, y_id)?;
    Ok(graph.tensor(out))
}

/// x̂ = y − f(ε, y) with ε freshly drawn from `noise`; exactly one generator
/// evaluation per call.
pub fn denoise(
    cfg: &GeneratorConfig,
    params: &ParamSet,
    y: &Tensor,
    noise: &mut NoiseSource,
) -> Result<Tensor> {
    let eps = noise.standard_normal(y.shape());
    let rhat = forward(cfg, params, &eps, y)?;
    let data = y.data().iter().zip(rhat.data()).map(|(a, b)| a - b).collect();
    Tensor::new(data, y.shape())
}

/// Shared frozen model with an evaluation counter: one count per image
/// denoised (a batched forward of B images counts B).
pub struct InferenceEngine {
    cfg: GeneratorConfig,
    params: ParamSet,
    images_evaluated: AtomicU64,
}

impl InferenceEngine {
    pub fn new(cfg: GeneratorConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let expect = expected_param_count(&cfg);
        if params.value_count() != expect {
            return Err(Error::contract(format!(
                "parameter set has {} values, config implies {expect}",
                params.value_count()
            )));
        }
        Ok(InferenceEngine { cfg, params, images_evaluated: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn denoise(&self, y: &Tensor, noise: &mut NoiseSource) -> Result<Tensor> {
        let out = denoise(&self.cfg, &self.params, y, noise)?;
        self.images_evaluated.fetch_add(y.shape()[0] as u64, Ordering::Relaxed);
        Ok(out)
    }

    /// Generator applications so far, counted per image.
    pub fn evaluations(&self) -> u64 {
        self.images_evaluated.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{total_loss, DriftConfig, NormScaling, ResidualBatch};

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig { base_channels: 4, depth: 2, in_channels: 2, out_channels: 1, seed: 7 }
    }

    #[test]
    fn param_count_matches_documented_formula() {
        // Hand-computed for the default config (base 16, depth 2):
        //   enc0 2624 + down1 4640 + enc1 18496 + down2 18496 + enc2 73856
        //   + up2 8224 + dec1 27712 + up1 2064 + dec0 6944 + head 145
        let cfg = GeneratorConfig::default();
        assert_eq!(expected_param_count(&cfg), 163_201);
        let p = init_params(&cfg).unwrap();
        assert_eq!(p.value_count(), 163_201);

        for cfg in [
            small_cfg(),
            GeneratorConfig { base_channels: 8, depth: 1, ..GeneratorConfig::default() },
            GeneratorConfig { base_channels: 6, depth: 3, ..GeneratorConfig::default() },
        ] {
            let p = init_params(&cfg).unwrap();
            assert_eq!(p.value_count(), expected_param_count(&cfg));
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = small_cfg();
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert!(a.bit_eq(&b));
        let other = init_params(&GeneratorConfig { seed: 8, ..cfg }).unwrap();
        assert!(!a.bit_eq(&other));
    }

    #[test]
    fn init_statistics() {
        let cfg = GeneratorConfig::default();
        let p = init_params(&cfg).unwrap();
        for (name, t) in p.iter() {
            if name.ends_with(".b") {
                assert!(t.data().iter().all(|v| *v == 0.0), "{name} biases must be zero");
            }
        }
        // enc2.conv1.w is 64×64×3×3 = 36864 draws, plenty for a 10% bound.
        let w = p.get("enc2.conv1.w").unwrap();
        let n = w.len() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = (2.0f64 / (64.0 * 9.0)).sqrt();
        assert!((var.sqrt() - expect).abs() / expect < 0.10, "std {} vs {expect}", var.sqrt());
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = small_cfg();
        let params = init_params(&cfg).unwrap();
        let mut rng = NoiseSource::new(3);
        let eps = rng.standard_normal(&[2, 1, 8, 12]);
        let y = rng.standard_normal(&[2, 1, 8, 12]);
        let a = forward(&cfg, &params, &eps, &y).unwrap();
        assert_eq!(a.shape(), &[2, 1, 8, 12]);
        let b = forward(&cfg, &params, &eps, &y).unwrap();
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
    }

    #[test]
    fn forward_rejects_indivisible_dims() {
        let cfg = small_cfg();
        let params = init_params(&cfg).unwrap();
        let mut rng = NoiseSource::new(4);
        let eps = rng.standard_normal(&[1, 1, 10, 8]);
        let y = rng.standard_normal(&[1, 1, 10, 8]);
        assert!(matches!(
            forward(&cfg, &params, &eps, &y),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn zeroed_head_gives_constant_output() {
        let cfg = small_cfg();
        let mut params = init_params(&cfg).unwrap();
        let w = params.get_mut("head.w").unwrap();
        let zeros = vec![0.0; w.len()];
        w.replace_data(zeros).unwrap();
        let b = params.get_mut("head.b").unwrap();
        b.replace_data(vec![0.37]).unwrap();
        let mut rng = NoiseSource::new(5);
        let eps = rng.standard_normal(&[1, 1, 8, 8]);
        let y = rng.standard_normal(&[1, 1, 8, 8]);
        let out = forward(&cfg, &params, &eps, &y).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.37));

        // Zero bias too: residual is identically zero, so denoise returns y.
        let b = params.get_mut("head.b").unwrap();
        b.replace_data(vec![0.0]).unwrap();
        let mut noise = NoiseSource::new(11);
        let xhat = denoise(&cfg, &params, &y, &mut noise).unwrap();
        assert_eq!(xhat.max_abs_diff(&y).unwrap(), 0.0);
    }

    #[test]
    fn denoise_is_reproducible_and_consistent() {
        let cfg = small_cfg();
        let params = init_params(&cfg).unwrap();
        let mut rng = NoiseSource::new(6);
        let y = rng.standard_normal(&[2, 1, 8, 8]);

        let a = denoise(&cfg, &params, &y, &mut NoiseSource::new(42)).unwrap();
        let b = denoise(&cfg, &params, &y, &mut NoiseSource::new(42)).unwrap();
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);

        // denoise(y) + forward(ε, y) == y for the same drawn ε.
        let eps = NoiseSource::new(42).standard_normal(y.shape());
        let rhat = forward(&cfg, &params, &eps, &y).unwrap();
        for ((x, r), yv) in a.data().iter().zip(rhat.data()).zip(y.data()) {
            assert!((x + r - yv).abs() < 1e-15);
        }
    }

    #[test]
    fn outputs_stay_finite_over_random_draws() {
        let cfg = small_cfg();
        let params = init_params(&cfg).unwrap();
        let mut rng = NoiseSource::new(9);
        let mut values = 0usize;
        while values < 10_000 {
            let eps = rng.standard_normal(&[1, 1, 8, 8]);
            let y = rng.standard_normal(&[1, 1, 8, 8]);
            let out = forward(&cfg, &params, &eps, &y).unwrap();
            assert!(out.all_finite());
            values += eps.len() + y.len();
        }
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let cfg = small_cfg();
        let params = init_params(&cfg).unwrap();
        let mut rng = NoiseSource::new(13);
        let eps = rng.standard_normal(&[2, 1, 8, 8]);
        let y = rng.standard_normal(&[2, 1, 8, 8]);
        let real = rng.standard_normal(&[2, 1, 8, 8]);

        let mut graph = Graph::new();
        let bound = bind_params(&mut graph, &params, true);
        let eps_id = graph.constant(&eps);
        let y_id = graph.constant(&y);
        let rhat = forward_graph(&mut graph, &cfg, &bound, eps_id, y_id).unwrap();
        let gen = ResidualBatch::generated(&graph, rhat).unwrap();
        let real_b = ResidualBatch::real(real).unwrap();
        let cfg_loss = DriftConfig {
            temperatures: vec![0.2, 1.0],
            lambda: 0.01,
            norm_scaling: NormScaling::PerDimension,
        };
        let lb = total_loss(&mut graph, &gen, &real_b, &cfg_loss).unwrap();
        graph.backward(lb.total).unwrap();
        for (name, id) in bound.iter() {
            let g = graph.grad(*id).unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(g.iter().any(|v| *v != 0.0), "gradient for {name} is all zero");
        }
    }

    #[test]
    fn inference_engine_counts_images() {
        let cfg = small_cfg();
        let params = init_params(&cfg).unwrap();
        let engine = InferenceEngine::new(cfg, params).unwrap();
        let mut rng = NoiseSource::new(17);
        let y2 = rng.standard_normal(&[2, 1, 8, 8]);
        let y3 = rng.standard_normal(&[3, 1, 8, 8]);
        engine.denoise(&y2, &mut NoiseSource::new(1)).unwrap();
        engine.denoise(&y3, &mut NoiseSource::new(2)).unwrap();
        assert_eq!(engine.evaluations(), 5);
    }
}
