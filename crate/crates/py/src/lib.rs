//! Python bindings: thin shims over the core library. Vectors cross the
//! boundary as flat `list[float]` plus explicit dimensions; errors surface
//! as `ValueError`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use rddm_core::drift::{self, DriftConfig, NormScaling, ResidualBatch};
use rddm_core::generator::{GeneratorConfig, InferenceEngine};
use rddm_core::metrics;
use rddm_core::rng::{NoiseSource, Stream};
use rddm_core::sim::{generate_dataset, Dataset, NoiseModel};
use rddm_core::tensor::Tensor;
use rddm_core::trainer::{self, TrainConfig};

fn err(e: rddm_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn scaling(per_dimension: bool) -> NormScaling {
    if per_dimension {
        NormScaling::PerDimension
    } else {
        NormScaling::Raw
    }
}

fn batch_from_rows(rows: Vec<Vec<f64>>) -> PyResult<ResidualBatch> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("sample set must not be empty"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("sample rows must share one length"));
    }
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    // Rows are treated as 1×1×d images, the layout the field estimator expects.
    let t = Tensor::new(flat, &[n, 1, 1, d]).map_err(err)?;
    ResidualBatch::real(t).map_err(err)
}

/// Kernel-weighted mean displacement from `x` toward `set`.
#[pyfunction]
#[pyo3(signature = (x, set, tau, per_dimension = true))]
fn attraction(x: Vec<f64>, set: Vec<Vec<f64>>, tau: f64, per_dimension: bool) -> PyResult<Vec<f64>> {
    drift::attraction(&x, &set, tau, scaling(per_dimension)).map_err(err)
}

/// Kernel-weighted mean displacement from `x` away from `set` (self-term included).
#[pyfunction]
#[pyo3(signature = (x, set, tau, per_dimension = true))]
fn repulsion(x: Vec<f64>, set: Vec<Vec<f64>>, tau: f64, per_dimension: bool) -> PyResult<Vec<f64>> {
    drift::repulsion(&x, &set, tau, scaling(per_dimension)).map_err(err)
}

/// exp(−‖r − r_prime‖ / τ), distance divided by √D when `per_dimension`.
#[pyfunction]
#[pyo3(signature = (r, r_prime, tau, per_dimension = true))]
fn kernel(r: Vec<f64>, r_prime: Vec<f64>, tau: f64, per_dimension: bool) -> PyResult<f64> {
    drift::kernel(&r, &r_prime, tau, scaling(per_dimension)).map_err(err)
}

/// Per-sample drift vectors (attraction minus repulsion) for a generated set
/// against a real set; returns one row per generated sample.
#[pyfunction]
#[pyo3(signature = (generated, real, tau, per_dimension = true))]
fn drift_field(
    generated: Vec<Vec<f64>>,
    real: Vec<Vec<f64>>,
    tau: f64,
    per_dimension: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let g = batch_from_rows(generated)?;
    let r = batch_from_rows(real)?;
    let out = drift::drift_field(&g, &r, tau, scaling(per_dimension)).map_err(err)?;
    let d = out.drift.len() / out.drift.shape()[0];
    Ok(out.drift.data().chunks(d).map(|c| c.to_vec()).collect())
}

/// Paired clean/noisy images: returns (x, y) flattened from [count,1,size,size].
#[pyfunction]
#[pyo3(signature = (count, size, seed, gaussian_sigma = 0.04, streak_sigma = 0.32, ndct_sigma = 0.01))]
fn simulate(
    count: usize,
    size: usize,
    seed: u64,
    gaussian_sigma: f64,
    streak_sigma: f64,
    ndct_sigma: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let model = NoiseModel { gaussian_sigma, streak_sigma, ndct_sigma };
    let ds = generate_dataset(count, size, &model, seed).map_err(err)?;
    let (x, y, _) = ds.stack().map_err(err)?;
    Ok((x.data().to_vec(), y.data().to_vec()))
}

#[pyfunction]
#[pyo3(signature = (test, reference, h, w, data_range = 1.0))]
fn psnr(test: Vec<f64>, reference: Vec<f64>, h: usize, w: usize, data_range: f64) -> PyResult<f64> {
    let t = Tensor::new(test, &[h, w]).map_err(err)?;
    let r = Tensor::new(reference, &[h, w]).map_err(err)?;
    metrics::psnr(&t, &r, data_range).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (test, reference, h, w, data_range = 1.0))]
fn ssim(test: Vec<f64>, reference: Vec<f64>, h: usize, w: usize, data_range: f64) -> PyResult<f64> {
    let t = Tensor::new(test, &[h, w]).map_err(err)?;
    let r = Tensor::new(reference, &[h, w]).map_err(err)?;
    metrics::ssim(&t, &r, data_range).map_err(err)
}

/// A trained denoiser: one generator evaluation per image.
#[pyclass]
struct Model {
    engine: InferenceEngine,
}

#[pymethods]
impl Model {
    /// Loads a checkpoint written by training (EMA weights by default).
    #[staticmethod]
    #[pyo3(signature = (path, use_ema = true))]
    fn load(path: &str, use_ema: bool) -> PyResult<Model> {
        let engine = trainer::load_engine(path.as_ref(), use_ema).map_err(err)?;
        Ok(Model { engine })
    }

    /// Denoises one flattened h×w image; `seed` fixes the base-noise draw.
    #[pyo3(signature = (y, h, w, seed = 0))]
    fn denoise(&self, y: Vec<f64>, h: usize, w: usize, seed: u64) -> PyResult<Vec<f64>> {
        let t = Tensor::new(y, &[1, 1, h, w]).map_err(err)?;
        let mut noise = NoiseSource::for_stream(seed, Stream::Inference, 0);
        let out = self.engine.denoise(&t, &mut noise).map_err(err)?;
        Ok(out.data().to_vec())
    }

    /// Generator evaluations so far (one per image).
    fn evaluations(&self) -> u64 {
        self.engine.evaluations()
    }
}

/// Trains on flattened paired stacks x/y of shape [count,1,size,size] and
/// returns the model. `use_ema` selects the averaged shadow (the inference
/// default) or the raw parameters; the shadow needs a long horizon before its
/// copy of the initial weights washes out, so short runs evaluate raw.
#[pyfunction]
#[pyo3(signature = (x, y, count, size, iterations, seed = 0, batch_size = 4, patch = 16,
                    base_channels = 8, depth = 2, temperatures = vec![1.0], lambda = 0.01,
                    use_ema = true))]
#[allow(clippy::too_many_arguments)]
fn train(
    x: Vec<f64>,
    y: Vec<f64>,
    count: usize,
    size: usize,
    iterations: u64,
    seed: u64,
    batch_size: usize,
    patch: usize,
    base_channels: usize,
    depth: usize,
    temperatures: Vec<f64>,
    lambda: f64,
    use_ema: bool,
) -> PyResult<Model> {
    let xt = Tensor::new(x, &[count, 1, size, size]).map_err(err)?;
    let yt = Tensor::new(y, &[count, 1, size, size]).map_err(err)?;
    let ds = Dataset::from_stacked(&xt, &yt).map_err(err)?;
    let cfg = TrainConfig {
        iterations,
        batch_size,
        patch,
        drift: DriftConfig { temperatures, lambda, ..DriftConfig::default() },
        generator: GeneratorConfig { base_channels, depth, seed, ..GeneratorConfig::default() },
        seed,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(err)?;
    let (state, _) = trainer::train(&cfg, &ds).map_err(err)?;
    let params = if use_ema { state.ema.shadow().clone() } else { state.params };
    let engine = InferenceEngine::new(cfg.generator.clone(), params).map_err(err)?;
    Ok(Model { engine })
}

#[pymodule]
fn rddm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kernel, m)?)?;
    m.add_function(wrap_pyfunction!(attraction, m)?)?;
    m.add_function(wrap_pyfunction!(repulsion, m)?)?;
    m.add_function(wrap_pyfunction!(drift_field, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
