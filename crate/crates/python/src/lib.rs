//! Python bindings: networks, single-image adaptation, synthetic data and
//! sweeps. Images cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use intent_core::adaptation::{self, AdaptationReport, LambdaGrid, Strategy};
use intent_core::error::ErrorKind;
use intent_core::harness::{run_sweep, ExperimentConfig};
use intent_core::kernel::Tensor;
use intent_core::network::{checkpoint, NetConfig, ProbMap, StatMode};
use intent_core::synthdata::{generate_range, DomainSpec};
use intent_core::{trainer, Error};

fn py_err(e: Error) -> PyErr {
    match e.kind() {
        ErrorKind::Config => PyValueError::new_err(e.to_string()),
        ErrorKind::Data => PyOSError::new_err(e.to_string()),
        ErrorKind::Internal => PyRuntimeError::new_err(e.to_string()),
    }
}

fn flatten<T: Copy>(rows: &[Vec<T>]) -> PyResult<(usize, usize, Vec<T>)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok((h, w, rows.concat()))
}

fn rows<T: Copy>(values: &[T], width: usize) -> Vec<Vec<T>> {
    values.chunks(width).map(<[T]>::to_vec).collect()
}

fn image_tensor(image: &[Vec<f32>]) -> PyResult<Tensor> {
    let (h, w, data) = flatten(image)?;
    Tensor::new(vec![1, 1, h, w], data).map_err(py_err)
}

fn prob_map(p: &[Vec<f32>]) -> PyResult<ProbMap> {
    let (h, w, data) = flatten(p)?;
    ProbMap::new(h, w, data).map_err(py_err)
}

fn strategy(name: &str) -> PyResult<Strategy> {
    name.parse().map_err(py_err)
}

/// Batch-normalized UNet for one-channel images.
#[pyclass(name = "Network", frozen)]
struct PyNetwork {
    inner: intent_core::network::Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (depth=3, base_width=8, seed=0))]
    fn new(depth: usize, base_width: usize, seed: u64) -> PyResult<Self> {
        let config = NetConfig {
            depth,
            base_width,
            ..NetConfig::default()
        };
        let inner = intent_core::network::Network::build(config, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(py_err)
    }

    /// Foreground probabilities with BN statistics mixed by `lam`
    /// (1 = tracked, 0 = the image's own).
    #[pyo3(signature = (image, lam=1.0))]
    fn forward(&self, image: Vec<Vec<f32>>, lam: f32) -> PyResult<Vec<Vec<f32>>> {
        let x = image_tensor(&image)?;
        let mode = StatMode::new(lam).map_err(py_err)?;
        let p = self.inner.forward(&x, mode).map_err(py_err)?;
        Ok(rows(p.values(), p.width()))
    }

    #[getter]
    fn forward_count(&self) -> u64 {
        self.inner.forward_count()
    }

    fn reset_forward_count(&self) {
        self.inner.reset_forward_count();
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Network(depth={}, base_width={})", c.depth, c.base_width)
    }
}

/// Result of adapting to one image.
#[pyclass(name = "AdaptationReport", frozen)]
struct PyReport {
    inner: AdaptationReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn strategy(&self) -> String {
        self.inner.strategy.to_string()
    }

    #[getter]
    fn lambdas(&self) -> Vec<f64> {
        self.inner.lambdas.clone()
    }

    #[getter]
    fn scores(&self) -> Vec<f64> {
        self.inner.scores.clone()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    #[getter]
    fn balanced_entropy(&self) -> Vec<f64> {
        self.inner.entropy.iter().map(|s| s.balanced()).collect()
    }

    #[getter]
    fn mean_entropy(&self) -> Vec<f64> {
        self.inner.entropy.iter().map(|s| s.mean_entropy).collect()
    }

    #[getter]
    fn sharpness(&self) -> Option<Vec<f64>> {
        self.inner.sharpness.clone()
    }

    #[getter]
    fn prediction(&self) -> Vec<Vec<f32>> {
        rows(self.inner.integrated.values(), self.inner.integrated.width())
    }

    #[getter]
    fn dice(&self) -> Option<f64> {
        self.inner.dice
    }

    #[getter]
    fn member_dice(&self) -> Option<Vec<f64>> {
        self.inner.member_dice.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("AdaptationReport(strategy={}, weights={:?})", self.inner.strategy, self.inner.weights)
    }
}

/// Adapts `net` to one image and integrates the grid members.
#[pyfunction]
#[pyo3(signature = (net, image, strategy="ENT_BALN", c=0.2, rho=adaptation::DEFAULT_RHO, mask=None))]
fn adapt(
    net: &PyNetwork,
    image: Vec<Vec<f32>>,
    strategy: &str,
    c: f64,
    rho: f64,
    mask: Option<Vec<Vec<bool>>>,
) -> PyResult<PyReport> {
    let x = image_tensor(&image)?;
    let grid = LambdaGrid::new(c).map_err(py_err)?;
    let mut report = adaptation::intent_adapt(&net.inner, &x, &grid, self::strategy(strategy)?, rho).map_err(py_err)?;
    if let Some(mask) = mask {
        let (_, _, gt) = flatten(&mask)?;
        report.score(&gt).map_err(py_err)?;
    }
    Ok(PyReport { inner: report })
}

/// Members of the lambda grid with step `c`.
#[pyfunction]
fn lambda_grid(c: f64) -> PyResult<Vec<f64>> {
    Ok(LambdaGrid::new(c).map_err(py_err)?.values().to_vec())
}

/// Dice of two binary masks; two empty masks score 1.
#[pyfunction]
fn dice(pred: Vec<Vec<bool>>, gt: Vec<Vec<bool>>) -> PyResult<f64> {
    let (_, _, a) = flatten(&pred)?;
    let (_, _, b) = flatten(&gt)?;
    trainer::dice(&a, &b).map_err(py_err)
}

#[pyfunction]
fn mask_entropy(p: Vec<Vec<f32>>) -> PyResult<f64> {
    Ok(adaptation::mask_entropy(&prob_map(&p)?))
}

/// Average of the foreground and background mean entropies.
#[pyfunction]
fn balanced_entropy(p: Vec<Vec<f32>>) -> PyResult<f64> {
    Ok(adaptation::balanced_entropy(&prob_map(&p)?).balanced())
}

/// Synthetic (image, mask) pairs of one domain.
#[pyfunction]
#[pyo3(signature = (
    name, count, height=64, width=64, seed=0, start=0,
    intensity_bias=0.0, contrast=1.0, gamma=1.0, noise_sigma=0.0, blur_radius=0,
))]
#[allow(clippy::too_many_arguments)]
fn generate(
    name: &str,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
    start: usize,
    intensity_bias: f32,
    contrast: f32,
    gamma: f32,
    noise_sigma: f32,
    blur_radius: usize,
) -> PyResult<Vec<(Vec<Vec<f32>>, Vec<Vec<bool>>)>> {
    let spec = DomainSpec {
        intensity_bias,
        contrast,
        gamma,
        noise_sigma,
        blur_radius,
        ..DomainSpec::identity(name)
    };
    let samples = generate_range(&spec, start, count, (height, width), seed).map_err(py_err)?;
    Ok(samples
        .iter()
        .map(|s| (rows(&s.image, s.width), rows(&s.mask, s.width)))
        .collect())
}

/// Runs a sweep from a JSON config and returns the result rows as
/// `(method, source, target, trial, dice)`.
#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn sweep(py: Python<'_>, config: PathBuf, out: Option<PathBuf>) -> PyResult<Vec<(String, String, String, usize, f64)>> {
    let cfg = ExperimentConfig::from_file(&config).map_err(py_err)?;
    let outcome = py.detach(|| run_sweep(&cfg, out.as_deref(), |_| {})).map_err(py_err)?;
    Ok(outcome
        .table
        .rows
        .into_iter()
        .map(|r| (r.method, r.source, r.target, r.trial, r.dice))
        .collect())
}

#[pymodule]
fn intent_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(adapt, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_grid, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(mask_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    let names: Vec<String> = Strategy::ALL.iter().map(ToString::to_string).collect();
    m.add("STRATEGIES", names)?;
    Ok(())
}
