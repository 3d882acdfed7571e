//! Python bindings. Maps and images travel as flat row-major lists with explicit sizes.

use std::path::PathBuf;

use densehybrid::data::{gen_toy2d, manifest::role_name, ToyPointSet};
use densehybrid::experiments::score_maps as core_score_maps;
use densehybrid::labels::LabelMap;
use densehybrid::losses::{loss_total, PixelRoleMask};
use densehybrid::math::{stable_log_sum_exp, AnomalyScoreMap, DatasetPosteriorMap, LogitMap};
use densehybrid::metrics::{self, ScoredPixelSet};
use densehybrid::nn::{checkpoint, forward, Checkpoint, ModelParams, NetworkConfig, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(densehybrid_py, DenseHybridError, PyException);

fn err(e: densehybrid::Error) -> PyErr {
    DenseHybridError::new_err(e.to_string())
}

fn scored(scores: Vec<f64>, truth: Vec<bool>) -> PyResult<ScoredPixelSet> {
    ScoredPixelSet::new(scores, truth).map_err(err)
}

/// A dense model: shared feature stages, a K-way classifier and a dataset-posterior head.
#[pyclass(module = "densehybrid_py")]
struct Model {
    params: ModelParams,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (input_channels, widths, num_classes, kernel_size = 3, seed = 0))]
    fn new(
        input_channels: usize,
        widths: Vec<usize>,
        num_classes: usize,
        kernel_size: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let params = ModelParams::init(NetworkConfig {
            input_channels,
            widths,
            num_classes,
            kernel_size,
            seed,
        })
        .map_err(err)?;
        Ok(Model { params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            params: checkpoint::load(&path).map_err(err)?.params,
        })
    }

    /// Writes the weights only; training state is not kept.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(
            &path,
            &Checkpoint {
                params: self.params.clone(),
                progress: None,
            },
        )
        .map_err(err)
    }

    #[getter]
    fn input_channels(&self) -> usize {
        self.params.config().input_channels
    }

    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.params.config().widths.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.params.config().num_classes
    }

    #[getter]
    fn kernel_size(&self) -> usize {
        self.params.config().kernel_size
    }

    fn num_parameters(&self) -> usize {
        self.params.tensors().iter().map(Tensor::len).sum()
    }

    /// Runs one CHW image and returns logits (HWK), the dataset posterior and the three score maps.
    fn forward<'py>(
        &self,
        py: Python<'py>,
        image: Vec<f64>,
        height: usize,
        width: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let c = self.params.config().input_channels;
        let x = Tensor::from_vec([1, c, height, width], image).map_err(err)?;
        let out = forward(&self.params, &x)
            .map_err(err)?
            .pop()
            .ok_or_else(|| DenseHybridError::new_err("forward returned no outputs"))?;
        let maps = core_score_maps(&out).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("logits", out.logits.values().to_vec())?;
        d.set_item("posterior", out.posterior.values().to_vec())?;
        d.set_item("hybrid", maps.hybrid.values().to_vec())?;
        d.set_item("generative", maps.generative.values().to_vec())?;
        d.set_item("discriminative", maps.discriminative.values().to_vec())?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let c = self.params.config();
        format!(
            "Model(input_channels={}, widths={:?}, num_classes={}, kernel_size={})",
            c.input_channels, c.widths, c.num_classes, c.kernel_size
        )
    }
}

#[pyfunction]
fn log_sum_exp(values: Vec<f64>) -> PyResult<f64> {
    stable_log_sum_exp(&values).map_err(err)
}

/// Hybrid, generative and discriminative maps from HWK logits and per-pixel head logits.
#[pyfunction]
fn score_maps<'py>(
    py: Python<'py>,
    logits: Vec<f64>,
    head_logits: Vec<f64>,
    height: usize,
    width: usize,
    num_classes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let logits = LogitMap::new(height, width, num_classes, logits).map_err(err)?;
    let din = DatasetPosteriorMap::from_logits(height, width, &head_logits).map_err(err)?;
    let log_px = densehybrid::math::unnormalized_log_likelihood(&logits);
    let d = PyDict::new(py);
    d.set_item(
        "hybrid",
        densehybrid::math::hybrid_score(&din, &log_px)
            .map_err(err)?
            .values()
            .to_vec(),
    )?;
    d.set_item(
        "generative",
        densehybrid::math::generative_score(&log_px)
            .map_err(err)?
            .values()
            .to_vec(),
    )?;
    d.set_item(
        "discriminative",
        densehybrid::math::discriminative_score(&din)
            .map_err(err)?
            .values()
            .to_vec(),
    )?;
    Ok(d)
}

/// Compound loss of one image. Labels use K for outliers and 255 for ignored pixels.
#[pyfunction]
#[pyo3(signature = (logits, head_logits, labels, height, width, num_classes, beta = 0.03))]
#[allow(clippy::too_many_arguments)]
fn compound_loss<'py>(
    py: Python<'py>,
    logits: Vec<f64>,
    head_logits: Vec<f64>,
    labels: Vec<u8>,
    height: usize,
    width: usize,
    num_classes: usize,
    beta: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let logits = LogitMap::new(height, width, num_classes, logits).map_err(err)?;
    let din = DatasetPosteriorMap::from_logits(height, width, &head_logits).map_err(err)?;
    let labels = LabelMap::new(height, width, num_classes, labels).map_err(err)?;
    let mask = PixelRoleMask::from_labels(&labels);
    let b = loss_total(&logits, &din, &labels, &mask, beta).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("cls", b.cls)?;
    d.set_item("posterior_in", b.posterior_in)?;
    d.set_item("posterior_out", b.posterior_out)?;
    d.set_item("likelihood_out", b.likelihood_out)?;
    d.set_item("total", b.total)?;
    Ok(d)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, truth: Vec<bool>) -> PyResult<f64> {
    metrics::average_precision(&scored(scores, truth)?).map_err(err)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, truth: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&scored(scores, truth)?).map_err(err)
}

/// Returns `(tau, fpr, achieved_tpr)`.
#[pyfunction]
#[pyo3(signature = (scores, truth, target_tpr = metrics::DEFAULT_TARGET_TPR))]
fn fpr_at_tpr(scores: Vec<f64>, truth: Vec<bool>, target_tpr: f64) -> PyResult<(f64, f64, f64)> {
    let c = metrics::fpr_at_tpr(&scored(scores, truth)?, target_tpr).map_err(err)?;
    Ok((c.tau, c.fpr, c.achieved_tpr))
}

/// Open-set labels: pixels with `score >= tau` become K, the rest keep the closed prediction.
#[pyfunction]
fn fuse_labels(
    closed: Vec<u8>,
    scores: Vec<f64>,
    height: usize,
    width: usize,
    num_classes: usize,
    tau: f64,
) -> PyResult<Vec<u32>> {
    let closed = LabelMap::new(height, width, num_classes, closed).map_err(err)?;
    let scores = AnomalyScoreMap::new(height, width, scores).map_err(err)?;
    let open = metrics::fuse_labels(&closed, &scores, tau).map_err(err)?;
    Ok(open.values().iter().map(|&l| l as u32).collect())
}

fn toy_rows(set: &ToyPointSet) -> Vec<(f64, f64, String)> {
    set.points.iter().map(|p| (p.x, p.y, role_name(p.role))).collect()
}

/// Toy 2-D dataset as `(train, test)` lists of `(x, y, role)`.
#[pyfunction]
#[pyo3(signature = (seed, n_per_role = 400))]
#[allow(clippy::type_complexity)]
fn toy2d(seed: u64, n_per_role: usize) -> PyResult<(Vec<(f64, f64, String)>, Vec<(f64, f64, String)>)> {
    let (train, test) = gen_toy2d(seed, n_per_role).map_err(err)?;
    Ok((toy_rows(&train), toy_rows(&test)))
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("densehybrid".to_string()).chain(args).collect();
    py.detach(|| densehybrid::cli::run(argv))
}

#[pymodule]
fn densehybrid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DenseHybridError", m.py().get_type::<DenseHybridError>())?;
    m.add("IGNORE_LABEL", densehybrid::labels::IGNORE_LABEL)?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(log_sum_exp, m)?)?;
    m.add_function(wrap_pyfunction!(score_maps, m)?)?;
    m.add_function(wrap_pyfunction!(compound_loss, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(fpr_at_tpr, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_labels, m)?)?;
    m.add_function(wrap_pyfunction!(toy2d, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
