//! Python bindings for `fsl_engage`.

use std::path::PathBuf;

use fsl_engage::annotation::{self, Engagement};
use fsl_engage::baseline::{train_baseline, BaselineModel};
use fsl_engage::data::{self, Split};
use fsl_engage::evaluator;
use fsl_engage::gradcheck::run_suites;
use fsl_engage::losses::{self, Distance, EpisodeBatch, LossConfig};
use fsl_engage::projection;
use fsl_engage::sampler::EpisodeSpec;
use fsl_engage::synth::{generate, SynthConfig};
use fsl_engage::trainer::{train_fsl, Method, TrainConfig};
use fsl_engage::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io { .. } => PyOSError::new_err(err.to_string()),
        e if e.is_validation() || matches!(e, Error::Sampler(_)) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// Game-specific class id `2 * domain + y` (generally `num * domain + y`).
#[pyfunction]
#[pyo3(signature = (y, domain, num_binary_classes = 2))]
fn relabel(y: u32, domain: u32, num_binary_classes: u32) -> PyResult<u32> {
    annotation::relabel(y, domain, num_binary_classes).map_err(to_py)
}

/// Inverse of `relabel`: returns `(y, domain)`.
#[pyfunction]
#[pyo3(signature = (y_class, num_binary_classes = 2))]
fn decode(y_class: u32, num_binary_classes: u32) -> PyResult<(u32, u32)> {
    if num_binary_classes == 0 {
        return Err(PyValueError::new_err("num_binary_classes must be positive"));
    }
    Ok(annotation::decode(y_class, num_binary_classes))
}

/// `"high"`, `"low"` or `"discarded"` for a window mean against the median.
#[pyfunction]
#[pyo3(signature = (engagement, median, epsilon = 0.1))]
fn binarize(engagement: f64, median: f64, epsilon: f64) -> &'static str {
    match annotation::binarize(engagement, median, epsilon) {
        Engagement::High => "high",
        Engagement::Low => "low",
        Engagement::Discarded => "discarded",
    }
}

#[pyclass(name = "ProjectionModel", module = "fsl_engage_py")]
struct PyProjection {
    inner: projection::ProjectionModel,
}

#[pymethods]
impl PyProjection {
    #[new]
    #[pyo3(signature = (dim, seed = 0))]
    fn new(dim: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: projection::ProjectionModel::init(dim, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = data::read_checkpoint(&path).map_err(to_py)?;
        Ok(Self { inner: projection::ProjectionModel::from_checkpoint(&ckpt).map_err(to_py)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn bias(&self) -> Vec<f64> {
        self.inner.bias().to_vec()
    }

    fn project(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.inner.dim() {
            return Err(PyValueError::new_err(format!("expected {} values, got {}", self.inner.dim(), x.len())));
        }
        Ok(self.inner.project(&x))
    }

    fn __repr__(&self) -> String {
        format!("ProjectionModel(dim={})", self.inner.dim())
    }
}

#[pyclass(name = "Dataset", module = "fsl_engage_py")]
struct PyDataset {
    inner: data::LabeledDataset,
}

#[pymethods]
impl PyDataset {
    /// Loads a dataset directory (`manifest.json`, `labels.csv`, `embeddings.emb`).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: data::read_labeled_dataset(&path).map_err(to_py)? })
    }

    fn __len__(&self) -> usize {
        self.inner.samples().len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn subcorpus_median(&self) -> f64 {
        self.inner.subcorpus_median()
    }

    /// Class ids present in a split, ascending.
    fn classes(&self, split: &str) -> PyResult<Vec<u32>> {
        Ok(self.inner.classes_in(parse::<Split>(split)?).into_keys().collect())
    }

    /// `(game_id, window_index, y_binary, y_class, vector)` of sample `i`.
    fn sample(&self, i: usize) -> PyResult<(u32, u32, u8, u32, Vec<f64>)> {
        let s = self
            .inner
            .samples()
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("sample {i} out of range")))?;
        Ok((s.game_id, s.window_index, s.y_binary, s.y_class, s.vector.clone()))
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = annotation::DatasetStats::of(&self.inner);
        let d = PyDict::new(py);
        d.set_item("samples", s.samples)?;
        d.set_item("games", s.games)?;
        d.set_item("train_games", s.train_games)?;
        d.set_item("valid_games", s.valid_games)?;
        d.set_item("test_games", s.test_games)?;
        d.set_item("binary_majority_pct", s.binary_majority_pct)?;
        Ok(d)
    }
}

fn batch(
    support: Vec<Vec<f64>>,
    support_classes: Vec<u32>,
    query: Vec<Vec<f64>>,
    query_classes: Vec<u32>,
) -> EpisodeBatch {
    EpisodeBatch { support, support_classes, query, query_classes }
}

/// Episode loss of `method` (`pn`, `mn` or `sc`) and its gradients with
/// respect to the support and query embeddings.
#[pyfunction]
#[pyo3(signature = (method, support, support_classes, query, query_classes, squared = false, tau = 0.07))]
#[allow(clippy::type_complexity)]
fn episode_loss(
    method: &str,
    support: Vec<Vec<f64>>,
    support_classes: Vec<u32>,
    query: Vec<Vec<f64>>,
    query_classes: Vec<u32>,
    squared: bool,
    tau: f64,
) -> PyResult<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let cfg = LossConfig { distance: if squared { Distance::SquaredEuclidean } else { Distance::Euclidean }, tau };
    let b = batch(support, support_classes, query, query_classes);
    let out = match parse::<Method>(method)? {
        Method::Pn => losses::pn_loss(&b, &cfg),
        Method::Mn => losses::mn_loss(&b),
        Method::Sc => losses::sc_loss(&b, &cfg),
        Method::Baseline => return Err(PyValueError::new_err("the baseline has no episode loss")),
    }
    .map_err(to_py)?;
    Ok((out.loss, out.d_support, out.d_query))
}

/// Nearest-prototype predictions for the query set.
#[pyfunction]
fn predict(support: Vec<Vec<f64>>, support_classes: Vec<u32>, query: Vec<Vec<f64>>) -> PyResult<Vec<u32>> {
    // Query labels are unused by prediction; any support class satisfies validation.
    let placeholder = vec![support_classes.first().copied().unwrap_or(0); query.len()];
    losses::predict(&batch(support, support_classes, query, placeholder), &LossConfig::default()).map_err(to_py)
}

/// Writes a synthetic dataset directory and returns its sample count.
#[pyfunction]
#[pyo3(signature = (out_dir, n_domains = 12, samples_per_class = 30, dim = 16, cluster_spread = 0.1,
                    inter_class_gap = 1.0, flip_fraction = 0.5, split_counts = (4, 4, 4), seed = 0))]
#[allow(clippy::too_many_arguments)]
fn synth(
    out_dir: PathBuf,
    n_domains: usize,
    samples_per_class: usize,
    dim: usize,
    cluster_spread: f64,
    inter_class_gap: f64,
    flip_fraction: f64,
    split_counts: (usize, usize, usize),
    seed: u64,
) -> PyResult<usize> {
    let out = generate(&SynthConfig {
        n_domains,
        samples_per_class,
        dim,
        cluster_spread,
        inter_class_gap,
        flip_fraction,
        split_counts,
        seed,
    })
    .map_err(to_py)?;
    out.write(&out_dir).map_err(to_py)?;
    Ok(out.labels.len())
}

/// Trains `method` on a dataset directory, writes the checkpoint to `out`
/// and returns `(best_epoch, best_val_accuracy, epochs_run)`.
#[pyfunction]
#[pyo3(signature = (data_dir, method, out, n_way = 5, k_shot = 5, seed = 0, lr = 5e-3, max_epochs = 200))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data_dir: PathBuf,
    method: &str,
    out: PathBuf,
    n_way: usize,
    k_shot: usize,
    seed: u64,
    lr: f64,
    max_epochs: usize,
) -> PyResult<(usize, f64, usize)> {
    let method = parse::<Method>(method)?;
    let dataset = data::read_labeled_dataset(&data_dir).map_err(to_py)?;
    let config = TrainConfig { lr0: lr, max_epochs, ..TrainConfig::fsl(method, n_way, k_shot, seed) };
    let (ckpt, log) = py
        .detach(|| {
            if method == Method::Baseline {
                train_baseline(&dataset, &config).map(|(m, log)| (m.to_checkpoint(seed, config.hash()), log))
            } else {
                train_fsl(&dataset, &config)
            }
        })
        .map_err(to_py)?;
    data::write_checkpoint(&ckpt, &out).map_err(to_py)?;
    Ok((log.best_epoch, log.best_val_accuracy, log.epochs.len()))
}

/// Per-episode test accuracies of a checkpoint; a baseline checkpoint
/// yields its single binary test accuracy.
#[pyfunction]
#[pyo3(signature = (checkpoint, data_dir, n_way = 5, k_shot = 5, q_query = 5, episodes = 200, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    checkpoint: PathBuf,
    data_dir: PathBuf,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    episodes: usize,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let ckpt = data::read_checkpoint(&checkpoint).map_err(to_py)?;
    let dataset = data::read_labeled_dataset(&data_dir).map_err(to_py)?;
    py.detach(|| {
        if ckpt.metadata.head.is_some() {
            let model = BaselineModel::from_checkpoint(&ckpt)?;
            return fsl_engage::baseline::eval_binary(&model, &dataset, Split::Test).map(|a| vec![a]);
        }
        let spec = EpisodeSpec { n_way, k_shot, q_query, split: Split::Test, seed };
        evaluator::evaluate_checkpoint(&ckpt, &dataset, spec, episodes, &LossConfig::default())
    })
    .map_err(to_py)
}

/// `(mean, ci95_half_width)` of a list of accuracies.
#[pyfunction]
fn mean_ci(values: Vec<f64>) -> PyResult<(f64, f64)> {
    if values.is_empty() {
        return Err(PyValueError::new_err("no values"));
    }
    Ok(evaluator::mean_ci(&values))
}

/// `"on_par"`, `"first_higher"` or `"second_higher"` for two `(low, high)` intervals.
#[pyfunction]
fn compare(a: (f64, f64), b: (f64, f64)) -> &'static str {
    match evaluator::compare_intervals(a, b) {
        evaluator::Verdict::OnPar => "on_par",
        evaluator::Verdict::FirstHigher => "first_higher",
        evaluator::Verdict::SecondHigher => "second_higher",
    }
}

/// Runs every finite-difference suite; returns `(name, max_rel_err, passed)`.
#[pyfunction]
#[pyo3(signature = (dim = 8, trials = 10, seed = 0))]
fn gradcheck(dim: usize, trials: usize, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    Ok(run_suites(dim, trials, seed)
        .map_err(to_py)?
        .into_iter()
        .map(|r| (r.name, r.max_rel_err, r.passed))
        .collect())
}

/// Runs the command-line tool in-process with `argv` (without program name).
#[pyfunction]
fn run_cli(py: Python<'_>, argv: Vec<String>) -> i32 {
    let full: Vec<String> = std::iter::once("fsl-engage".to_string()).chain(argv).collect();
    py.detach(|| fsl_engage::cli::run_command(full))
}

#[pymodule]
fn fsl_engage_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", fsl_engage::VERSION)?;
    m.add_class::<PyProjection>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(relabel, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(episode_loss, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(mean_ci, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
