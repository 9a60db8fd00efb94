//! Python bindings: datasets, networks, training, the distance-rule attack,
//! and whole-study execution from JSON configs.

use hijacklab_core::{analysis, compression, config, datasets, hijack, network, runner, training};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::{Path, PathBuf};

fn to_py(e: hijacklab_core::Error) -> PyErr {
    use hijacklab_core::Error as E;
    match e {
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        E::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_source(source: &str, net: &network::Network) -> PyResult<network::TapPoint> {
    let spec = config::SourceSpec::try_from(source.to_string()).map_err(PyValueError::new_err)?;
    let tap = spec.resolve(net.hidden_count());
    if let network::TapPoint::Layer(k) = tap {
        if k >= net.hidden_count() {
            return Err(PyValueError::new_err(format!(
                "layer {k} out of range: network has {} hidden layers",
                net.hidden_count()
            )));
        }
    }
    Ok(tap)
}

fn parse_metric(metric: &str) -> PyResult<hijack::Metric> {
    match metric {
        "l2" => Ok(hijack::Metric::L2),
        "cosine" => Ok(hijack::Metric::Cosine),
        other => Err(PyValueError::new_err(format!("unknown metric '{other}'"))),
    }
}

/// A dual-labeled dataset.
#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: datasets::LabeledDataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name='{}', samples={}, dim={}, n={}, m={})",
            self.inner.name,
            self.inner.len(),
            self.inner.feature_dim,
            self.inner.n_classes_original,
            self.inner.n_classes_hijack
        )
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim
    }

    #[getter]
    fn n_classes_original(&self) -> usize {
        self.inner.n_classes_original
    }

    #[getter]
    fn n_classes_hijack(&self) -> usize {
        self.inner.n_classes_hijack
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    /// (features, original_label, hijack_label) of sample `i`.
    fn sample(&self, i: usize) -> PyResult<(Vec<f64>, usize, Option<usize>)> {
        let s = self
            .inner
            .samples
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))?;
        Ok((s.features.clone(), s.original_label, s.hijack_label))
    }

    /// Deterministic train/test split.
    #[pyo3(signature = (train_fraction, seed, stratify_by="original"))]
    fn split(
        &self,
        train_fraction: f64,
        seed: u64,
        stratify_by: &str,
    ) -> PyResult<(PyDataset, PyDataset)> {
        let stratify = match stratify_by {
            "original" => datasets::Stratify::Original,
            "hijack" => datasets::Stratify::Hijack,
            "none" => datasets::Stratify::None,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown stratification '{other}'"
                )))
            }
        };
        let (train, test) = datasets::split(
            &self.inner,
            &datasets::SplitSpec {
                train_fraction,
                seed,
                stratify_by: stratify,
            },
        )
        .map_err(to_py)?;
        Ok((PyDataset { inner: train }, PyDataset { inner: test }))
    }

    /// Swap the two label sets (the hijack task becomes the original task).
    fn with_hijack_as_original(&self) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: self.inner.with_hijack_as_original().map_err(to_py)?,
        })
    }
}

/// A feedforward network with per-layer taps.
#[pyclass(name = "Network", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: network::Network,
}

#[pymethods]
impl PyNetwork {
    fn __repr__(&self) -> String {
        format!(
            "Network(widths={:?}, params={})",
            self.inner.realized_widths,
            self.inner.param_count()
        )
    }

    #[getter]
    fn realized_widths(&self) -> Vec<usize> {
        self.inner.realized_widths.clone()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn hidden_count(&self) -> usize {
        self.inner.hidden_count()
    }

    /// All hidden activations plus the logits for one input.
    fn forward(&self, x: Vec<f64>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let trace = self.inner.forward(&x).map_err(to_py)?;
        Ok((trace.hidden, trace.logits))
    }

    /// One activation vector: source is "logits", "last_hidden", or "layer:<k>".
    fn tap(&self, x: Vec<f64>, source: &str) -> PyResult<Vec<f64>> {
        let tap = parse_source(source, &self.inner)?;
        let trace = self.inner.forward(&x).map_err(to_py)?;
        network::tap(&trace, tap).map_err(to_py)
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        self.inner.predict(&x).map_err(to_py)
    }

    /// Serialize to the binary model format.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let bytes = network::serialize(&self.inner).map_err(to_py)?;
        std::fs::write(&path, bytes)
            .map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyNetwork> {
        let bytes = std::fs::read(&path)
            .map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        Ok(PyNetwork {
            inner: network::deserialize(&bytes).map_err(to_py)?,
        })
    }
}

#[pyfunction]
#[pyo3(signature = (n_orig, m_hijack, dim, n_per_cell, orig_sep, hijack_sep, noise_sigma, seed))]
#[allow(clippy::too_many_arguments)]
fn generate_dual_blobs(
    n_orig: usize,
    m_hijack: usize,
    dim: usize,
    n_per_cell: usize,
    orig_sep: f64,
    hijack_sep: f64,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: datasets::generate_dual_blobs(
            n_orig, m_hijack, dim, n_per_cell, orig_sep, hijack_sep, noise_sigma, seed,
        )
        .map_err(to_py)?,
    })
}

#[pyfunction]
fn load_csv(path: PathBuf, has_hijack_column: bool) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: datasets::load_csv(path, has_hijack_column).map_err(to_py)?,
    })
}

#[pyfunction]
fn load_idx_images(images: PathBuf, labels: PathBuf) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: datasets::load_idx_images(images, labels).map_err(to_py)?,
    })
}

#[pyfunction]
#[pyo3(signature = (layer_widths, activation="relu", width_expansion=1.0, init="he", sigma=0.5, seed=0))]
fn build_network(
    layer_widths: Vec<usize>,
    activation: &str,
    width_expansion: f64,
    init: &str,
    sigma: f64,
    seed: u64,
) -> PyResult<PyNetwork> {
    let activation = match activation {
        "relu" => network::Activation::Relu,
        "tanh" => network::Activation::Tanh,
        other => return Err(PyValueError::new_err(format!("unknown activation '{other}'"))),
    };
    let init = match init {
        "he" => network::InitScheme::He,
        "gaussian" => network::InitScheme::Gaussian { sigma },
        other => return Err(PyValueError::new_err(format!("unknown init '{other}'"))),
    };
    let spec = network::NetworkSpec::new(layer_widths, activation, width_expansion, init, seed);
    Ok(PyNetwork {
        inner: network::build(&spec).map_err(to_py)?,
    })
}

fn train_cfg(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64, shuffle: bool) -> training::TrainConfig {
    training::TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        seed,
        shuffle,
    }
}

fn train_report_dict<'py>(py: Python<'py>, report: &training::TrainReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch_losses", report.epoch_losses.clone())?;
    d.set_item("train_accuracy", report.train_accuracy)?;
    d.set_item("test_accuracy", report.test_accuracy)?;
    d.set_item("wall_clock_s", report.wall_clock_s)?;
    Ok(d)
}

/// Train on the original task with plain SGD.
#[pyfunction]
#[pyo3(signature = (net, ds, epochs, batch_size, learning_rate, seed, shuffle=true))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    net: &PyNetwork,
    ds: &PyDataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    shuffle: bool,
) -> PyResult<(PyNetwork, Bound<'py, PyDict>)> {
    let cfg = train_cfg(epochs, batch_size, learning_rate, seed, shuffle);
    let (trained, report) = training::train(&net.inner, &ds.inner, &cfg).map_err(to_py)?;
    Ok((PyNetwork { inner: trained }, train_report_dict(py, &report)?))
}

/// Train on the original task while unlearning the hijack task.
#[pyfunction]
#[pyo3(signature = (net, ds, epochs, batch_size, seed, alpha, beta, mode="commit_both", shuffle=true))]
#[allow(clippy::too_many_arguments)]
fn meta_unlearn_train<'py>(
    py: Python<'py>,
    net: &PyNetwork,
    ds: &PyDataset,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    alpha: f64,
    beta: f64,
    mode: &str,
    shuffle: bool,
) -> PyResult<(PyNetwork, Bound<'py, PyDict>)> {
    let mode = match mode {
        "commit_both" => training::UnlearnMode::CommitBoth,
        "evaluate_only" => training::UnlearnMode::EvaluateOnly,
        other => return Err(PyValueError::new_err(format!("unknown mode '{other}'"))),
    };
    let cfg = train_cfg(epochs, batch_size, alpha, seed, shuffle);
    let ucfg = training::UnlearnConfig {
        alpha,
        beta,
        mode,
        tap: None,
    };
    let (trained, report) =
        training::meta_unlearn_train(&net.inner, &ds.inner, &cfg, &ucfg).map_err(to_py)?;
    Ok((PyNetwork { inner: trained }, train_report_dict(py, &report)?))
}

/// Train a surrogate classifier on extracted vectors.
#[pyfunction]
#[pyo3(signature = (vectors, labels, epochs, batch_size, learning_rate, seed))]
fn train_surrogate(
    vectors: Vec<Vec<f64>>,
    labels: Vec<usize>,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> PyResult<PyNetwork> {
    let cfg = train_cfg(epochs, batch_size, learning_rate, seed, true);
    Ok(PyNetwork {
        inner: training::train_surrogate(&vectors, &labels, &cfg).map_err(to_py)?,
    })
}

/// Accuracy of a network on a dataset's original labels.
#[pyfunction]
fn dataset_accuracy(net: &PyNetwork, ds: &PyDataset) -> PyResult<f64> {
    training::dataset_accuracy(&net.inner, &ds.inner).map_err(to_py)
}

/// Run the whole distance-rule attack against a frozen network.
///
/// References are selected per class from `ds` (seeded) and withheld from
/// the query set. Returns the attack report as a dict.
#[pyfunction]
#[pyo3(signature = (net, ds, source="last_hidden", metric="l2", n_max=1, samples_per_class=1, seed=0))]
#[allow(clippy::too_many_arguments)]
fn attack<'py>(
    py: Python<'py>,
    net: &PyNetwork,
    ds: &PyDataset,
    source: &str,
    metric: &str,
    n_max: usize,
    samples_per_class: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let tap = parse_source(source, &net.inner)?;
    let metric = parse_metric(metric)?;
    let sel = datasets::build_reference_db_from(&ds.inner, samples_per_class, seed).map_err(to_py)?;
    let outcome = hijack::run_attack(
        &net.inner,
        tap,
        &sel.references,
        &sel.queries.samples,
        metric,
        n_max,
        seed,
    )
    .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("top_n", outcome.report.top_n.clone())?;
    d.set_item("lower_bound", outcome.report.lower_bound)?;
    d.set_item("metric", outcome.report.metric.clone())?;
    d.set_item("source", outcome.report.source.clone())?;
    d.set_item("m", outcome.report.m)?;
    d.set_item("num_queries", outcome.report.num_queries)?;
    d.set_item("seed", outcome.report.seed)?;
    d.set_item("zero_vector_flags", outcome.zero_vector_flags)?;
    Ok(d)
}

/// Distance between two vectors under "l2" or "cosine".
#[pyfunction]
fn distance(a: Vec<f64>, b: Vec<f64>, metric: &str) -> PyResult<f64> {
    hijack::distance(&a, &b, parse_metric(metric)?).map_err(to_py)
}

/// Pearson correlation; NaN when either series is constant.
#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err("series lengths differ"));
    }
    Ok(analysis::pearson(&x, &y))
}

#[pyfunction]
fn hijack_lower_bound(m: usize) -> PyResult<f64> {
    hijack::hijack_lower_bound(m).map_err(to_py)
}

/// Keep the k largest logits in place, masking the rest with the minimum.
#[pyfunction]
fn truncate_logits(values: Vec<f64>, k: usize) -> PyResult<Vec<f64>> {
    let bek = hijack::BekVector {
        values,
        source: network::TapPoint::Logits,
        sample_id: 0,
    };
    Ok(hijack::truncate_logits(&bek, k).map_err(to_py)?.values)
}

/// TOPSIS over (loss, params) cost rows: returns (selected index, closeness).
#[pyfunction]
#[pyo3(signature = (rows, w_loss=0.5, w_params=0.5))]
fn topsis_rank(rows: Vec<(f64, f64)>, w_loss: f64, w_params: f64) -> PyResult<(usize, Vec<f64>)> {
    let outcome = compression::topsis_rank(&rows, &compression::TopsisConfig { w_loss, w_params })
        .map_err(to_py)?;
    Ok((outcome.selected, outcome.closeness))
}

/// Distance-preservation statistics of random projections, as a dict.
#[pyfunction]
fn random_projection_check<'py>(
    py: Python<'py>,
    dims_in: usize,
    dims_out: usize,
    n_points: usize,
    n_trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let stats = analysis::random_projection_check(dims_in, dims_out, n_points, n_trials, seed)
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("dims_in", stats.dims_in)?;
    d.set_item("dims_out", stats.dims_out)?;
    d.set_item("linear_median_max_distortion", stats.linear_median_max_distortion)?;
    d.set_item("mlp_ratio_mean", stats.mlp_ratio_mean)?;
    d.set_item("mlp_ratio_median", stats.mlp_ratio_median)?;
    d.set_item("mlp_ratio_min", stats.mlp_ratio_min)?;
    d.set_item("mlp_ratio_max", stats.mlp_ratio_max)?;
    Ok(d)
}

/// Validate and execute a full study from a JSON config string.
///
/// Returns the report as a JSON string; when `output_dir` is given the
/// report (and any exports) are also written there.
#[pyfunction]
#[pyo3(signature = (config_json, output_dir=None))]
fn run_study(config_json: &str, output_dir: Option<PathBuf>) -> PyResult<String> {
    let value: serde_json::Value = serde_json::from_str(config_json)
        .map_err(|e| PyValueError::new_err(format!("invalid JSON: {e}")))?;
    let cfg = config::validate_value(&value, Path::new("."))
        .map_err(|violations| {
            let joined = violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            PyValueError::new_err(joined)
        })?;
    let report = match output_dir {
        Some(dir) => runner::run_to_dir(&cfg, &dir).map_err(to_py)?,
        None => runner::run(&cfg).map_err(to_py)?,
    };
    report.to_json().map_err(to_py)
}

#[pymodule]
fn hijacklab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(generate_dual_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx_images, m)?)?;
    m.add_function(wrap_pyfunction!(build_network, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(meta_unlearn_train, m)?)?;
    m.add_function(wrap_pyfunction!(train_surrogate, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(distance, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(hijack_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(truncate_logits, m)?)?;
    m.add_function(wrap_pyfunction!(topsis_rank, m)?)?;
    m.add_function(wrap_pyfunction!(random_projection_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    Ok(())
}
