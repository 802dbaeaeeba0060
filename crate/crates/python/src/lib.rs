//! Python bindings: cost arithmetic, metrics, partition statistics, tuned
//! payload sizes, parameter files and grid execution.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fedpeft::data::{gen_synthetic_task, heterogeneity_metrics, partition, PartitionSpec, SyntheticSpec};
use fedpeft::harness::{self, Backbone, RunOptions, TaskConfig};
use fedpeft::metrics::{self, ConvergenceRule};
use fedpeft::tuning::{build_tuning, tuned_param_bytes, TuningKind, TuningStrategy};
use fedpeft::{Error, ParamSet};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::Config(_) | Error::Parse { .. } | Error::Partition(_) | Error::Label { .. } | Error::UndefinedMetric(_)) => {
            PyValueError::new_err(e.to_string())
        }
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} '{value}'")))
}

/// Total bytes moved: `rounds * clients * payload_bytes * 2`.
#[pyfunction]
fn comm_cost(rounds: u64, clients: u64, payload_bytes: u64) -> u64 {
    fedpeft::cost::comm_cost(rounds, clients, payload_bytes).total_bytes
}

#[pyfunction]
fn comm_cost_mb(rounds: u64, clients: u64, payload_kb: f64) -> f64 {
    fedpeft::cost::comm_cost_mb(rounds, clients, payload_kb)
}

/// 1-based convergence round of a train-accuracy history, or None.
#[pyfunction]
#[pyo3(signature = (history, target = 0.99, plateau = 0.005))]
fn convergence_round(history: Vec<f64>, target: f64, plateau: f64) -> PyResult<Option<usize>> {
    let rule = ConvergenceRule { target, plateau };
    rule.validate().map_err(to_py)?;
    Ok(metrics::convergence_round(&history, &rule))
}

#[pyfunction]
fn macro_f1(predictions: Vec<usize>, labels: Vec<usize>, classes: usize) -> PyResult<f64> {
    if predictions.len() != labels.len() {
        return Err(PyValueError::new_err("predictions and labels differ in length"));
    }
    Ok(metrics::macro_f1(&predictions, &labels, classes))
}

/// Pooled accuracy of `(correct, total)` pairs.
#[pyfunction]
fn weighted_accuracy(per_client: Vec<(usize, usize)>) -> PyResult<f64> {
    metrics::weighted_accuracy(&per_client).map_err(to_py)
}

/// Per-client label histograms and heterogeneity statistics of one
/// partition of a balanced synthetic pool.
#[pyfunction]
#[pyo3(signature = (scheme, clients = 10, seed = 0, shots = 16, alpha = 1.0, per_class = 80, classes = 10))]
fn partition_stats<'py>(
    py: Python<'py>,
    scheme: &str,
    clients: usize,
    seed: u64,
    shots: usize,
    alpha: f64,
    per_class: usize,
    classes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let data_spec = SyntheticSpec {
        classes,
        image_side: 4,
        per_class,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic_task(&data_spec, seed).map_err(to_py)?;
    let spec = match scheme {
        "iid_kshot" => PartitionSpec::iid(clients, shots, seed),
        "shard_noniid" => PartitionSpec::shards(clients, 2, shots, seed),
        "dirichlet" => PartitionSpec::dirichlet(clients, alpha, per_class, seed),
        other => return Err(PyValueError::new_err(format!("unknown partition scheme '{other}'"))),
    };
    let parts = partition(&data, &spec).map_err(to_py)?;
    let histograms: Vec<Vec<usize>> = parts.iter().map(|c| c.label_histogram.clone()).collect();
    let m = heterogeneity_metrics(&histograms);
    let out = PyDict::new(py);
    out.set_item("histograms", histograms)?;
    out.set_item("mean_pairwise_tv", m.mean_pairwise_tv)?;
    out.set_item("max_pairwise_tv", m.max_pairwise_tv)?;
    out.set_item("mean_label_entropy", m.mean_label_entropy)?;
    out.set_item("empty_clients", m.empty_clients)?;
    Ok(out)
}

/// Bytes of the per-round upload for a backbone/strategy at a scale.
#[pyfunction]
#[pyo3(signature = (backbone, strategy, scale = "desk", prompt_len = 4, bottleneck_dim = 8))]
fn payload_bytes(backbone: &str, strategy: &str, scale: &str, prompt_len: usize, bottleneck_dim: usize) -> PyResult<usize> {
    let b: Backbone = parse_enum("backbone", backbone)?;
    let kind: TuningKind = parse_enum("strategy", strategy)?;
    let task = TaskConfig {
        scale: parse_enum("scale", scale)?,
        ..TaskConfig::default()
    };
    let model = harness::model_for(b, &task);
    let strategy = TuningStrategy { kind, prompt_len, bottleneck_dim };
    let att = build_tuning(strategy, &model, 0).map_err(to_py)?;
    let params = model.init_params(&mut fedpeft::rng::seeded(0, 0)).map_err(to_py)?;
    let attached = att.attach(&params).map_err(to_py)?;
    Ok(tuned_param_bytes(&attached))
}

/// Runs an experiment grid given as TOML text and returns its summary rows.
#[pyfunction]
#[pyo3(signature = (config, out = None, jobs = 1, stop_at_convergence = false, seed = None))]
fn run_grid<'py>(
    py: Python<'py>,
    config: &str,
    out: Option<PathBuf>,
    jobs: usize,
    stop_at_convergence: bool,
    seed: Option<u64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let grid = harness::parse_config(config).map_err(to_py)?;
    let opts = RunOptions {
        out,
        jobs,
        stop_at_convergence,
        backbone_cache: None,
        seed,
    };
    let report = py.detach(|| harness::run_grid(&grid, &opts)).map_err(to_py)?;
    report
        .summary
        .iter()
        .map(|row| {
            let d = PyDict::new(py);
            let value = serde_json::to_value(row).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
            if let serde_json::Value::Object(map) = value {
                for (k, v) in map {
                    match v {
                        serde_json::Value::Null => d.set_item(k, py.None())?,
                        serde_json::Value::Bool(b) => d.set_item(k, b)?,
                        serde_json::Value::Number(n) if n.is_u64() => d.set_item(k, n.as_u64())?,
                        serde_json::Value::Number(n) => d.set_item(k, n.as_f64())?,
                        other => d.set_item(k, other.as_str().map(String::from).unwrap_or_default())?,
                    }
                }
            }
            Ok(d)
        })
        .collect()
}

/// A named parameter collection read from an `FTPS` file.
#[pyclass(name = "ParamSet")]
struct PyParamSet {
    inner: ParamSet,
}

#[pymethods]
impl PyParamSet {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ParamSet::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().map(String::from).collect()
    }

    fn shape(&self, name: &str) -> PyResult<Vec<usize>> {
        Ok(self.get(name)?.tensor.shape().to_vec())
    }

    fn values(&self, name: &str) -> PyResult<Vec<f64>> {
        Ok(self.get(name)?.tensor.data().to_vec())
    }

    fn trainable(&self, name: &str) -> PyResult<bool> {
        Ok(self.get(name)?.trainable)
    }

    fn total_scalars(&self) -> usize {
        self.inner.total_scalars()
    }

    fn encoded_len(&self) -> usize {
        self.inner.encoded_len()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

impl PyParamSet {
    fn get(&self, name: &str) -> PyResult<&fedpeft::Param> {
        self.inner.get(name).map_err(|_| PyKeyError::new_err(name.to_string()))
    }
}

/// Pre-trains (or initializes) one backbone for a TOML grid and returns it.
#[pyfunction]
#[pyo3(signature = (config, backbone))]
fn pretrain(py: Python<'_>, config: &str, backbone: &str) -> PyResult<PyParamSet> {
    let grid = harness::parse_config(config).map_err(to_py)?;
    let b: Backbone = parse_enum("backbone", backbone)?;
    let inner = py.detach(|| harness::prepare_backbone(&grid, b)).map_err(to_py)?;
    Ok(PyParamSet { inner })
}

#[pymodule]
fn fedpeft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(comm_cost, m)?)?;
    m.add_function(wrap_pyfunction!(comm_cost_mb, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_round, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(partition_stats, m)?)?;
    m.add_function(wrap_pyfunction!(payload_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(run_grid, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_class::<PyParamSet>()?;
    Ok(())
}
