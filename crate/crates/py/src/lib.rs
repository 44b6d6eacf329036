//! Python bindings: configs and summaries cross the boundary as JSON-shaped
//! dicts, images as nested lists of floats.

use std::path::PathBuf;

use fedmma_core::adapter::MMAStack;
use fedmma_core::backbone::{zero_shot_probabilities, BackboneBundle, BackboneConfig, PromptTemplate};
use fedmma_core::evalrun::{self, ExperimentConfig, GradcheckConfig, Prepared};
use fedmma_core::federation::Strategy;
use fedmma_core::tensorcore::Tensor;
use fedmma_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

create_exception!(fedmma, FedmmaError, PyException);

fn err(e: Error) -> PyErr {
    if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else {
        FedmmaError::new_err(e.to_string())
    }
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| err(e.into()))
}

fn config(py: Python<'_>, value: Option<&Bound<'_, PyAny>>) -> PyResult<ExperimentConfig> {
    let cfg: ExperimentConfig = match value {
        Some(v) => from_py(py, v)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn strategy(name: &str) -> PyResult<Strategy> {
    serde_json::from_value(serde_json::Value::String(name.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown strategy `{name}` (shared_only, full_adapter_avg, local_only)")))
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Tensor::matrix(r, c, rows.concat()).map_err(err)
}

/// (split, n, correct, accuracy, loss)
type Row = (String, usize, usize, f64, f64);

fn nested(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Default experiment configuration as a dict.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, &ExperimentConfig::default())
}

/// Raises ValueError if the configuration is invalid; returns it with defaults filled in.
#[pyfunction]
fn validate_config(py: Python<'_>, cfg: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    to_py(py, &config(py, Some(cfg))?)
}

#[pyfunction]
fn harmonic_mean(values: Vec<f64>) -> PyResult<f64> {
    evalrun::harmonic_mean(&values).map_err(err)
}

/// Softmax over cosine similarities divided by `gamma`.
#[pyfunction]
#[pyo3(signature = (image_feature, text_features, gamma = 0.05))]
fn zero_shot(image_feature: Vec<f64>, text_features: Vec<Vec<f64>>, gamma: f64) -> PyResult<Vec<f64>> {
    let texts: Vec<Tensor> = text_features.into_iter().map(Tensor::row_vector).collect();
    zero_shot_probabilities(&Tensor::row_vector(image_feature), &texts, gamma).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (cfg = None, seed = 0))]
fn partition(py: Python<'_>, cfg: Option<&Bound<'_, PyAny>>, seed: u64) -> PyResult<Py<PyAny>> {
    let cfg = config(py, cfg)?;
    let plan = py.detach(|| evalrun::partition_plan(&cfg, seed)).map_err(err)?;
    to_py(py, &plan)
}

/// Runs every configured seed, writes the artifacts under `out` and returns the summary.
#[pyfunction]
fn run_experiment(py: Python<'_>, cfg: &Bound<'_, PyAny>, out: PathBuf) -> PyResult<Py<PyAny>> {
    let cfg = config(py, Some(cfg))?;
    let summary = py.detach(|| evalrun::run_experiment(&cfg, &out)).map_err(err)?;
    to_py(py, &summary)
}

#[pyfunction]
fn report(py: Python<'_>, dir: PathBuf) -> PyResult<Py<PyAny>> {
    to_py(py, &evalrun::report(&dir).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (trials = 100, seed = 0))]
fn gradcheck(py: Python<'_>, trials: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let cfg = GradcheckConfig { trials, seed, ..GradcheckConfig::default() };
    let (summary, _) = py.detach(|| evalrun::gradcheck_suite(&cfg)).map_err(err)?;
    to_py(py, &summary)
}

/// Frozen-or-trainable toy dual encoder.
#[pyclass(module = "fedmma")]
struct Backbone {
    inner: BackboneBundle,
}

#[pymethods]
impl Backbone {
    #[new]
    #[pyo3(signature = (seed = 0, config = None))]
    fn new(py: Python<'_>, seed: u64, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: BackboneConfig = match config {
            Some(c) => from_py(py, c)?,
            None => BackboneConfig::default(),
        };
        Ok(Self { inner: BackboneBundle::build(&cfg, seed).map_err(err)? })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: BackboneBundle::from_bytes(data).map_err(err)? })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn freeze(&mut self) {
        self.inner.freeze();
    }

    #[getter]
    fn frozen(&self) -> bool {
        self.inner.is_frozen()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.config())
    }

    /// Class prompt tokens for the default template.
    #[staticmethod]
    fn prompt_tokens(class_index: usize) -> Vec<usize> {
        PromptTemplate::photo_of().tokens_for(class_index)
    }

    #[pyo3(signature = (image, adapters = None))]
    fn encode_image(&self, image: Vec<Vec<f64>>, adapters: Option<PyRef<'_, AdapterStack>>) -> PyResult<Vec<f64>> {
        let t = self.inner.encode_image(&tensor(image)?, adapters.as_ref().map(|a| &a.inner)).map_err(err)?;
        Ok(t.into_values())
    }

    #[pyo3(signature = (tokens, adapters = None))]
    fn encode_text(&self, tokens: Vec<usize>, adapters: Option<PyRef<'_, AdapterStack>>) -> PyResult<Vec<f64>> {
        let t = self.inner.encode_text(&tokens, adapters.as_ref().map(|a| &a.inner)).map_err(err)?;
        Ok(t.into_values())
    }

    /// Class probabilities of one image against a list of prompts.
    #[pyo3(signature = (image, class_tokens, adapters = None))]
    fn classify(
        &self,
        image: Vec<Vec<f64>>,
        class_tokens: Vec<Vec<usize>>,
        adapters: Option<PyRef<'_, AdapterStack>>,
    ) -> PyResult<Vec<f64>> {
        self.inner.classify(&tensor(image)?, &class_tokens, adapters.as_ref().map(|a| &a.inner)).map_err(err)
    }
}

/// Multi-modal adapters on blocks `first..=last`.
#[pyclass(module = "fedmma")]
struct AdapterStack {
    inner: MMAStack,
}

#[pymethods]
impl AdapterStack {
    #[new]
    #[pyo3(signature = (d = 32, r = 8, first = 3, last = 4, alpha = 0.001, seed = 0))]
    fn new(d: usize, r: usize, first: usize, last: usize, alpha: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: MMAStack::init(d, r, first, last, alpha, seed).map_err(err)? })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let c = fedmma_core::container::Container::decode(data).map_err(err)?;
        Ok(Self { inner: MMAStack::from_container(&c).map_err(err)? })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_container().encode(true))
    }

    /// Wire payload of the shared projections alone.
    fn shared_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.shared_container().encode(false))
    }

    fn shared(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.shared().iter().map(nested).collect()
    }

    fn set_shared(&mut self, shared: Vec<Vec<Vec<f64>>>) -> PyResult<()> {
        let mats = shared.into_iter().map(tensor).collect::<PyResult<Vec<_>>>()?;
        self.inner.set_shared(&mats).map_err(err)
    }

    #[getter]
    fn first_block(&self) -> usize {
        self.inner.first_block()
    }

    #[getter]
    fn last_block(&self) -> usize {
        self.inner.last_block()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// Data, pretrained frozen backbone, partition and few-shot shards for one seed.
#[pyclass(module = "fedmma")]
struct Experiment {
    cfg: ExperimentConfig,
    prepared: Prepared,
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (cfg = None, seed = 0))]
    fn new(py: Python<'_>, cfg: Option<&Bound<'_, PyAny>>, seed: u64) -> PyResult<Self> {
        let cfg = config(py, cfg)?;
        let prepared = py.detach(|| evalrun::prepare(&cfg, seed)).map_err(err)?;
        Ok(Self { cfg, prepared })
    }

    #[getter]
    fn backbone_digest(&self) -> String {
        self.prepared.backbone.digest()
    }

    #[getter]
    fn plan(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.prepared.plan)
    }

    fn backbone(&self) -> Backbone {
        Backbone { inner: self.prepared.backbone.clone() }
    }

    /// Metrics rows of `client` as (split, n, correct, accuracy, loss) tuples.
    #[pyo3(signature = (client, adapters = None))]
    fn evaluate(&self, client: usize, adapters: Option<PyRef<'_, AdapterStack>>) -> PyResult<Vec<Row>> {
        if client >= self.prepared.shards.len() {
            return Err(PyValueError::new_err(format!("client {client} out of range")));
        }
        let batch = self.cfg.train.batch_eval;
        let rows =
            evalrun::evaluate_client(&self.prepared, adapters.as_ref().map(|a| &a.inner), client, 0, batch).map_err(err)?;
        Ok(rows.into_iter().map(|r| (r.split.name().to_string(), r.n, r.correct, r.accuracy, r.loss)).collect())
    }

    /// Runs the configured federation under `strategy` and returns the run summary.
    #[pyo3(signature = (strategy = "shared_only"))]
    fn run(&self, py: Python<'_>, strategy: &str) -> PyResult<Py<PyAny>> {
        let s = self::strategy(strategy)?;
        let run = py.detach(|| evalrun::execute(&self.cfg, &self.prepared, s)).map_err(err)?;
        to_py(py, &run.summary().map_err(err)?)
    }
}

#[pymodule]
fn fedmma(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FedmmaError", m.py().get_type::<FedmmaError>())?;
    m.add_class::<Backbone>()?;
    m.add_class::<AdapterStack>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add_function(wrap_pyfunction!(zero_shot, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
