use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use bmgf::checkpoint::Checkpoint;
use bmgf::config::ModelConfig;
use bmgf::data::{Dataset, Split};
use bmgf::model::{argmax, Model};
use bmgf::{gradcheck as gc, synthetic, train, BmgfError};

fn to_py(e: BmgfError) -> PyErr {
    match e {
        BmgfError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A trained relation classifier.
#[pyclass(module = "bmgf")]
struct Classifier {
    model: Model,
    best_epoch: usize,
}

#[pymethods]
impl Classifier {
    /// Loads a checkpoint written by `bmgf train` or `Classifier.save`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        Ok(Classifier { model: ck.to_model().map_err(to_py)?, best_epoch: ck.epoch })
    }

    /// Trains on the train split of `data` (file or directory), selecting on
    /// its validation split. `config` is TOML text; missing keys take defaults.
    #[staticmethod]
    #[pyo3(signature = (data, config=None, seed=None))]
    fn train(py: Python<'_>, data: PathBuf, config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => ModelConfig::from_toml_str(text).map_err(to_py)?,
            None => ModelConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        py.detach(|| {
            let schema = cfg.label_schema()?;
            let ds = Dataset::load_path(&data, &schema)?;
            let part = |s| ds.split(s).into_iter().cloned().collect::<Vec<_>>();
            let (tr, va) = (part(Split::Train), part(Split::Validation));
            let model = Model::from_instances(cfg, schema, &tr)?;
            let out = train::train(model, &tr, &va)?;
            Ok(Classifier { model: out.model, best_epoch: out.best.epoch })
        })
        .map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.model, None, self.best_epoch, None).save(&path).map_err(to_py)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.model.schema.labels.clone()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.num_parameters()
    }

    /// Returns `(label, probabilities)` for one argument pair.
    fn predict(&self, py: Python<'_>, arg1: &str, arg2: &str) -> PyResult<(String, Vec<f64>)> {
        let probs = py.detach(|| self.model.predict_pair(arg1, arg2)).map_err(to_py)?;
        Ok((self.model.schema.labels[argmax(&probs)].clone(), probs))
    }

    /// Scores labelled data; returns the evaluation report as a dict.
    #[pyo3(signature = (data, split=None))]
    fn evaluate<'py>(&self, py: Python<'py>, data: PathBuf, split: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let wanted = match split {
            Some(name) => Some(Split::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown split {name:?}")))?),
            None => None,
        };
        let report = py
            .detach(|| {
                let ds = Dataset::load_path(&data, &self.model.schema)?;
                let instances: Vec<_> = ds.instances.into_iter().filter(|i| wanted.map_or(true, |s| i.split == s)).collect();
                train::evaluate(&self.model, &instances)
            })
            .map_err(to_py)?;
        json_to_py(py, &report.to_json())
    }
}

/// Finite-difference gradient check at small sizes; returns
/// `{module: max relative error}` and whether all are below tolerance.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<(Bound<'_, PyDict>, bool)> {
    let report = py.detach(|| gc::run(&gc::small_config(), seed, None)).map_err(to_py)?;
    let errors = PyDict::new(py);
    for m in &report.modules {
        errors.set_item(&m.module, m.max_relative_error)?;
    }
    Ok((errors, report.passed()))
}

/// The synthetic cue-word corpus as dataset TSV text.
#[pyfunction]
#[pyo3(signature = (seed, train=200, validation=100, test=100))]
fn synthetic_tsv(seed: u64, train: usize, validation: usize, test: usize) -> String {
    synthetic::generate(seed, train, validation, test).to_tsv()
}

#[pymodule]
#[pyo3(name = "bmgf")]
fn bmgf_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Classifier>()?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_tsv, m)?)?;
    Ok(())
}
