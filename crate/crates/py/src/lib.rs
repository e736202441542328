//! Python bindings for the `advcaps` core crate.
//!
//! Documents cross the boundary as `(text, label)` tuples and configs as
//! JSON strings in the same format the command line tool reads.

use advcaps::augment::{augment_dataset, perturb_word, PerturbationPolicy};
use advcaps::model::{Model, Stage};
use advcaps::synth::{generate, SynthConfig};
use advcaps::text::{self, Document, EmbeddingTable};
use advcaps::train::{self, Metrics, TrainConfig, TrainOptions, TrainOutcome};
use advcaps::{report, SeededRng};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn documents(docs: Vec<(String, u8)>) -> Vec<Document> {
    docs.into_iter().map(|(t, l)| Document::new(t, l)).collect()
}

fn pairs(docs: &[Document]) -> Vec<(String, u8)> {
    docs.iter().map(|d| (d.raw_text.clone(), d.label)).collect()
}

fn options(threads: usize) -> TrainOptions {
    TrainOptions {
        threads,
        progress: false,
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", m.epoch)?;
    d.set_item("split", m.split.to_string())?;
    d.set_item("loss", m.loss)?;
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    Ok(d)
}

/// Splits text into sentences of word tokens.
#[pyfunction]
fn tokenize(text: &str) -> Vec<Vec<String>> {
    text::tokenize(text)
}

#[pyfunction]
fn squash(x: Vec<f64>) -> Vec<f64> {
    advcaps::capsule::squash(&x)
}

#[pyfunction]
#[pyo3(signature = (word, seed, alphabet=None))]
fn perturb(word: &str, seed: u64, alphabet: Option<&str>) -> PyResult<String> {
    let policy = match alphabet {
        Some(a) => PerturbationPolicy::with_alphabet(a).map_err(err)?,
        None => PerturbationPolicy::default(),
    };
    perturb_word(word, &policy, &mut SeededRng::new(seed)).map_err(err)
}

/// One adversarial copy per document, labels unchanged.
#[pyfunction]
#[pyo3(signature = (docs, seed, epoch=0))]
fn augment(docs: Vec<(String, u8)>, seed: u64, epoch: u64) -> PyResult<Vec<(String, u8)>> {
    let out = augment_dataset(&documents(docs), &PerturbationPolicy::default(), seed, epoch).map_err(err)?;
    Ok(pairs(&out))
}

/// Returns `(documents, embeddings_text)` of a synthetic corpus.
#[pyfunction]
#[pyo3(signature = (docs, vocab, seed, dim=16))]
fn gen_synth(docs: usize, vocab: usize, seed: u64, dim: usize) -> PyResult<(Vec<(String, u8)>, String)> {
    let mut config = SynthConfig::new(docs, vocab, seed);
    config.embedding_dim = dim;
    let corpus = generate(&config).map_err(err)?;
    Ok((pairs(&corpus.documents), corpus.embeddings_text))
}

#[pyclass(name = "Embeddings", module = "advcaps")]
struct PyEmbeddings {
    table: EmbeddingTable,
}

#[pymethods]
impl PyEmbeddings {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            table: EmbeddingTable::load(path).map_err(err)?,
        })
    }

    /// Parses word2vec text format.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            table: EmbeddingTable::parse(text).map_err(err)?,
        })
    }

    #[getter]
    fn dimension(&self) -> usize {
        self.table.dimension()
    }

    fn __len__(&self) -> usize {
        self.table.len()
    }

    fn __contains__(&self, token: &str) -> bool {
        self.table.contains(token)
    }

    fn lookup(&self, token: &str) -> Vec<f64> {
        self.table.lookup(token).to_vec()
    }
}

#[pyclass(name = "Model", module = "advcaps")]
struct PyModel {
    model: Model,
}

impl PyModel {
    fn encode(&self, text: &str, embeddings: &PyEmbeddings) -> text::EncodedDoc {
        let c = self.model.config();
        text::encode_document(&Document::new(text, 0), &embeddings.table, c.n_s, c.n_w)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            model: Model::load(path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            model: Model::from_bytes(data).map_err(err)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.model.to_bytes())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.model.save(path).map_err(err)
    }

    #[getter]
    fn capsule(&self) -> bool {
        self.model.config().head.is_capsule()
    }

    fn probabilities(&self, text: &str, embeddings: &PyEmbeddings) -> PyResult<Vec<f64>> {
        self.model.probabilities(&self.encode(text, embeddings)).map_err(err)
    }

    fn predict(&self, text: &str, embeddings: &PyEmbeddings) -> PyResult<usize> {
        Ok(advcaps::capsule::predict(&self.probabilities(text, embeddings)?))
    }

    /// `stage` is one of `encoder-pooled`, `condensed` or `class`.
    fn representation(&self, text: &str, embeddings: &PyEmbeddings, stage: &str) -> PyResult<Vec<f64>> {
        let stage: Stage = stage.parse().map_err(err)?;
        self.model.representation(&self.encode(text, embeddings), stage).map_err(err)
    }

    #[pyo3(signature = (docs, embeddings, threads=1))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        docs: Vec<(String, u8)>,
        embeddings: &PyEmbeddings,
        threads: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let docs = documents(docs);
        let m = py
            .allow_threads(|| train::evaluate_with(&self.model, &docs, &embeddings.table, options(threads)))
            .map_err(err)?;
        metrics_dict(py, &m)
    }
}

#[pyclass(name = "TrainResult", module = "advcaps")]
struct PyTrainResult {
    outcome: TrainOutcome,
}

#[pymethods]
impl PyTrainResult {
    #[getter]
    fn model(&self) -> PyModel {
        PyModel {
            model: self.outcome.model.clone(),
        }
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.outcome.best_epoch
    }

    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.outcome.history.iter().map(|m| metrics_dict(py, m)).collect()
    }

    #[getter]
    fn test<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        metrics_dict(py, &self.outcome.test)
    }

    #[getter]
    fn test_indices(&self) -> Vec<usize> {
        self.outcome.split.test.clone()
    }

    fn metrics_csv(&self) -> String {
        report::metrics_csv(&self.outcome)
    }
}

/// Trains a model. `config` is a JSON training config.
#[pyfunction]
#[pyo3(name = "train", signature = (config, docs, embeddings, threads=1))]
fn train_model(
    py: Python<'_>,
    config: &str,
    docs: Vec<(String, u8)>,
    embeddings: &PyEmbeddings,
    threads: usize,
) -> PyResult<PyTrainResult> {
    let config: TrainConfig = serde_json::from_str(config).map_err(err)?;
    let docs = documents(docs);
    let outcome = py
        .allow_threads(|| train::train_with(&config, &docs, &embeddings.table, options(threads)))
        .map_err(err)?;
    Ok(PyTrainResult { outcome })
}

#[pymodule]
#[pyo3(name = "advcaps")]
fn advcaps_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(squash, m)?)?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synth, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_class::<PyEmbeddings>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainResult>()?;
    Ok(())
}
