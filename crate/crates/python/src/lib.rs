//! Python bindings for the copy-aware CTC editor.
//!
//! Lattice functions take a `positions x columns` list of log-probabilities
//! and integer token ids. Alignment labels cross the boundary as ints for
//! tokens and the strings `"keep"` / `"blank"`.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use copyctc::harness::decode_sentence;
use copyctc::lattice;
use copyctc::loss;
use copyctc::metrics;
use copyctc::model::{load_checkpoint, save_checkpoint};
use copyctc::synth::{self, CorruptionConfig};
use copyctc::{AlignmentLabel, AlignmentPath, EditSample, EmissionLattice, Error, TokenId, Variant};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Path { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn ids(xs: &[u32]) -> Vec<TokenId> {
    xs.iter().map(|&x| TokenId(x)).collect()
}

fn raw(xs: &[TokenId]) -> Vec<u32> {
    xs.iter().map(|t| t.0).collect()
}

fn parse_variant(s: &str) -> PyResult<Variant> {
    s.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))
}

fn build_lattice(log_probs: Vec<Vec<f64>>, source_len: usize, vocab_size: usize, variant: &str) -> PyResult<EmissionLattice> {
    let variant = parse_variant(variant)?;
    if source_len == 0 || log_probs.len() % source_len != 0 {
        return Err(PyValueError::new_err(format!(
            "{} rows do not split evenly over {source_len} source tokens",
            log_probs.len()
        )));
    }
    let upsample = log_probs.len() / source_len;
    let flat: Vec<f64> = log_probs.into_iter().flatten().collect();
    EmissionLattice::from_raw(flat, source_len, upsample, vocab_size, variant).map_err(err)
}

#[derive(FromPyObject)]
enum LabelArg {
    Token(u32),
    Name(String),
}

fn to_label(l: LabelArg) -> PyResult<AlignmentLabel> {
    match l {
        LabelArg::Token(t) => Ok(AlignmentLabel::Token(TokenId(t))),
        LabelArg::Name(s) => match s.as_str() {
            "keep" => Ok(AlignmentLabel::Keep),
            "blank" => Ok(AlignmentLabel::Blank),
            _ => Err(PyValueError::new_err(format!("unknown label {s:?}"))),
        },
    }
}

fn from_label(py: Python<'_>, l: &AlignmentLabel) -> PyResult<Py<PyAny>> {
    Ok(match l {
        AlignmentLabel::Token(t) => t.0.into_pyobject(py)?.into_any().unbind(),
        AlignmentLabel::Keep => "keep".into_pyobject(py)?.into_any().unbind(),
        AlignmentLabel::Blank => "blank".into_pyobject(py)?.into_any().unbind(),
    })
}

fn labels_out(py: Python<'_>, path: &AlignmentPath) -> PyResult<Vec<Py<PyAny>>> {
    path.labels().iter().map(|l| from_label(py, l)).collect()
}

#[pyclass(name = "Vocab", frozen)]
struct PyVocab {
    inner: copyctc::Vocab,
}

#[pymethods]
impl PyVocab {
    #[new]
    fn new(tokens: Vec<String>) -> PyResult<Self> {
        Ok(PyVocab {
            inner: copyctc::Vocab::new(tokens).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyVocab {
            inner: copyctc::Vocab::load(path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn synthetic(size: usize) -> PyResult<Self> {
        Ok(PyVocab {
            inner: synth::synth_vocab(size).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn encode(&self, tokens: Vec<String>) -> PyResult<Vec<u32>> {
        Ok(raw(&self.inner.encode(&tokens).map_err(err)?))
    }

    fn decode(&self, ids_: Vec<u32>) -> PyResult<Vec<String>> {
        self.inner.decode(&ids(&ids_)).map_err(err)
    }
}

/// Translate KEEP labels to source tokens, then collapse.
#[pyfunction]
fn recover(labels: Vec<LabelArg>, source: Vec<u32>) -> PyResult<Vec<u32>> {
    if source.is_empty() || labels.len() % source.len() != 0 {
        return Err(PyValueError::new_err("path length must be a multiple of the source length"));
    }
    let upsample = labels.len() / source.len();
    let labels = labels.into_iter().map(to_label).collect::<PyResult<Vec<_>>>()?;
    let path = AlignmentPath::new(labels, source.len(), upsample).map_err(err)?;
    Ok(raw(&lattice::recover(&path, &ids(&source)).map_err(err)?))
}

/// Merge runs of equal tokens and drop blanks (`None`).
#[pyfunction]
fn collapse(slots: Vec<Option<u32>>) -> Vec<u32> {
    let slots: Vec<Option<TokenId>> = slots.into_iter().map(|s| s.map(TokenId)).collect();
    raw(&lattice::collapse(&slots))
}

#[pyfunction]
fn feasible(source: Vec<u32>, target: Vec<u32>, upsample: usize) -> bool {
    loss::feasible(&EditSample::new(ids(&source), ids(&target)), upsample)
}

#[pyfunction]
#[pyo3(signature = (source, target, log_probs, vocab_size, variant = "copy-aware"))]
fn forward_nll(source: Vec<u32>, target: Vec<u32>, log_probs: Vec<Vec<f64>>, vocab_size: usize, variant: &str) -> PyResult<f64> {
    let l = build_lattice(log_probs, source.len(), vocab_size, variant)?;
    let sample = EditSample::new(ids(&source), ids(&target));
    Ok(loss::forward_nll(&sample, &l).map_err(err)?.neg_log_likelihood)
}

/// `(nll, gradient)` with the gradient shaped like `log_probs`.
#[pyfunction]
#[pyo3(signature = (source, target, log_probs, vocab_size, variant = "copy-aware"))]
fn forward_backward_grad(
    source: Vec<u32>,
    target: Vec<u32>,
    log_probs: Vec<Vec<f64>>,
    vocab_size: usize,
    variant: &str,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let l = build_lattice(log_probs, source.len(), vocab_size, variant)?;
    let sample = EditSample::new(ids(&source), ids(&target));
    let res = loss::forward_backward_grad(&sample, &l).map_err(err)?;
    let grad = if res.grad.is_empty() {
        vec![vec![0.0; l.columns()]; l.positions()]
    } else {
        res.grad.chunks(l.columns()).map(<[f64]>::to_vec).collect()
    };
    Ok((res.neg_log_likelihood, grad))
}

/// Most probable path that recovers `target`: `(log_prob, labels)`.
#[pyfunction]
#[pyo3(signature = (source, target, log_probs, vocab_size, variant = "copy-aware"))]
fn viterbi(
    py: Python<'_>,
    source: Vec<u32>,
    target: Vec<u32>,
    log_probs: Vec<Vec<f64>>,
    vocab_size: usize,
    variant: &str,
) -> PyResult<(f64, Vec<Py<PyAny>>)> {
    let l = build_lattice(log_probs, source.len(), vocab_size, variant)?;
    let sample = EditSample::new(ids(&source), ids(&target));
    let best = loss::viterbi_align(&sample, &l).map_err(err)?;
    Ok((best.log_prob, labels_out(py, &best.path)?))
}

/// Row-wise argmax labels.
#[pyfunction]
#[pyo3(signature = (source_len, log_probs, vocab_size, variant = "copy-aware"))]
fn greedy(py: Python<'_>, source_len: usize, log_probs: Vec<Vec<f64>>, vocab_size: usize, variant: &str) -> PyResult<Vec<Py<PyAny>>> {
    let l = build_lattice(log_probs, source_len, vocab_size, variant)?;
    labels_out(py, &copyctc::glancing::greedy_alignment(&l))
}

#[pyfunction]
fn levenshtein(a: Vec<u32>, b: Vec<u32>) -> usize {
    metrics::levenshtein(&ids(&a), &ids(&b))
}

#[pyfunction]
fn wer(source: Vec<u32>, target: Vec<u32>) -> PyResult<f64> {
    metrics::wer(&ids(&source), &ids(&target)).map_err(err)
}

/// Corpus precision, recall and F0.5 over `(source, hypothesis, reference)` triples.
#[pyfunction]
fn score(py: Python<'_>, triples: Vec<(Vec<u32>, Vec<u32>, Vec<u32>)>) -> PyResult<Py<PyAny>> {
    let mut counts = metrics::EditCounts::default();
    for (s, h, r) in &triples {
        counts.add(metrics::edit_counts(&ids(s), &ids(h), &ids(r)));
    }
    let p = metrics::prf(counts);
    let d = pyo3::types::PyDict::new(py);
    d.set_item("precision", p.precision)?;
    d.set_item("recall", p.recall)?;
    d.set_item("f05", p.f05)?;
    d.set_item("tp", counts.tp)?;
    d.set_item("fp", counts.fp)?;
    d.set_item("fn", counts.fn_)?;
    Ok(d.into_any().unbind())
}

/// `(source, target)` token-string pairs from a corruption config given as
/// JSON (defaults fill missing fields).
#[pyfunction]
#[pyo3(signature = (n, split = "train", config_json = None))]
fn generate(n: usize, split: &str, config_json: Option<&str>) -> PyResult<Vec<(Vec<String>, Vec<String>)>> {
    let config: CorruptionConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => CorruptionConfig::default(),
    };
    let vocab = synth::synth_vocab(config.vocab_size).map_err(err)?;
    let data = synth::generate(&config, n, split).map_err(err)?;
    data.samples
        .iter()
        .map(|s| Ok((vocab.decode(&s.source).map_err(err)?, vocab.decode(&s.target).map_err(err)?)))
        .collect()
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    model: copyctc::model::Model,
    vocab: copyctc::Vocab,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (model, vocab) = load_checkpoint(path).map_err(err)?;
        Ok(PyModel { model, vocab })
    }

    /// A freshly initialized model from a model config given as JSON.
    #[staticmethod]
    fn init(config_json: &str, vocab: &PyVocab) -> PyResult<Self> {
        let config = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyModel {
            model: copyctc::model::Model::new(config).map_err(err)?,
            vocab: vocab.inner.clone(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.model, &self.vocab, path).map_err(err)
    }

    fn vocab(&self) -> PyVocab {
        PyVocab {
            inner: self.vocab.clone(),
        }
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.model.config()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn parameter_count(&self) -> usize {
        self.model.parameter_count()
    }

    /// Emission log-probabilities for a source given as token strings.
    fn emissions(&self, source: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let ids_ = self.vocab.encode(&source).map_err(err)?;
        let l = self.model.emissions(&ids_).map_err(err)?;
        Ok(l.log_probs().chunks(l.columns()).map(<[f64]>::to_vec).collect())
    }

    #[pyo3(signature = (source, iterations = 2))]
    fn decode(&self, py: Python<'_>, source: Vec<String>, iterations: usize) -> PyResult<Vec<String>> {
        let ids_ = self.vocab.encode(&source).map_err(err)?;
        let out = py
            .detach(|| decode_sentence(&self.model, &ids_, iterations))
            .map_err(err)?;
        self.vocab.decode(&out.hypothesis).map_err(err)
    }
}

#[pymodule]
fn pycopyctc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocab>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(recover, m)?)?;
    m.add_function(wrap_pyfunction!(collapse, m)?)?;
    m.add_function(wrap_pyfunction!(feasible, m)?)?;
    m.add_function(wrap_pyfunction!(forward_nll, m)?)?;
    m.add_function(wrap_pyfunction!(forward_backward_grad, m)?)?;
    m.add_function(wrap_pyfunction!(viterbi, m)?)?;
    m.add_function(wrap_pyfunction!(greedy, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
