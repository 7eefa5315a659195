//! Python bindings for riff-core.
//!
//! Token sequences cross the boundary as lists of ids without the trailing
//! EOS; it is appended on the way in and stripped on the way out. Keyword
//! overrides for configs use the same field names as the CLI's JSON config.

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use riff_core::checkpoint::{load_classifier, load_policy, save_classifier, save_policy};
use riff_core::classifier::{ClassifierConfig, ClassifierParams, TuningMode, Verbalizer};
use riff_core::decoding::{decode, DecodeConfig, DecodeScheme, Source};
use riff_core::estimators::{self, EstimatorKind, Sample, SampleBatch};
use riff_core::experiment::{build_setup, SetupConfig, SyntheticSetup};
use riff_core::metrics;
use riff_core::oracle::run_oracle_suite;
use riff_core::seqpolicy::{PolicyConfig, PolicyParams, TokenSeq};
use riff_core::trainer::{finetune_paraphraser, RunConfig};
use riff_core::RiffError;

fn err(e: RiffError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn seq(ids: &[u32]) -> PyResult<TokenSeq> {
    TokenSeq::from_content(ids).map_err(err)
}

fn parse<T: std::str::FromStr<Err = RiffError>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Applies keyword overrides to `base` through its serde form.
fn merge<T: Serialize + DeserializeOwned>(base: T, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(kwargs) = kwargs else { return Ok(base) };
    let mut value = serde_json::to_value(base).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let text: String = kwargs.py().import("json")?.call_method1("dumps", (kwargs,))?.extract()?;
    let Value::Object(overrides) = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?
    else {
        unreachable!("a dict serializes to an object")
    };
    let obj = value.as_object_mut().expect("configs serialize to objects");
    for (k, v) in overrides {
        if !obj.contains_key(&k) {
            return Err(PyKeyError::new_err(format!("unknown field `{k}`")));
        }
        obj.insert(k, v);
    }
    serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Conditional paraphrase generator.
#[pyclass(module = "riff", skip_from_py_object)]
#[derive(Clone)]
struct Policy {
    inner: PolicyParams,
}

#[pymethods]
impl Policy {
    #[new]
    #[pyo3(signature = (vocab, max_len, embed_dim=8, hidden=16, seed=0))]
    fn new(vocab: usize, max_len: usize, embed_dim: usize, hidden: usize, seed: u64) -> PyResult<Self> {
        let inner = PolicyParams::init(PolicyConfig { vocab, embed_dim, hidden, max_len }, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_policy(path.as_ref()).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_policy(path.as_ref(), &self.inner).map_err(err)
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.inner.vocab()
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.inner.max_len()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.len()
    }

    /// `log P(z | x)`.
    fn seq_logprob(&self, x: Vec<u32>, z: Vec<u32>) -> PyResult<f64> {
        Ok(self.inner.seq_logprob(&seq(&x)?, &seq(&z)?).map_err(err)?.value())
    }

    /// Flat gradient of `log P(z | x)`, in parameter order.
    fn seq_logprob_grad(&self, x: Vec<u32>, z: Vec<u32>) -> PyResult<Vec<f64>> {
        Ok(self.inner.seq_logprob_grad(&seq(&x)?, &seq(&z)?).map_err(err)?.values().to_vec())
    }

    /// Returns `(tokens, logprob, source)` triples.
    #[pyo3(signature = (x, scheme="mixed", m=8, seed=0, p=0.99, temperature=0.7, diversity_penalty=3.0, repetition_penalty=10.0))]
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        x: Vec<u32>,
        scheme: &str,
        m: usize,
        seed: u64,
        p: f64,
        temperature: f64,
        diversity_penalty: f64,
        repetition_penalty: f64,
    ) -> PyResult<Vec<(Vec<u32>, f64, &'static str)>> {
        let cfg = DecodeConfig { m, p, temperature, diversity_penalty, repetition_penalty, seed };
        let out = decode(&self.inner, &seq(&x)?, parse::<DecodeScheme>(scheme)?, &cfg).map_err(err)?;
        Ok(out
            .into_iter()
            .map(|d| {
                let source = match d.source {
                    Source::Beam => "beam",
                    Source::Nucleus => "nucleus",
                };
                (d.seq.content().to_vec(), d.logprob, source)
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config;
        format!("Policy(vocab={}, max_len={}, embed_dim={}, hidden={})", c.vocab, c.max_len, c.embed_dim, c.hidden)
    }
}

/// Mask-prediction classifier with a selectable tuning mode.
#[pyclass(module = "riff", skip_from_py_object)]
#[derive(Clone)]
struct Classifier {
    inner: ClassifierParams,
}

#[pymethods]
impl Classifier {
    #[new]
    #[pyo3(signature = (vocab, num_labels, mask_id, embed_dim=8, mode="alltune", seed=0))]
    fn new(vocab: usize, num_labels: usize, mask_id: u32, embed_dim: usize, mode: &str, seed: u64) -> PyResult<Self> {
        let cfg = ClassifierConfig::new(vocab, embed_dim, num_labels, mask_id);
        let inner = ClassifierParams::init(cfg, parse::<TuningMode>(mode)?, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_classifier(path.as_ref()).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_classifier(path.as_ref(), &self.inner).map_err(err)
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.name()
    }

    fn with_mode(&self, mode: &str) -> PyResult<Self> {
        Ok(Self { inner: self.inner.clone().with_mode(parse::<TuningMode>(mode)?) })
    }

    /// Per-label log-probabilities for a formatted input (one MASK token).
    fn label_logprobs(&self, input: Vec<u32>, verbalizer: Vec<u32>) -> PyResult<Vec<f64>> {
        let v = Verbalizer::new(verbalizer, self.inner.config.vocab).map_err(err)?;
        self.inner.label_logprobs(&seq(&input)?, &v).map_err(err)
    }

    /// Gradient of `log P(label | input)`, zero outside the mode's segments.
    fn grad(&self, input: Vec<u32>, label: usize, verbalizer: Vec<u32>) -> PyResult<Vec<f64>> {
        let v = Verbalizer::new(verbalizer, self.inner.config.vocab).map_err(err)?;
        Ok(self.inner.classifier_grad(&seq(&input)?, label, &v).map_err(err)?.values().to_vec())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config;
        format!("Classifier(vocab={}, labels={}, mode={})", c.vocab, c.num_labels, self.inner.mode)
    }
}

/// Synthetic task, few-shot split, pretrained paraphraser and reward classifier.
#[pyclass(module = "riff")]
struct Setup {
    inner: SyntheticSetup,
}

fn examples(xs: &[riff_core::data::Example]) -> Vec<(Vec<u32>, usize)> {
    xs.iter().map(|e| (e.x.content().to_vec(), e.y)).collect()
}

#[pymethods]
impl Setup {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = merge(SetupConfig::default(), kwargs)?;
        let inner = py.detach(|| build_setup(&cfg)).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn policy(&self) -> Policy {
        Policy { inner: self.inner.policy.clone() }
    }

    #[getter]
    fn classifier(&self) -> Classifier {
        Classifier { inner: self.inner.classifier.clone() }
    }

    #[getter]
    fn train(&self) -> Vec<(Vec<u32>, usize)> {
        examples(&self.inner.split.train)
    }

    #[getter]
    fn validation(&self) -> Vec<(Vec<u32>, usize)> {
        examples(&self.inner.split.validation)
    }

    #[getter]
    fn test(&self) -> Vec<(Vec<u32>, usize)> {
        examples(&self.inner.data.test)
    }

    #[getter]
    fn verbalizer(&self) -> Vec<u32> {
        self.inner.task.verbalizer.ids().to_vec()
    }

    #[getter]
    fn mle_curve(&self) -> Vec<f64> {
        self.inner.mle_curve.clone()
    }

    /// Task template applied to `x`.
    fn format(&self, x: Vec<u32>) -> PyResult<Vec<u32>> {
        Ok(self.inner.task.format(&seq(&x)?).map_err(err)?.content().to_vec())
    }

    /// `log P(y | template(z))` under the reward classifier.
    fn reward(&self, z: Vec<u32>, y: usize) -> PyResult<f64> {
        self.inner.task.reward(&self.inner.classifier, &seq(&z)?, y).map_err(err)
    }

    /// Fine-tunes a copy of the pretrained paraphraser. Keywords override the
    /// default recipe (`estimator`, `regime`, `decoder`, `steps`, ...).
    #[pyo3(signature = (seed=0, **kwargs))]
    fn finetune<'py>(&self, py: Python<'py>, seed: u64, kwargs: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
        let cfg = merge(RunConfig::riff(seed), kwargs)?;
        let s = &self.inner;
        let out = py
            .detach(|| finetune_paraphraser(s.policy.clone(), &s.classifier, &s.task, &s.split, &cfg))
            .map_err(err)?;
        let best = out.best();
        let d = PyDict::new(py);
        d.set_item("baseline_accuracy", out.baseline.val_accuracy)?;
        d.set_item("best_accuracy", best.val_accuracy)?;
        d.set_item("best_step", best.step)?;
        d.set_item("mean_checkpoint_accuracy", out.mean_checkpoint_accuracy())?;
        d.set_item("checkpoint_steps", out.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>())?;
        d.set_item("epochs", out.epochs)?;
        d.set_item("clamp_events", out.clamp_events)?;
        d.set_item("best_policy", Policy { inner: best.params.clone() })?;
        Ok(d)
    }
}

fn batch(cur: &[f64], fixed: &[f64], rewards: &[f64]) -> PyResult<SampleBatch> {
    if cur.len() != rewards.len() || fixed.len() != rewards.len() {
        return Err(PyValueError::new_err("logprob and reward lists must have equal length"));
    }
    let samples = (0..cur.len())
        .map(|j| {
            Ok(Sample {
                seq: seq(&[j as u32 + 1])?,
                cur_logprob: cur[j],
                fixed_logprob: fixed[j],
                reward: rewards[j],
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    SampleBatch::new(samples).map_err(err)
}

/// `softmax(logP + R)`.
#[pyfunction]
fn mml_coefficients(logprobs: Vec<f64>, rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(estimators::mml_coefficients(&batch(&logprobs, &logprobs, &rewards)?).map_err(err)?.phi)
}

/// `P · R`.
#[pyfunction]
fn pg_coefficients(logprobs: Vec<f64>, rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(estimators::pg_coefficients(&batch(&logprobs, &logprobs, &rewards)?).map_err(err)?.phi)
}

/// Importance-weighted coefficients; returns `(phi, clamped_count)`.
#[pyfunction]
#[pyo3(signature = (cur_logprobs, fixed_logprobs, rewards, estimator="mml"))]
fn offpolicy_coefficients(
    cur_logprobs: Vec<f64>,
    fixed_logprobs: Vec<f64>,
    rewards: Vec<f64>,
    estimator: &str,
) -> PyResult<(Vec<f64>, usize)> {
    let b = batch(&cur_logprobs, &fixed_logprobs, &rewards)?;
    let c = estimators::offpolicy_coefficients(&b, parse::<EstimatorKind>(estimator)?).map_err(err)?;
    Ok((c.phi, c.clamped))
}

#[pyfunction]
fn normalize_rewards(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    estimators::normalize_rewards(&rewards).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, n=1))]
fn rouge_n(a: Vec<u32>, b: Vec<u32>, n: usize) -> PyResult<f64> {
    metrics::rouge_n(&a, &b, n).map_err(err)
}

#[pyfunction]
fn lexical_diversity(original: Vec<u32>, paraphrase: Vec<u32>) -> PyResult<f64> {
    metrics::lexical_diversity(&original, &paraphrase).map_err(err)
}

#[pyfunction]
fn pairwise_ld(paraphrases: Vec<Vec<u32>>) -> PyResult<f64> {
    metrics::pairwise_ld(&paraphrases).map_err(err)
}

/// Exact-versus-finite-difference gradient check on tiny instances.
#[pyfunction]
#[pyo3(signature = (seed=0, instances=20))]
fn oracle_check(py: Python<'_>, seed: u64, instances: usize) -> PyResult<Bound<'_, PyDict>> {
    let r = py.detach(|| run_oracle_suite(seed, instances)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("instances", r.instances)?;
    d.set_item("mml_max_rel_err", r.mml_max_rel_err)?;
    d.set_item("klon_max_rel_err", r.klon_max_rel_err)?;
    d.set_item("klon_zero_beta_bitwise", r.klon_zero_beta_bitwise)?;
    d.set_item("max_rel_err", r.max_rel_err())?;
    Ok(d)
}

#[pymodule]
fn riff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Policy>()?;
    m.add_class::<Classifier>()?;
    m.add_class::<Setup>()?;
    m.add_function(wrap_pyfunction!(mml_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(pg_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(offpolicy_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_rewards, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_n, m)?)?;
    m.add_function(wrap_pyfunction!(lexical_diversity, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_ld, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    Ok(())
}
