//! Training loops: reward-guided paraphraser fine-tuning and paraphrase-
//! augmented classifier training, plus ensemble inference, checkpoint
//! selection and the per-run metrics/manifest files.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{file_hash, policy_hash, save_classifier, save_policy};
use crate::classifier::{argmax, ClassifierParams, TuningMode};
use crate::data::{Example, Instruction, Task};
use crate::decoding::{decode, diverse_beam, DecodeConfig, DecodeScheme};
use crate::diffmath::GradientAccumulator;
use crate::error::{invalid, Result, RiffError};
use crate::estimators::{
    assemble_gradient, klon_gradient, mml_coefficients, normalize_rewards, offpolicy_coefficients, pg_coefficients,
    EstimatorKind, KlonConfig, Sample, SampleBatch,
};
use crate::optim::AdamW;
use crate::promptsearch::{gs_step, GS_BATCH, GS_TOP_K};
use crate::seqpolicy::{PolicyParams, TokenSeq};

// ---------------------------------------------------------------- splits

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub n_per_label: usize,
    pub seed: u64,
}

/// `n` training and `n` validation examples per label, disjoint, drawn
/// without replacement.
pub fn fewshot_split(dataset: &[Example], n: usize, seed: u64) -> Result<FewShotSplit> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in dataset.iter().enumerate() {
        by_label.entry(ex.y).or_default().push(i);
    }
    if by_label.is_empty() {
        return Err(RiffError::Empty("dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (&label, idx) in by_label.iter_mut() {
        if idx.len() < 2 * n {
            return Err(RiffError::InsufficientExamples { label, available: idx.len(), required: 2 * n });
        }
        idx.shuffle(&mut rng);
        train.extend(idx[..n].iter().map(|&i| dataset[i].clone()));
        validation.extend(idx[n..2 * n].iter().map(|&i| dataset[i].clone()));
    }
    train.shuffle(&mut rng);
    validation.shuffle(&mut rng);
    Ok(FewShotSplit { train, validation, n_per_label: n, seed })
}

// ---------------------------------------------------------------- ensemble

/// `[log P(y|x) if included] + (1/M) Σ_j log P(y|z_j)` from precomputed
/// per-label log-probabilities.
pub fn ensemble_scores_from(original: Option<&[f64]>, paraphrases: &[Vec<f64>]) -> Result<Vec<f64>> {
    let width = original.map(|o| o.len()).or_else(|| paraphrases.first().map(|p| p.len()));
    let Some(c) = width else {
        return Err(invalid("paraphrases", "exclusion mode needs at least one paraphrase"));
    };
    let mut scores = original.map(|o| o.to_vec()).unwrap_or_else(|| vec![0.0; c]);
    if !paraphrases.is_empty() {
        let m = paraphrases.len() as f64;
        for lp in paraphrases {
            if lp.len() != c {
                return Err(RiffError::Shape(format!("{} label scores, expected {c}", lp.len())));
            }
        }
        for (y, s) in scores.iter_mut().enumerate() {
            *s += paraphrases.iter().map(|lp| lp[y]).sum::<f64>() / m;
        }
    }
    Ok(scores)
}

pub fn ensemble_scores(
    classifier: &ClassifierParams,
    task: &Task,
    x: &TokenSeq,
    paraphrases: &[TokenSeq],
    include_original: bool,
) -> Result<Vec<f64>> {
    if paraphrases.is_empty() && !include_original {
        return Err(invalid("paraphrases", "exclusion mode needs at least one paraphrase"));
    }
    let original = if include_original { Some(task.label_logprobs(classifier, x)?) } else { None };
    let para: Vec<Vec<f64>> = paraphrases.iter().map(|z| task.label_logprobs(classifier, z)).collect::<Result<_>>()?;
    ensemble_scores_from(original.as_deref(), &para)
}

/// Ensemble label, lowest index on ties.
pub fn ensemble_predict(
    classifier: &ClassifierParams,
    task: &Task,
    x: &TokenSeq,
    paraphrases: &[TokenSeq],
    include_original: bool,
) -> Result<usize> {
    Ok(argmax(&ensemble_scores(classifier, task, x, paraphrases, include_original)?))
}

/// Test-style paraphrases: the top `m` diverse-beam outputs.
pub fn test_paraphrases(policy: &PolicyParams, x: &TokenSeq, decode_cfg: &DecodeConfig, m: usize) -> Result<Vec<TokenSeq>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    let cfg = DecodeConfig { m, ..*decode_cfg };
    Ok(diverse_beam(policy, x, &cfg)?.into_iter().map(|d| d.seq).collect())
}

/// Ensemble accuracy over `examples` with freshly decoded paraphrases.
pub fn ensemble_accuracy(
    classifier: &ClassifierParams,
    task: &Task,
    policy: &PolicyParams,
    examples: &[Example],
    decode_cfg: &DecodeConfig,
    m: usize,
    include_original: bool,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(RiffError::Empty("evaluation examples"));
    }
    let hits: Vec<bool> = examples
        .par_iter()
        .map(|ex| {
            let zs = test_paraphrases(policy, &ex.x, decode_cfg, m)?;
            Ok(ensemble_predict(classifier, task, &ex.x, &zs, include_original)? == ex.y)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

// ---------------------------------------------------------------- checkpoints

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<P> {
    pub step: usize,
    pub params: P,
    /// Ensemble validation accuracy (exclusion mode for paraphrasers,
    /// inclusion mode for classifiers).
    pub val_accuracy: f64,
}

/// Highest validation accuracy, earliest step on ties.
pub fn select_best_checkpoint<P>(checkpoints: &[Checkpoint<P>]) -> Result<&Checkpoint<P>> {
    let mut best = checkpoints.first().ok_or(RiffError::Empty("checkpoints"))?;
    for c in &checkpoints[1..] {
        if c.val_accuracy > best.val_accuracy {
            best = c;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    fn new(step: usize, split: &str, metric: &str, value: f64) -> Self {
        Self { step, split: split.into(), metric: metric.into(), value }
    }
}

pub const METRICS_HEADER: &str = "step,split,metric,value";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.split, r.metric, r.value));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(RiffError::Format(format!("metrics file must start with `{METRICS_HEADER}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || RiffError::Format(format!("metrics line {}: `{line}`", i + 2));
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        rows.push(MetricRow {
            step: parts[0].parse().map_err(|_| bad())?,
            split: parts[1].into(),
            metric: parts[2].into(),
            value: parts[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- paraphraser loop

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Samples from the current policy.
    On,
    /// Samples from the frozen pretrained snapshot, importance-weighted.
    Off,
    /// On-policy with a KL anchor to the pretrained snapshot.
    Klon,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::On, Regime::Off, Regime::Klon];

    pub fn name(self) -> &'static str {
        match self {
            Regime::On => "on",
            Regime::Off => "off",
            Regime::Klon => "klon",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = RiffError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "on" => Ok(Self::On),
            "off" => Ok(Self::Off),
            "klon" => Ok(Self::Klon),
            other => Err(invalid("regime", format!("unknown regime `{other}`"))),
        }
    }
}

/// KL weight defaults per estimator.
pub fn default_beta(kind: EstimatorKind) -> f64 {
    match kind {
        EstimatorKind::Mml => 0.1,
        EstimatorKind::Pg => 0.6,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub estimator: EstimatorKind,
    pub regime: Regime,
    pub decoder: DecodeScheme,
    pub normalize: bool,
    /// Samples per training example.
    pub m: usize,
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_interval: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub top_p: f64,
    pub temperature: f64,
    pub diversity_penalty: f64,
    pub repetition_penalty: f64,
    /// Paraphrases per validation example.
    pub eval_m: usize,
}

impl RunConfig {
    /// MML + KL-anchored on-policy + mixed decoding + reward normalization.
    pub fn riff(seed: u64) -> Self {
        Self {
            estimator: EstimatorKind::Mml,
            regime: Regime::Klon,
            decoder: DecodeScheme::Mixed,
            normalize: true,
            m: 8,
            beta: default_beta(EstimatorKind::Mml),
            lr: 1e-3,
            steps: 1120,
            batch_size: 8,
            checkpoint_interval: 8,
            weight_decay: 1e-4,
            seed,
            top_p: 0.99,
            temperature: 0.7,
            diversity_penalty: 3.0,
            repetition_penalty: 10.0,
            eval_m: 8,
        }
    }

    pub fn decode_config(&self, m: usize, seed: u64) -> DecodeConfig {
        DecodeConfig {
            m,
            p: self.top_p,
            temperature: self.temperature,
            diversity_penalty: self.diversity_penalty,
            repetition_penalty: self.repetition_penalty,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(invalid("m", "must be at least 1"));
        }
        if self.decoder == DecodeScheme::Mixed && self.m % 2 != 0 {
            return Err(invalid("m", format!("mixed decoding needs an even sample count, got {}", self.m)));
        }
        if self.eval_m == 0 {
            return Err(invalid("eval_m", "validation runs in exclusion mode and needs paraphrases"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid("beta", "must be finite and non-negative"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", "must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.checkpoint_interval == 0 {
            return Err(invalid("checkpoint_interval", "must be at least 1"));
        }
        self.decode_config(self.m, 0).validate()
    }

    pub fn label(&self) -> String {
        format!(
            "{}-{}-{}{}",
            self.estimator,
            self.regime,
            self.decoder,
            if self.normalize { "-z" } else { "" }
        )
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// The untrained policy evaluated before any update.
    pub baseline: Checkpoint<PolicyParams>,
    /// One per `checkpoint_interval` steps.
    pub checkpoints: Vec<Checkpoint<PolicyParams>>,
    pub metrics: Vec<MetricRow>,
    pub epochs: f64,
    /// Importance ratios that hit the clamp, summed over the run.
    pub clamp_events: usize,
}

impl FinetuneOutcome {
    pub fn best(&self) -> &Checkpoint<PolicyParams> {
        select_best_checkpoint(&self.checkpoints).unwrap_or(&self.baseline)
    }

    pub fn mean_checkpoint_accuracy(&self) -> f64 {
        if self.checkpoints.is_empty() {
            return self.baseline.val_accuracy;
        }
        self.checkpoints.iter().map(|c| c.val_accuracy).sum::<f64>() / self.checkpoints.len() as f64
    }
}

struct ExampleUpdate {
    grad: GradientAccumulator,
    mean_reward: f64,
    clamped: usize,
}

/// Ascent direction for one example: sample, score, weight, assemble.
fn example_update(
    policy: &PolicyParams,
    fixed: &PolicyParams,
    classifier: &ClassifierParams,
    task: &Task,
    ex: &Example,
    cfg: &RunConfig,
    decode_seed: u64,
) -> Result<ExampleUpdate> {
    let sampler = if cfg.regime == Regime::Off { fixed } else { policy };
    let decoded = decode(sampler, &ex.x, cfg.decoder, &cfg.decode_config(cfg.m, decode_seed))?;
    let mut samples = Vec::with_capacity(decoded.len());
    let mut grads = Vec::with_capacity(decoded.len());
    for d in decoded {
        let (lp, g) = policy.seq_logprob_with_grad(&ex.x, &d.seq)?;
        let fixed_lp = match cfg.regime {
            Regime::On => lp.value(),
            Regime::Off | Regime::Klon => fixed.seq_logprob(&ex.x, &d.seq)?.value(),
        };
        let reward = task.reward(classifier, &d.seq, ex.y)?;
        samples.push(Sample { seq: d.seq, cur_logprob: lp.value(), fixed_logprob: fixed_lp, reward });
        grads.push(g);
    }
    let mut batch = SampleBatch::new(samples)?;
    let raw = batch.rewards();
    let mean_reward = raw.iter().sum::<f64>() / raw.len() as f64;
    if cfg.normalize {
        batch = batch.with_rewards(&normalize_rewards(&raw)?)?;
    }
    let coeffs = match (cfg.regime, cfg.estimator) {
        (Regime::Off, kind) => offpolicy_coefficients(&batch, kind)?,
        (_, EstimatorKind::Mml) => mml_coefficients(&batch)?,
        (_, EstimatorKind::Pg) => pg_coefficients(&batch)?,
    };
    let mut grad = assemble_gradient(&coeffs.phi, &grads)?;
    let mut clamped = coeffs.clamped;
    if cfg.regime == Regime::Klon {
        let (_, c) = crate::estimators::log_ratios(&batch)?;
        clamped += c;
        grad = klon_gradient(&batch, &grads, &grad, &KlonConfig::new(cfg.beta)?)?;
    }
    Ok(ExampleUpdate { grad, mean_reward, clamped })
}

/// Reward-guided fine-tuning of the paraphraser against a frozen classifier.
///
/// Every step decodes fresh samples for each example of the minibatch; the
/// pretrained policy doubles as the off-policy sampler and the KL anchor.
/// Validation runs at step 0 and every `checkpoint_interval` steps, scoring
/// paraphrases only (the original input is left out of the ensemble).
pub fn finetune_paraphraser(
    policy: PolicyParams,
    classifier: &ClassifierParams,
    task: &Task,
    split: &FewShotSplit,
    cfg: &RunConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(RiffError::Empty("few-shot split"));
    }
    let fixed = policy.snapshot();
    let mut policy = policy;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(policy.params.len(), cfg.lr, cfg.weight_decay);
    let all = [0..policy.params.len()];
    let eval_cfg = cfg.decode_config(cfg.eval_m, 0);
    let validate = |p: &PolicyParams| ensemble_accuracy(classifier, task, p, &split.validation, &eval_cfg, cfg.eval_m, false);

    let mut metrics = Vec::new();
    let base_acc = validate(&policy)?;
    metrics.push(MetricRow::new(0, "validation", "ensemble_accuracy", base_acc));
    let baseline = Checkpoint { step: 0, params: policy.clone(), val_accuracy: base_acc };

    let mut order: Vec<usize> = (0..split.train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut checkpoints = Vec::with_capacity(cfg.steps / cfg.checkpoint_interval);
    let mut clamp_events = 0;
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push((order[cursor], rng.random::<u64>()));
            cursor += 1;
        }
        let updates: Vec<ExampleUpdate> = batch
            .par_iter()
            .map(|&(i, seed)| example_update(&policy, &fixed, classifier, task, &split.train[i], cfg, seed))
            .collect::<Result<_>>()?;
        let mut grad = policy.params.zeros_like();
        let mut reward = 0.0;
        for u in &updates {
            // the optimizer minimizes, so accumulate the negated ascent direction
            grad.add_scaled(&u.grad, -1.0 / updates.len() as f64)?;
            reward += u.mean_reward / updates.len() as f64;
            clamp_events += u.clamped;
        }
        grad.check_finite()?;
        opt.step(policy.params.values_mut(), grad.values(), &all)?;
        metrics.push(MetricRow::new(step, "train", "mean_reward", reward));
        if step % cfg.checkpoint_interval == 0 {
            let acc = validate(&policy)?;
            metrics.push(MetricRow::new(step, "validation", "ensemble_accuracy", acc));
            checkpoints.push(Checkpoint { step, params: policy.clone(), val_accuracy: acc });
        }
    }
    metrics.push(MetricRow::new(cfg.steps, "train", "clamp_events", clamp_events as f64));
    let epochs = (cfg.steps * cfg.batch_size) as f64 / split.train.len() as f64;
    Ok(FinetuneOutcome { baseline, checkpoints, metrics, epochs, clamp_events })
}

// ---------------------------------------------------------------- classifier loop

/// Paraphrases decoded once per (policy, example) and reused every epoch.
#[derive(Debug, Clone, Default)]
pub struct ParaphraseCache {
    entries: HashMap<(String, usize), Vec<TokenSeq>>,
}

impl ParaphraseCache {
    pub fn build(policy: &PolicyParams, inputs: &[(usize, &TokenSeq)], decode_cfg: &DecodeConfig, m: usize) -> Result<Self> {
        let hash = policy_hash(policy);
        let decoded: Vec<(usize, Vec<TokenSeq>)> = inputs
            .par_iter()
            .map(|&(id, x)| Ok((id, test_paraphrases(policy, x, decode_cfg, m)?)))
            .collect::<Result<_>>()?;
        let entries = decoded.into_iter().map(|(id, zs)| ((hash.clone(), id), zs)).collect();
        Ok(Self { entries })
    }

    pub fn get(&self, policy_hash: &str, id: usize) -> Result<&[TokenSeq]> {
        self.entries.get(&(policy_hash.to_string(), id)).map(Vec::as_slice).ok_or(RiffError::CacheMiss(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub mode: TuningMode,
    /// Paraphrases per example; 0 disables augmentation.
    pub m: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_interval: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub gs_k: usize,
    pub gs_batch: usize,
}

impl ClassifierTrainConfig {
    pub fn new(mode: TuningMode, m: usize, seed: u64) -> Self {
        Self {
            mode,
            m,
            lr: 1e-3,
            steps: 1120,
            batch_size: 8,
            checkpoint_interval: 8,
            weight_decay: 1e-4,
            seed,
            gs_k: GS_TOP_K,
            gs_batch: GS_BATCH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", "must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 || self.gs_batch == 0 || self.gs_k == 0 {
            return Err(invalid("batch_size/checkpoint_interval/gs_batch/gs_k", "must be at least 1"));
        }
        Ok(())
    }
}

/// Negated objective for one minibatch and its gradient (unmasked):
/// `−Σ_i [log P(y_i|x_i) + (1/M) Σ_j log P(y_i|z_ij)]`.
pub fn augmented_gradient(
    classifier: &ClassifierParams,
    task: &Task,
    batch: &[(&Example, &[TokenSeq])],
) -> Result<(f64, GradientAccumulator)> {
    let mut loss = 0.0;
    let mut grad = classifier.params.zeros_like();
    for (ex, zs) in batch {
        let (lp, g, _) = classifier.logprob_with_full_grad(&task.format(&ex.x)?, ex.y, &task.verbalizer)?;
        loss -= lp;
        grad.add_scaled(&g, -1.0)?;
        let w = 1.0 / zs.len().max(1) as f64;
        for z in zs.iter() {
            let (lp, g, _) = classifier.logprob_with_full_grad(&task.format(z)?, ex.y, &task.verbalizer)?;
            loss -= w * lp;
            grad.add_scaled(&g, -w)?;
        }
    }
    Ok((loss, grad))
}

/// Plain supervised loss and gradient over the same minibatch.
pub fn supervised_gradient(classifier: &ClassifierParams, task: &Task, batch: &[&Example]) -> Result<(f64, GradientAccumulator)> {
    let mut loss = 0.0;
    let mut grad = classifier.params.zeros_like();
    for ex in batch {
        let input = task.format(&ex.x)?;
        loss -= classifier.reward(&input, ex.y, &task.verbalizer)?;
        grad.add_scaled(&classifier.classifier_grad(&input, ex.y, &task.verbalizer)?, -1.0)?;
    }
    Ok((loss, classifier.mask_gradient(grad)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    pub classifier: ClassifierParams,
    pub instruction: Instruction,
}

#[derive(Debug, Clone)]
pub struct ClassifierOutcome {
    pub baseline: Checkpoint<ClassifierState>,
    pub checkpoints: Vec<Checkpoint<ClassifierState>>,
    pub metrics: Vec<MetricRow>,
    pub epochs: f64,
}

impl ClassifierOutcome {
    pub fn best(&self) -> &Checkpoint<ClassifierState> {
        select_best_checkpoint(&self.checkpoints).unwrap_or(&self.baseline)
    }
}

/// Classifier training on originals plus cached paraphrases. GS mode
/// searches the instruction instead of updating parameters. Validation uses
/// the ensemble with the original input included.
pub fn train_classifier_augmented(
    classifier: ClassifierParams,
    policy: &PolicyParams,
    task: &Task,
    split: &FewShotSplit,
    decode_cfg: &DecodeConfig,
    cfg: &ClassifierTrainConfig,
) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(RiffError::Empty("few-shot split"));
    }
    if cfg.mode == TuningMode::Gs && task.instruction.is_empty() {
        return Err(invalid("instruction", "instruction search needs at least one instruction token"));
    }
    let mut classifier = classifier.with_mode(cfg.mode);
    let mut task = task.clone();
    let n_train = split.train.len();
    let inputs: Vec<(usize, &TokenSeq)> =
        split.train.iter().chain(&split.validation).enumerate().map(|(i, ex)| (i, &ex.x)).collect();
    let cache = ParaphraseCache::build(policy, &inputs, decode_cfg, cfg.m)?;
    let hash = policy_hash(policy);

    let validate = |c: &ClassifierParams, t: &Task| -> Result<f64> {
        let mut hits = 0;
        for (k, ex) in split.validation.iter().enumerate() {
            let zs = cache.get(&hash, n_train + k)?;
            hits += (ensemble_predict(c, t, &ex.x, zs, true)? == ex.y) as usize;
        }
        Ok(hits as f64 / split.validation.len() as f64)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(classifier.params.len(), cfg.lr, cfg.weight_decay);
    let trainable = classifier.trainable_ranges();
    let mut metrics = Vec::new();
    let acc0 = validate(&classifier, &task)?;
    metrics.push(MetricRow::new(0, "validation", "ensemble_accuracy", acc0));
    let state = |c: &ClassifierParams, t: &Task| ClassifierState { classifier: c.clone(), instruction: t.instruction.clone() };
    let baseline = Checkpoint { step: 0, params: state(&classifier, &task), val_accuracy: acc0 };

    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut checkpoints = Vec::new();
    let size = if cfg.mode == TuningMode::Gs { cfg.gs_batch } else { cfg.batch_size };
    for step in 1..=cfg.steps {
        let mut ids = Vec::with_capacity(size);
        while ids.len() < size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            ids.push(order[cursor]);
            cursor += 1;
        }
        if cfg.mode == TuningMode::Gs {
            let mut mb: Vec<Example> = Vec::new();
            for &i in &ids {
                let ex = &split.train[i];
                mb.push(ex.clone());
                mb.extend(cache.get(&hash, i)?.iter().map(|z| Example { x: z.clone(), y: ex.y, text: None }));
            }
            let s = gs_step(&classifier, &task, &mb, cfg.gs_k, &mut rng)?;
            metrics.push(MetricRow::new(step, "train", "minibatch_loglik", s.chosen_loglik));
            task = task.with_instruction(s.instruction);
        } else {
            let batch: Vec<(&Example, &[TokenSeq])> =
                ids.iter().map(|&i| Ok((&split.train[i], cache.get(&hash, i)?))).collect::<Result<_>>()?;
            let (loss, grad) = augmented_gradient(&classifier, &task, &batch)?;
            let mut grad = classifier.mask_gradient(grad);
            grad.scale(1.0 / batch.len() as f64);
            grad.check_finite()?;
            opt.step(classifier.params.values_mut(), grad.values(), &trainable)?;
            metrics.push(MetricRow::new(step, "train", "loss", loss / batch.len() as f64));
        }
        if step % cfg.checkpoint_interval == 0 {
            let acc = validate(&classifier, &task)?;
            metrics.push(MetricRow::new(step, "validation", "ensemble_accuracy", acc));
            checkpoints.push(Checkpoint { step, params: state(&classifier, &task), val_accuracy: acc });
        }
    }
    let epochs = (cfg.steps * size) as f64 / n_train as f64;
    Ok(ClassifierOutcome { baseline, checkpoints, metrics, epochs })
}

// ---------------------------------------------------------------- run files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub name: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub n_train: usize,
    pub n_validation: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_interval: usize,
    pub epochs: f64,
    pub checkpoint_steps: Vec<usize>,
    pub checkpoint_count: usize,
    pub baseline_accuracy: f64,
    pub best_step: usize,
    pub best_accuracy: f64,
    pub mean_checkpoint_accuracy: f64,
    /// Relative path to SHA-256 for every file written by the run.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";

fn hash_files(dir: &Path, rel: &[String]) -> Result<BTreeMap<String, String>> {
    rel.iter().map(|r| Ok((r.clone(), file_hash(&dir.join(r))?))).collect()
}

fn finish_manifest(dir: &Path, mut manifest: RunManifest, metrics: &[MetricRow], mut files: Vec<String>) -> Result<PathBuf> {
    fs::write(dir.join(METRICS_FILE), metrics_csv(metrics))?;
    files.push(METRICS_FILE.into());
    manifest.files = hash_files(dir, &files)?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Writes checkpoints, `metrics.csv` and `manifest.json` for a paraphraser run.
pub fn write_finetune_run(
    dir: &Path,
    name: &str,
    cfg: &RunConfig,
    split: &FewShotSplit,
    outcome: &FinetuneOutcome,
) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    let mut files = Vec::new();
    for c in std::iter::once(&outcome.baseline).chain(&outcome.checkpoints) {
        let rel = format!("checkpoints/step_{:06}.ckpt", c.step);
        save_policy(&dir.join(&rel), &c.params)?;
        files.push(rel);
    }
    let best = outcome.best();
    let manifest = RunManifest {
        kind: "riff-finetune".into(),
        name: name.into(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        n_train: split.train.len(),
        n_validation: split.validation.len(),
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        checkpoint_interval: cfg.checkpoint_interval,
        epochs: outcome.epochs,
        checkpoint_steps: outcome.checkpoints.iter().map(|c| c.step).collect(),
        checkpoint_count: outcome.checkpoints.len(),
        baseline_accuracy: outcome.baseline.val_accuracy,
        best_step: best.step,
        best_accuracy: best.val_accuracy,
        mean_checkpoint_accuracy: outcome.mean_checkpoint_accuracy(),
        files: BTreeMap::new(),
    };
    finish_manifest(dir, manifest, &outcome.metrics, files)
}

/// Writes checkpoints (with instructions), `metrics.csv` and `manifest.json`
/// for a classifier run.
pub fn write_classifier_run(
    dir: &Path,
    name: &str,
    cfg: &ClassifierTrainConfig,
    split: &FewShotSplit,
    outcome: &ClassifierOutcome,
) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    let mut files = Vec::new();
    for c in std::iter::once(&outcome.baseline).chain(&outcome.checkpoints) {
        let rel = format!("checkpoints/step_{:06}.ckpt", c.step);
        save_classifier(&dir.join(&rel), &c.params.classifier)?;
        let rel_instr = format!("checkpoints/step_{:06}.instruction.json", c.step);
        fs::write(dir.join(&rel_instr), serde_json::to_string(&c.params.instruction)?)?;
        files.push(rel);
        files.push(rel_instr);
    }
    let best = outcome.best();
    let mean = if outcome.checkpoints.is_empty() {
        outcome.baseline.val_accuracy
    } else {
        outcome.checkpoints.iter().map(|c| c.val_accuracy).sum::<f64>() / outcome.checkpoints.len() as f64
    };
    let manifest = RunManifest {
        kind: "train-classifier".into(),
        name: name.into(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        n_train: split.train.len(),
        n_validation: split.validation.len(),
        steps: cfg.steps,
        batch_size: if cfg.mode == TuningMode::Gs { cfg.gs_batch } else { cfg.batch_size },
        checkpoint_interval: cfg.checkpoint_interval,
        epochs: outcome.epochs,
        checkpoint_steps: outcome.checkpoints.iter().map(|c| c.step).collect(),
        checkpoint_count: outcome.checkpoints.len(),
        baseline_accuracy: outcome.baseline.val_accuracy,
        best_step: best.step,
        best_accuracy: best.val_accuracy,
        mean_checkpoint_accuracy: mean,
        files: BTreeMap::new(),
    };
    finish_manifest(dir, manifest, &outcome.metrics, files)
}
