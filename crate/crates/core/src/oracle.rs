//! Exhaustive enumeration of the paraphrase space for tiny policies, with the
//! exact objective and gradients every estimator is checked against.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, ClassifierParams, TuningMode, Verbalizer};
use crate::data::{Instruction, Task, TaskTemplate};
use crate::diffmath::{finite_diff_grad_richardson, log_softmax, logsumexp, max_relative_error, GradientAccumulator};
use crate::error::{Result, RiffError};
use crate::estimators::{assemble_gradient, klon_penalty_weighted, mml_coefficients, KlonConfig, Sample, SampleBatch};
use crate::seqpolicy::{PolicyConfig, PolicyParams, TokenId, TokenSeq, EOS};

/// Refuse enumeration when `V^max_len` exceeds this.
pub const ENUMERATION_GUARD: u64 = 1_000_000;

/// Unterminated mass above this is worth a warning.
pub const TAIL_WARNING: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    /// Every EOS-terminated sequence of length ≤ `max_len`, in depth-first
    /// order (EOS before content tokens at each position).
    pub sequences: Vec<(TokenSeq, f64)>,
    /// Log-mass of every EOS-free prefix of length < `max_len`, plus the
    /// length-`max_len` prefixes that never terminate.
    pub prefixes: HashMap<Vec<TokenId>, f64>,
    /// Probability of running past `max_len` without EOS.
    pub tail_mass: f64,
    pub max_len: usize,
    pub vocab: usize,
}

impl Enumeration {
    pub fn logprobs(&self) -> Vec<f64> {
        self.sequences.iter().map(|(_, lp)| *lp).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.sequences.iter().map(|(_, lp)| lp.exp()).sum()
    }

    pub fn tail_warning(&self) -> bool {
        self.tail_mass > TAIL_WARNING
    }

    /// Greedy path read off the enumerated prefix masses: at each position
    /// take the child with the largest mass (lowest id on ties); EOS is
    /// forced at the final position.
    pub fn greedy_path(&self) -> TokenSeq {
        let terminated: HashMap<&[TokenId], f64> = self.sequences.iter().map(|(s, lp)| (s.ids(), *lp)).collect();
        let mut prefix: Vec<TokenId> = Vec::new();
        loop {
            if prefix.len() + 1 == self.max_len {
                prefix.push(EOS);
                break;
            }
            let mut with_eos = prefix.clone();
            with_eos.push(EOS);
            let mut best = (EOS, terminated[with_eos.as_slice()]);
            for tok in 1..self.vocab as TokenId {
                let mut child = prefix.clone();
                child.push(tok);
                let lp = self.prefixes[&child];
                if lp > best.1 {
                    best = (tok, lp);
                }
            }
            prefix.push(best.0);
            if best.0 == EOS {
                break;
            }
        }
        TokenSeq::new(prefix).expect("greedy path is EOS-terminated")
    }
}

/// Exhaustive listing of the policy's output space for input `x`.
pub fn enumerate_sequences(policy: &PolicyParams, x: &TokenSeq) -> Result<Enumeration> {
    let vocab = policy.vocab();
    let max_len = policy.max_len();
    let size = (vocab as u64).checked_pow(max_len as u32);
    if size.is_none_or(|s| s > ENUMERATION_GUARD) {
        return Err(RiffError::EnumerationGuard { vocab, max_len, guard: ENUMERATION_GUARD });
    }
    let ctx = policy.encode(x)?;
    let mut out = Enumeration { sequences: Vec::new(), prefixes: HashMap::new(), tail_mass: 0.0, max_len, vocab };
    let mut prefix = Vec::with_capacity(max_len);
    out.prefixes.insert(Vec::new(), 0.0);
    walk(policy, &ctx, &mut prefix, 0.0, &mut out)?;
    Ok(out)
}

fn walk(policy: &PolicyParams, ctx: &[f64], prefix: &mut Vec<TokenId>, lp: f64, out: &mut Enumeration) -> Result<()> {
    if prefix.len() == out.max_len {
        out.tail_mass += lp.exp();
        return Ok(());
    }
    let prev = prefix.last().copied().unwrap_or(EOS);
    let lsm = log_softmax(&policy.next_logits(ctx, prev), 1.0)?;
    let mut done = prefix.clone();
    done.push(EOS);
    out.sequences.push((TokenSeq::new(done)?, lp + lsm[EOS as usize]));
    for tok in 1..out.vocab as TokenId {
        prefix.push(tok);
        let child = lp + lsm[tok as usize];
        out.prefixes.insert(prefix.clone(), child);
        walk(policy, ctx, prefix, child, out)?;
        prefix.pop();
    }
    Ok(())
}

/// Task rewards `log P(y | template(z))` for every enumerated sequence.
pub fn sequence_rewards(en: &Enumeration, task: &Task, classifier: &ClassifierParams, y: usize) -> Result<Vec<f64>> {
    en.sequences.iter().map(|(z, _)| task.reward(classifier, z, y)).collect()
}

fn check_aligned(en: &Enumeration, rewards: &[f64]) -> Result<()> {
    if en.sequences.len() != rewards.len() {
        return Err(RiffError::Shape(format!("{} rewards for {} sequences", rewards.len(), en.sequences.len())));
    }
    Ok(())
}

/// `log Σ_z P(z|x) e^{R(z)}` over the enumerated (terminated) set.
pub fn objective_with_rewards(policy: &PolicyParams, x: &TokenSeq, rewards: &[f64]) -> Result<f64> {
    let en = enumerate_sequences(policy, x)?;
    check_aligned(&en, rewards)?;
    let terms: Vec<f64> = en.sequences.iter().zip(rewards).map(|((_, lp), r)| lp + r).collect();
    logsumexp(&terms)
}

pub fn exact_objective(policy: &PolicyParams, classifier: &ClassifierParams, task: &Task, x: &TokenSeq, y: usize) -> Result<f64> {
    let en = enumerate_sequences(policy, x)?;
    let rewards = sequence_rewards(&en, task, classifier, y)?;
    objective_with_rewards(policy, x, &rewards)
}

fn full_batch(
    policy: &PolicyParams,
    fixed: Option<&PolicyParams>,
    x: &TokenSeq,
    rewards: &[f64],
) -> Result<(SampleBatch, Vec<GradientAccumulator>)> {
    let en = enumerate_sequences(policy, x)?;
    check_aligned(&en, rewards)?;
    let fixed_lp = match fixed {
        Some(f) => {
            let fe = enumerate_sequences(f, x)?;
            if fe.sequences.len() != en.sequences.len() {
                return Err(RiffError::Shape("snapshot enumerates a different space".into()));
            }
            fe.logprobs()
        }
        None => en.logprobs(),
    };
    let mut samples = Vec::with_capacity(en.sequences.len());
    let mut grads = Vec::with_capacity(en.sequences.len());
    for (((z, lp), &r), &flp) in en.sequences.iter().zip(rewards).zip(&fixed_lp) {
        grads.push(policy.seq_logprob_grad(x, z)?);
        samples.push(Sample { seq: z.clone(), cur_logprob: *lp, fixed_logprob: flp, reward: r });
    }
    Ok((SampleBatch::new(samples)?, grads))
}

/// MML coefficients over the whole enumerated space, assembled into a gradient.
pub fn exact_gradient_with_rewards(policy: &PolicyParams, x: &TokenSeq, rewards: &[f64]) -> Result<GradientAccumulator> {
    let (batch, grads) = full_batch(policy, None, x, rewards)?;
    assemble_gradient(&mml_coefficients(&batch)?.phi, &grads)
}

pub fn exact_gradient(
    policy: &PolicyParams,
    classifier: &ClassifierParams,
    task: &Task,
    x: &TokenSeq,
    y: usize,
) -> Result<GradientAccumulator> {
    let en = enumerate_sequences(policy, x)?;
    let rewards = sequence_rewards(&en, task, classifier, y)?;
    exact_gradient_with_rewards(policy, x, &rewards)
}

/// `log E[e^R] − β · Σ_z P(z) log(P(z) / P_fixed(z))` over the enumerated set.
pub fn exact_klon_objective(policy: &PolicyParams, fixed: &PolicyParams, x: &TokenSeq, rewards: &[f64], beta: f64) -> Result<f64> {
    let batch = full_batch_no_grad(policy, fixed, x, rewards)?;
    let terms: Vec<f64> = batch.samples.iter().map(|s| s.cur_logprob + s.reward).collect();
    let kl: f64 = batch.samples.iter().map(|s| s.cur_logprob.exp() * (s.cur_logprob - s.fixed_logprob)).sum();
    Ok(logsumexp(&terms)? - beta * kl)
}

fn full_batch_no_grad(policy: &PolicyParams, fixed: &PolicyParams, x: &TokenSeq, rewards: &[f64]) -> Result<SampleBatch> {
    let en = enumerate_sequences(policy, x)?;
    let fe = enumerate_sequences(fixed, x)?;
    check_aligned(&en, rewards)?;
    let samples = en
        .sequences
        .iter()
        .zip(&fe.sequences)
        .zip(rewards)
        .map(|(((z, lp), (_, flp)), &r)| Sample { seq: z.clone(), cur_logprob: *lp, fixed_logprob: *flp, reward: r })
        .collect();
    SampleBatch::new(samples)
}

/// Gradient of [`exact_klon_objective`]: the MML gradient minus the KL
/// correction weighted by `P(z)`.
pub fn exact_klon_gradient(
    policy: &PolicyParams,
    fixed: &PolicyParams,
    x: &TokenSeq,
    rewards: &[f64],
    beta: f64,
) -> Result<GradientAccumulator> {
    let (batch, grads) = full_batch(policy, Some(fixed), x, rewards)?;
    let base = assemble_gradient(&mml_coefficients(&batch)?.phi, &grads)?;
    let weights: Vec<f64> = batch.samples.iter().map(|s| s.cur_logprob.exp()).collect();
    klon_penalty_weighted(&batch, &grads, &base, &KlonConfig::new(beta)?, &weights)
}

/// A random policy/classifier/task triple small enough to enumerate.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub policy: PolicyParams,
    pub classifier: ClassifierParams,
    pub task: Task,
    pub x: TokenSeq,
    pub y: usize,
}

impl TinyInstance {
    /// Policy vocabulary `vocab` (EOS included); the classifier vocabulary
    /// appends BOS, SEP and MASK.
    pub fn random(seed: u64, vocab: usize, max_len: usize, embed_dim: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = PolicyParams::init(PolicyConfig { vocab, embed_dim, hidden: embed_dim, max_len }, rng.random())?;
        // Spread the logits so the space is not near-uniform.
        policy.params.scale(3.0);
        let full = vocab + 3;
        let (bos, sep, mask) = (vocab as TokenId, vocab as TokenId + 1, vocab as TokenId + 2);
        let mut cc = ClassifierConfig::new(full, embed_dim, 2, mask);
        cc.max_len = 3 + 2 * max_len + 2;
        let classifier = ClassifierParams::init(cc, TuningMode::AllTune, rng.random())?;
        let verbalizer = Verbalizer::new(vec![1, sep], full)?;
        let template = TaskTemplate { bos, sep, mask, mask_first: false, max_len: cc.max_len };
        let task = Task { template, instruction: Instruction(vec![]), verbalizer };
        let n = rng.random_range(1..=max_len.max(1));
        let content: Vec<TokenId> = (0..n).map(|_| rng.random_range(1..vocab as TokenId)).collect();
        Ok(Self { policy, classifier, task, x: TokenSeq::from_content(&content)?, y: rng.random_range(0..2) })
    }

    pub fn rewards(&self) -> Result<Vec<f64>> {
        let en = enumerate_sequences(&self.policy, &self.x)?;
        sequence_rewards(&en, &self.task, &self.classifier, self.y)
    }

    /// A nearby policy to act as the frozen snapshot.
    pub fn perturbed_policy(&self, seed: u64, scale: f64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = self.policy.clone();
        p.params.values_mut().iter_mut().for_each(|v| *v += scale * (rng.random::<f64>() - 0.5));
        p
    }
}

/// Step used for the central differences in the oracle suite.
pub const FD_STEP: f64 = 1e-3;
/// Components below this in magnitude are skipped in relative-error checks.
pub const FD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instances: usize,
    pub mml_max_rel_err: f64,
    pub klon_max_rel_err: f64,
    /// Whether β = 0 reproduced the plain gradient bitwise on every instance.
    pub klon_zero_beta_bitwise: bool,
}

impl OracleReport {
    pub fn max_rel_err(&self) -> f64 {
        self.mml_max_rel_err.max(self.klon_max_rel_err)
    }
}

pub fn mml_fd_error(inst: &TinyInstance) -> Result<f64> {
    let rewards = inst.rewards()?;
    let analytic = exact_gradient_with_rewards(&inst.policy, &inst.x, &rewards)?;
    let f = |theta: &crate::diffmath::ParamVector| {
        let p = PolicyParams::from_parts(inst.policy.config, theta.clone()).expect("same layout");
        objective_with_rewards(&p, &inst.x, &rewards).unwrap_or(f64::NAN)
    };
    let numeric = finite_diff_grad_richardson(f, &inst.policy.params, FD_STEP)?;
    Ok(max_relative_error(analytic.values(), &numeric, FD_FLOOR))
}

pub fn klon_fd_error(inst: &TinyInstance, fixed: &PolicyParams, beta: f64) -> Result<f64> {
    let rewards = inst.rewards()?;
    let analytic = exact_klon_gradient(&inst.policy, fixed, &inst.x, &rewards, beta)?;
    let f = |theta: &crate::diffmath::ParamVector| {
        let p = PolicyParams::from_parts(inst.policy.config, theta.clone()).expect("same layout");
        exact_klon_objective(&p, fixed, &inst.x, &rewards, beta).unwrap_or(f64::NAN)
    };
    let numeric = finite_diff_grad_richardson(f, &inst.policy.params, FD_STEP)?;
    Ok(max_relative_error(analytic.values(), &numeric, FD_FLOOR))
}

/// Finite-difference checks of the MML and KL-corrected gradients on
/// `instances` random tiny problems (`V ≤ 4`, `max_len ≤ 4`, `d = 4`).
pub fn run_oracle_suite(seed: u64, instances: usize) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport { instances, mml_max_rel_err: 0.0, klon_max_rel_err: 0.0, klon_zero_beta_bitwise: true };
    for _ in 0..instances {
        let vocab = rng.random_range(2..=4);
        let max_len = rng.random_range(2..=4);
        let inst = TinyInstance::random(rng.random(), vocab, max_len, 4)?;
        report.mml_max_rel_err = report.mml_max_rel_err.max(mml_fd_error(&inst)?);
        let fixed = inst.perturbed_policy(rng.random(), 0.5);
        for beta in [0.1, 0.6] {
            report.klon_max_rel_err = report.klon_max_rel_err.max(klon_fd_error(&inst, &fixed, beta)?);
        }
        let rewards = inst.rewards()?;
        let plain = exact_gradient_with_rewards(&inst.policy, &inst.x, &rewards)?;
        let zero = exact_klon_gradient(&inst.policy, &fixed, &inst.x, &rewards, 0.0)?;
        if plain.values().iter().zip(zero.values()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            report.klon_zero_beta_bitwise = false;
        }
    }
    Ok(report)
}
