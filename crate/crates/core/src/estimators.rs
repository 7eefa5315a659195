//! Sample weights for the paraphraser update: MML and policy-gradient
//! coefficients, per-batch reward standardization, importance-weighted
//! off-policy variants, and the KL-corrected on-policy gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffmath::{logsumexp, GradientAccumulator};
use crate::error::{invalid, Result, RiffError};
use crate::seqpolicy::TokenSeq;

/// Bound on `|log s|` for importance ratios.
pub const LOG_RATIO_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub seq: TokenSeq,
    /// `log P_θ(z|x)` under the policy being trained.
    pub cur_logprob: f64,
    /// `log P_fixed(z|x)` under the frozen snapshot.
    pub fixed_logprob: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub samples: Vec<Sample>,
}

impl SampleBatch {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let batch = Self { samples };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(RiffError::Empty("sample batch"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            // −∞ log-probabilities are legal (zero-mass samples); NaN and +∞ are not.
            for v in [s.cur_logprob, s.fixed_logprob] {
                if v.is_nan() || v == f64::INFINITY {
                    return Err(RiffError::NonFinite { index: i, value: v });
                }
            }
            if !s.reward.is_finite() {
                return Err(RiffError::NonFinite { index: i, value: s.reward });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.reward).collect()
    }

    /// Same samples with rewards replaced (used for normalized variants).
    pub fn with_rewards(&self, rewards: &[f64]) -> Result<Self> {
        if rewards.len() != self.len() {
            return Err(RiffError::Shape(format!("{} rewards for {} samples", rewards.len(), self.len())));
        }
        let samples = self.samples.iter().zip(rewards).map(|(s, &r)| Sample { reward: r, ..s.clone() }).collect();
        Self::new(samples)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Mml,
    Pg,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Mml => "mml",
            EstimatorKind::Pg => "pg",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = RiffError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mml" => Ok(Self::Mml),
            "pg" => Ok(Self::Pg),
            other => Err(invalid("estimator", format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoefficientKind {
    Mml,
    Pg,
    MmlOff,
    PgOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub phi: Vec<f64>,
    pub kind: CoefficientKind,
    /// Importance ratios that hit the clamp.
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlonConfig {
    pub beta: f64,
}

impl KlonConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(invalid("beta", format!("must be finite and non-negative, got {beta}")));
        }
        Ok(Self { beta })
    }
}

/// `softmax_j(w_j)` over log-weights, failing when every weight is −∞.
fn normalized_from_log(logw: &[f64]) -> Result<Vec<f64>> {
    let z = logsumexp(logw)?;
    if z == f64::NEG_INFINITY || !z.is_finite() {
        return Err(RiffError::DegenerateBatch);
    }
    Ok(logw.iter().map(|l| (l - z).exp()).collect())
}

/// `φ_j ∝ P(z_j|x)·e^{R_j}`, normalized over the batch.
pub fn mml_coefficients(batch: &SampleBatch) -> Result<Coefficients> {
    batch.validate()?;
    let logw: Vec<f64> = batch.samples.iter().map(|s| s.cur_logprob + s.reward).collect();
    Ok(Coefficients { phi: normalized_from_log(&logw)?, kind: CoefficientKind::Mml, clamped: 0 })
}

/// `φ_j = P(z_j|x)·R_j`.
pub fn pg_coefficients(batch: &SampleBatch) -> Result<Coefficients> {
    batch.validate()?;
    let phi = batch.samples.iter().map(|s| s.cur_logprob.exp() * s.reward).collect();
    Ok(Coefficients { phi, kind: CoefficientKind::Pg, clamped: 0 })
}

/// Standardize with population mean and deviation; constant input maps to zeros.
pub fn normalize_rewards(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(RiffError::Empty("rewards"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 || rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / sd).collect())
}

/// Clamped `log s_j = cur − fixed`, plus the number of clamp hits.
pub fn log_ratios(batch: &SampleBatch) -> Result<(Vec<f64>, usize)> {
    let mut clamped = 0;
    let mut out = Vec::with_capacity(batch.len());
    for (i, s) in batch.samples.iter().enumerate() {
        let raw = s.cur_logprob - s.fixed_logprob;
        if raw.is_nan() {
            return Err(RiffError::NonFinite { index: i, value: raw });
        }
        let c = raw.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
        if c != raw {
            clamped += 1;
        }
        out.push(c);
    }
    Ok((out, clamped))
}

/// Importance-weighted coefficients for samples drawn from the frozen snapshot.
pub fn offpolicy_coefficients(batch: &SampleBatch, kind: EstimatorKind) -> Result<Coefficients> {
    batch.validate()?;
    let (log_s, clamped) = log_ratios(batch)?;
    match kind {
        EstimatorKind::Mml => {
            let logw: Vec<f64> = log_s.iter().zip(&batch.samples).map(|(l, s)| l + s.reward).collect();
            Ok(Coefficients { phi: normalized_from_log(&logw)?, kind: CoefficientKind::MmlOff, clamped })
        }
        EstimatorKind::Pg => {
            let phi = log_s.iter().zip(&batch.samples).map(|(l, s)| l.exp() * s.reward).collect();
            Ok(Coefficients { phi, kind: CoefficientKind::PgOff, clamped })
        }
    }
}

/// `Σ_j φ_j · grad_j`.
pub fn assemble_gradient(coeffs: &[f64], grads: &[GradientAccumulator]) -> Result<GradientAccumulator> {
    if coeffs.len() != grads.len() {
        return Err(RiffError::Shape(format!("{} coefficients for {} gradients", coeffs.len(), grads.len())));
    }
    let first = grads.first().ok_or(RiffError::Empty("per-sample gradients"))?;
    let mut out = first.zeros_like();
    for (&phi, g) in coeffs.iter().zip(grads) {
        if !g.same_layout(first) {
            return Err(RiffError::Shape("per-sample gradients differ in layout".into()));
        }
        if phi != 0.0 {
            out.add_scaled(g, phi)?;
        }
    }
    Ok(out)
}

/// Uniform-weight KL correction: `base − β·(1/M)·Σ_j (log s_j + 1)·grad_j`.
pub fn klon_gradient(
    batch: &SampleBatch,
    grads: &[GradientAccumulator],
    base: &GradientAccumulator,
    cfg: &KlonConfig,
) -> Result<GradientAccumulator> {
    let weights = vec![1.0 / batch.len() as f64; batch.len()];
    klon_penalty_weighted(batch, grads, base, cfg, &weights)
}

/// KL correction with explicit sample weights `w_j` (uniform `1/M` for
/// sampled batches, `P(z)` under full enumeration).
pub fn klon_penalty_weighted(
    batch: &SampleBatch,
    grads: &[GradientAccumulator],
    base: &GradientAccumulator,
    cfg: &KlonConfig,
    weights: &[f64],
) -> Result<GradientAccumulator> {
    if cfg.beta == 0.0 {
        return Ok(base.clone());
    }
    batch.validate()?;
    if grads.len() != batch.len() || weights.len() != batch.len() {
        return Err(RiffError::Shape(format!(
            "{} samples, {} gradients, {} weights",
            batch.len(),
            grads.len(),
            weights.len()
        )));
    }
    let (log_s, _) = log_ratios(batch)?;
    let coeffs: Vec<f64> = log_s.iter().zip(weights).map(|(l, w)| w * (l + 1.0)).collect();
    let penalty = assemble_gradient(&coeffs, grads)?;
    if !penalty.same_layout(base) {
        return Err(RiffError::Shape("base gradient layout differs".into()));
    }
    let mut out = base.clone();
    out.add_scaled(&penalty, -cfg.beta)?;
    Ok(out)
}
