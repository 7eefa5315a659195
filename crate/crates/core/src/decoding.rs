//! Sample-set construction: diverse beam search (one beam per group, Hamming
//! diversity), nucleus sampling, and the mixed scheme that takes the top half
//! of each.
//!
//! Every decoder forces EOS at position `max_len − 1`, so outputs are always
//! well-formed. Returned log-probabilities are under the unmodified policy
//! (temperature 1, no penalties).

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{log_softmax, softmax};
use crate::error::{invalid, Result, RiffError};
use crate::seqpolicy::{PolicyParams, TokenId, TokenSeq, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Number of returned sequences.
    pub m: usize,
    /// Nucleus threshold.
    pub p: f64,
    /// Beam temperature.
    pub temperature: f64,
    pub diversity_penalty: f64,
    pub repetition_penalty: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { m: 8, p: 0.99, temperature: 0.7, diversity_penalty: 3.0, repetition_penalty: 10.0, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(invalid("m", "must be at least 1"));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(invalid("p", format!("must be in (0, 1], got {}", self.p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be positive"));
        }
        if !(self.diversity_penalty >= 0.0) {
            return Err(invalid("diversity_penalty", "must be non-negative"));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(invalid("repetition_penalty", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeScheme {
    Beam,
    TopP,
    Mixed,
}

impl DecodeScheme {
    pub const ALL: [DecodeScheme; 3] = [DecodeScheme::Beam, DecodeScheme::TopP, DecodeScheme::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            DecodeScheme::Beam => "beam",
            DecodeScheme::TopP => "top_p",
            DecodeScheme::Mixed => "mixed",
        }
    }
}

impl fmt::Display for DecodeScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecodeScheme {
    type Err = RiffError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "beam" => Ok(Self::Beam),
            "top_p" | "top-p" | "topp" => Ok(Self::TopP),
            "mixed" => Ok(Self::Mixed),
            other => Err(invalid("decoder", format!("unknown decoder `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Beam,
    Nucleus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub seq: TokenSeq,
    /// `log P(seq | x)` under the policy itself.
    pub logprob: f64,
    /// Decoder score: cumulative penalized beam score, or `logprob` for sampling.
    pub score: f64,
    pub source: Source,
}

/// Tokens of the smallest probability-sorted prefix whose mass reaches `p`.
/// Ties in probability are ordered by ascending id.
pub fn nucleus_set(probs: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut keep = Vec::new();
    for i in order {
        keep.push(i);
        cum += probs[i];
        if cum >= p {
            break;
        }
    }
    keep
}

/// Draw from the renormalized nucleus.
pub fn nucleus_pick<R: Rng>(probs: &[f64], p: f64, rng: &mut R) -> usize {
    let keep = nucleus_set(probs, p);
    let total: f64 = keep.iter().map(|&i| probs[i]).sum();
    let mut u = rng.random::<f64>() * total;
    for &i in &keep {
        u -= probs[i];
        if u < 0.0 {
            return i;
        }
    }
    *keep.last().expect("nucleus is never empty")
}

fn policy_logprob(policy: &PolicyParams, x: &TokenSeq, seq: &TokenSeq) -> Result<f64> {
    Ok(policy.seq_logprob(x, seq)?.value())
}

/// `m` independent nucleus samples (temperature 1).
pub fn top_p_sample(policy: &PolicyParams, x: &TokenSeq, cfg: &DecodeConfig) -> Result<Vec<Decoded>> {
    cfg.validate()?;
    let ctx = policy.encode(x)?;
    let max_len = policy.max_len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        let mut ids = Vec::with_capacity(max_len);
        let mut prev = EOS;
        loop {
            let tok = if ids.len() + 1 == max_len {
                EOS
            } else {
                let probs = softmax(&policy.next_logits(&ctx, prev));
                nucleus_pick(&probs, cfg.p, &mut rng) as TokenId
            };
            ids.push(tok);
            if tok == EOS {
                break;
            }
            prev = tok;
        }
        let seq = TokenSeq::new(ids)?;
        let logprob = policy_logprob(policy, x, &seq)?;
        out.push(Decoded { seq, logprob, score: logprob, source: Source::Nucleus });
    }
    Ok(out)
}

/// Repetition penalty on raw logits: positive logits are divided, negative
/// ones multiplied.
fn penalize_repeats(logits: &mut [f64], prefix: &[TokenId], penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    let seen: HashSet<TokenId> = prefix.iter().copied().collect();
    for id in seen {
        let l = &mut logits[id as usize];
        *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
    }
}

/// Diverse beam search with `m` groups of width one. Groups extend in order
/// at each step; a group's log-probabilities are reduced by
/// `diversity_penalty × (times the token was already picked by an earlier
/// group at this step)`. Output is ranked by cumulative penalized score.
pub fn diverse_beam(policy: &PolicyParams, x: &TokenSeq, cfg: &DecodeConfig) -> Result<Vec<Decoded>> {
    cfg.validate()?;
    let ctx = policy.encode(x)?;
    let max_len = policy.max_len();
    let vocab = policy.vocab();
    let mut prefixes: Vec<Vec<TokenId>> = vec![Vec::with_capacity(max_len); cfg.m];
    let mut scores = vec![0.0; cfg.m];
    let mut done = vec![false; cfg.m];
    for t in 0..max_len {
        let mut picked = vec![0usize; vocab];
        for g in 0..cfg.m {
            if done[g] {
                continue;
            }
            let prev = prefixes[g].last().copied().unwrap_or(EOS);
            let mut logits = policy.next_logits(&ctx, prev);
            penalize_repeats(&mut logits, &prefixes[g], cfg.repetition_penalty);
            let lsm = log_softmax(&logits, cfg.temperature)?;
            let penalized: Vec<f64> =
                lsm.iter().zip(&picked).map(|(l, &c)| l - cfg.diversity_penalty * c as f64).collect();
            let tok = if t + 1 == max_len {
                EOS as usize
            } else {
                let mut best = 0;
                for (i, &s) in penalized.iter().enumerate().skip(1) {
                    if s > penalized[best] {
                        best = i;
                    }
                }
                best
            };
            picked[tok] += 1;
            scores[g] += penalized[tok];
            prefixes[g].push(tok as TokenId);
            if tok as TokenId == EOS {
                done[g] = true;
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    let mut out = Vec::with_capacity(cfg.m);
    for (ids, score) in prefixes.into_iter().zip(scores) {
        let seq = TokenSeq::new(ids)?;
        let logprob = policy_logprob(policy, x, &seq)?;
        out.push(Decoded { seq, logprob, score, source: Source::Beam });
    }
    // stable: equal scores keep group order
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

fn by_logprob(mut items: Vec<Decoded>) -> Vec<Decoded> {
    items.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
    items
}

/// Takes `m/2` distinct picks from a ranked source, skipping sequences already
/// chosen; when the source runs out of fresh sequences the remainder repeats
/// its ranked list from the top.
fn take_half(ranked: &[Decoded], half: usize, chosen: &mut Vec<Decoded>) {
    let start = chosen.len();
    for d in ranked {
        if chosen.len() - start == half {
            return;
        }
        if !chosen.iter().any(|c| c.seq == d.seq) {
            chosen.push(d.clone());
        }
    }
    let mut cycle = ranked.iter().cycle();
    while chosen.len() - start < half {
        match cycle.next() {
            Some(d) => chosen.push(d.clone()),
            None => return,
        }
    }
}

/// Top `m/2` diverse-beam outputs plus top `m/2` nucleus samples, each side
/// ranked by policy log-probability and de-duplicated across halves.
pub fn mixed_decode(policy: &PolicyParams, x: &TokenSeq, cfg: &DecodeConfig) -> Result<Vec<Decoded>> {
    if cfg.m % 2 != 0 {
        return Err(invalid("m", format!("mixed decoding needs an even sample count, got {}", cfg.m)));
    }
    let beams = by_logprob(diverse_beam(policy, x, cfg)?);
    let samples = by_logprob(top_p_sample(policy, x, cfg)?);
    Ok(mix_ranked(&beams, &samples, cfg.m / 2))
}

pub(crate) fn mix_ranked(beams: &[Decoded], samples: &[Decoded], half: usize) -> Vec<Decoded> {
    let mut chosen = Vec::with_capacity(2 * half);
    take_half(beams, half, &mut chosen);
    take_half(samples, half, &mut chosen);
    chosen
}

pub fn decode(policy: &PolicyParams, x: &TokenSeq, scheme: DecodeScheme, cfg: &DecodeConfig) -> Result<Vec<Decoded>> {
    match scheme {
        DecodeScheme::Beam => diverse_beam(policy, x, cfg),
        DecodeScheme::TopP => top_p_sample(policy, x, cfg),
        DecodeScheme::Mixed => mixed_decode(policy, x, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqpolicy::PolicyConfig;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn policy(seed: u64, vocab: usize, max_len: usize) -> PolicyParams {
        PolicyParams::init(PolicyConfig { vocab, embed_dim: 4, hidden: 6, max_len }, seed).unwrap()
    }

    fn x() -> TokenSeq {
        TokenSeq::from_content(&[1, 2]).unwrap()
    }

    fn greedy_cfg(m: usize) -> DecodeConfig {
        DecodeConfig { m, diversity_penalty: 0.0, repetition_penalty: 1.0, temperature: 1.0, ..Default::default() }
    }

    #[test]
    fn nucleus_minimal_set() {
        let probs = [0.1, 0.6, 0.3];
        assert_eq!(nucleus_set(&probs, 0.5), vec![1]);
        assert_eq!(nucleus_set(&probs, 0.6), vec![1]);
        assert_eq!(nucleus_set(&probs, 0.61), vec![1, 2]);
        assert_eq!(nucleus_set(&probs, 1.0), vec![1, 2, 0]);
        assert_eq!(nucleus_set(&[0.5, 0.5], 0.3), vec![0]);
    }

    #[test]
    fn tiny_p_is_greedy() {
        let p = policy(3, 5, 6);
        let cfg = DecodeConfig { p: 1e-9, m: 3, ..Default::default() };
        let samples = top_p_sample(&p, &x(), &cfg).unwrap();
        let greedy = diverse_beam(&p, &x(), &greedy_cfg(1)).unwrap();
        for s in samples {
            assert_eq!(s.seq, greedy[0].seq);
        }
    }

    #[test]
    fn full_nucleus_matches_categorical() {
        // max_len 2: one free step, then forced EOS. Three outcomes.
        let p = policy(21, 3, 2);
        let ctx = p.encode(&x()).unwrap();
        let probs = softmax(&p.next_logits(&ctx, EOS));
        let cfg = DecodeConfig { m: 10_000, p: 1.0, seed: 5, ..Default::default() };
        let draws = top_p_sample(&p, &x(), &cfg).unwrap();
        let mut counts = [0f64; 3];
        for d in &draws {
            counts[d.seq.ids()[0] as usize] += 1.0;
        }
        let n = draws.len() as f64;
        let chi2: f64 = counts.iter().zip(&probs).map(|(o, q)| (o - n * q).powi(2) / (n * q)).sum();
        let p_value = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
        assert!(p_value > 0.01, "chi2 {chi2}, p {p_value}, probs {probs:?}, counts {counts:?}");
    }

    #[test]
    fn decoders_are_deterministic() {
        let p = policy(8, 6, 7);
        let cfg = DecodeConfig { m: 6, seed: 42, ..Default::default() };
        for scheme in DecodeScheme::ALL {
            let a = decode(&p, &x(), scheme, &cfg).unwrap();
            let b = decode(&p, &x(), scheme, &cfg).unwrap();
            assert_eq!(a, b, "{scheme}");
        }
        let c = top_p_sample(&p, &x(), &DecodeConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(c, top_p_sample(&p, &x(), &cfg).unwrap());
    }

    #[test]
    fn outputs_well_formed() {
        let p = policy(9, 5, 4);
        let cfg = DecodeConfig { m: 4, ..Default::default() };
        for scheme in DecodeScheme::ALL {
            for d in decode(&p, &x(), scheme, &cfg).unwrap() {
                assert!(d.seq.len() <= 4);
                assert_eq!(*d.seq.ids().last().unwrap(), EOS);
                assert!((d.logprob - p.seq_logprob(&x(), &d.seq).unwrap().value()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn huge_diversity_penalty_spreads_first_tokens() {
        let p = policy(10, 6, 5);
        let cfg = DecodeConfig { m: 5, diversity_penalty: 1e6, ..Default::default() };
        let out = diverse_beam(&p, &x(), &cfg).unwrap();
        let firsts: HashSet<TokenId> = out.iter().map(|d| d.seq.ids()[0]).collect();
        assert_eq!(firsts.len(), 5);
    }

    #[test]
    fn beam_ranked_by_score() {
        let p = policy(12, 6, 6);
        let out = diverse_beam(&p, &x(), &DecodeConfig::default()).unwrap();
        assert_eq!(out.len(), 8);
        assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn repetition_penalty_convention() {
        let mut logits = vec![2.0, -1.0, 0.5];
        penalize_repeats(&mut logits, &[0, 1, 1], 10.0);
        assert_eq!(logits, vec![0.2, -10.0, 0.5]);
    }

    #[test]
    fn mixed_split_and_dedupe() {
        let p = policy(14, 6, 6);
        let cfg = DecodeConfig { m: 2, ..Default::default() };
        let out = mixed_decode(&p, &x(), &cfg).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].source, Source::Beam);
        assert_eq!(out[1].source, Source::Nucleus);
        assert!(mixed_decode(&p, &x(), &DecodeConfig { m: 3, ..cfg }).is_err());
    }

    #[test]
    fn mixed_beam_half_is_top_beams_by_logprob() {
        let p = policy(15, 6, 6);
        let cfg = DecodeConfig { m: 6, seed: 3, ..Default::default() };
        let out = mixed_decode(&p, &x(), &cfg).unwrap();
        let mut beams = diverse_beam(&p, &x(), &cfg).unwrap();
        beams.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        let mut distinct: Vec<TokenSeq> = Vec::new();
        for b in beams {
            if !distinct.contains(&b.seq) {
                distinct.push(b.seq);
            }
        }
        let beam_half: Vec<TokenSeq> = out.iter().filter(|d| d.source == Source::Beam).map(|d| d.seq.clone()).collect();
        let expect: Vec<TokenSeq> = distinct.into_iter().take(3).collect();
        if expect.len() == 3 {
            assert_eq!(beam_half, expect);
        }
        let mut seen = HashSet::new();
        let unique = out.iter().filter(|d| seen.insert(d.seq.clone())).count();
        assert!(unique >= 3);
    }

    #[test]
    fn mixed_degenerate_pool_backfills() {
        let s = TokenSeq::from_content(&[1]).unwrap();
        let one = |source| Decoded { seq: s.clone(), logprob: -1.0, score: -1.0, source };
        let out = mix_ranked(&[one(Source::Beam)], &[one(Source::Nucleus)], 2);
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|d| d.seq == s));
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig { p: 0.0, ..Default::default() }.validate().is_err());
        assert!(DecodeConfig { repetition_penalty: 0.5, ..Default::default() }.validate().is_err());
        assert!(DecodeConfig { m: 0, ..Default::default() }.validate().is_err());
        assert_eq!("top-p".parse::<DecodeScheme>().unwrap(), DecodeScheme::TopP);
    }
}
