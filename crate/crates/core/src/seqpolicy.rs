//! The paraphrase generator: a small conditional autoregressive model with
//! exact sequence log-probabilities and hand-derived gradients.
//!
//! Encoder: the mean of the input token embeddings. Decoder state at step
//! `t` is `tanh(W [context ; emb(prev)] + b)` where `prev` is the previous
//! output token (EOS at step 0), and the next-token logits are
//! `output_headᵀ · state`.

use std::ops::Deref;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffmath::{add_outer, log_softmax, matvec, matvec_t, softmax, GradientAccumulator, LogProb, ParamVector};
use crate::error::{invalid, Result, RiffError};
use crate::optim::AdamW;

pub type TokenId = u32;

/// End-of-sequence id. Shared by every vocabulary in the crate.
pub const EOS: TokenId = 0;

/// A non-empty id sequence with exactly one EOS, in last position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<TokenId>", into = "Vec<TokenId>")]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        match ids.last() {
            None => return Err(RiffError::MalformedSequence("empty sequence".into())),
            Some(&last) if last != EOS => {
                return Err(RiffError::MalformedSequence("sequence does not end with EOS".into()))
            }
            _ => {}
        }
        if ids[..ids.len() - 1].contains(&EOS) {
            return Err(RiffError::MalformedSequence("EOS before the final position".into()));
        }
        Ok(Self(ids))
    }

    /// Append EOS to EOS-free content.
    pub fn from_content(content: &[TokenId]) -> Result<Self> {
        let mut ids = content.to_vec();
        ids.push(EOS);
        Self::new(ids)
    }

    pub fn eos_only() -> Self {
        Self(vec![EOS])
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    /// Ids without the trailing EOS.
    pub fn content(&self) -> &[TokenId] {
        &self.0[..self.0.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn check_max_len(&self, max_len: usize) -> Result<()> {
        if self.0.len() > max_len {
            return Err(RiffError::TooLong { len: self.0.len(), max: max_len });
        }
        Ok(())
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        check_ids(&self.0, vocab)
    }
}

impl TryFrom<Vec<TokenId>> for TokenSeq {
    type Error = RiffError;
    fn try_from(ids: Vec<TokenId>) -> Result<Self> {
        Self::new(ids)
    }
}

impl From<TokenSeq> for Vec<TokenId> {
    fn from(s: TokenSeq) -> Self {
        s.0
    }
}

pub(crate) fn check_ids(ids: &[TokenId], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= vocab) {
        Some(&id) => Err(RiffError::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Output vocabulary size, EOS included.
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Longest paraphrase the decoders emit, EOS included.
    pub max_len: usize,
}

impl PolicyConfig {
    pub fn new(vocab: usize, max_len: usize) -> Self {
        Self { vocab, embed_dim: 8, hidden: 16, max_len }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(invalid("vocab", "need EOS plus at least one content token"));
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(invalid("embed_dim/hidden", "dimensions must be positive"));
        }
        if self.max_len == 0 {
            return Err(invalid("max_len", "must be at least 1"));
        }
        Ok(())
    }

    pub(crate) fn segments(&self) -> [(&'static str, usize); 4] {
        let (v, d, h) = (self.vocab, self.embed_dim, self.hidden);
        [
            (SEG_EMBED, v * d),
            (SEG_REC_W, h * 2 * d),
            (SEG_REC_B, h),
            (SEG_HEAD, h * v),
        ]
    }
}

pub const SEG_EMBED: &str = "token_embedding";
pub const SEG_REC_W: &str = "recurrence_weight";
pub const SEG_REC_B: &str = "recurrence_bias";
pub const SEG_HEAD: &str = "output_head";

/// Trainable paraphraser parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub params: ParamVector,
}

/// Per-step forward values kept for the backward pass.
struct Step {
    input: Vec<f64>,
    state: Vec<f64>,
    logits: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params: ParamVector::zeros(&config.segments()) })
    }

    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim as f64;
        let h = config.hidden as f64;
        let mut fill = |name: &str, std: f64, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, std).expect("positive std");
            p.params.segment_mut(name).iter_mut().for_each(|v| *v = dist.sample(rng));
        };
        fill(SEG_EMBED, 1.0, &mut rng);
        fill(SEG_REC_W, 1.0 / (2.0 * d).sqrt(), &mut rng);
        fill(SEG_REC_B, 0.1, &mut rng);
        fill(SEG_HEAD, 1.0 / h.sqrt(), &mut rng);
        Ok(p)
    }

    pub fn from_parts(config: PolicyConfig, params: ParamVector) -> Result<Self> {
        config.validate()?;
        let expected = ParamVector::zeros(&config.segments());
        if expected.layout() != params.layout() {
            return Err(RiffError::Shape("parameter layout does not match the policy config".into()));
        }
        params.check_finite()?;
        Ok(Self { config, params })
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn embedding(&self, id: TokenId) -> &[f64] {
        let d = self.config.embed_dim;
        let e = self.params.segment(SEG_EMBED);
        &e[id as usize * d..(id as usize + 1) * d]
    }

    /// Mean of the input embeddings.
    pub fn encode(&self, x: &TokenSeq) -> Result<Vec<f64>> {
        x.check_vocab(self.config.vocab)?;
        let d = self.config.embed_dim;
        let mut ctx = vec![0.0; d];
        for &id in x.ids() {
            for (c, e) in ctx.iter_mut().zip(self.embedding(id)) {
                *c += e;
            }
        }
        let n = x.len() as f64;
        ctx.iter_mut().for_each(|c| *c /= n);
        Ok(ctx)
    }

    fn step(&self, context: &[f64], prev: TokenId) -> Step {
        let PolicyConfig { vocab, embed_dim: d, hidden: h, .. } = self.config;
        let mut input = Vec::with_capacity(2 * d);
        input.extend_from_slice(context);
        input.extend_from_slice(self.embedding(prev));
        let mut state = matvec(self.params.segment(SEG_REC_W), h, 2 * d, &input);
        for (s, b) in state.iter_mut().zip(self.params.segment(SEG_REC_B)) {
            *s = (*s + b).tanh();
        }
        let logits = matvec_t(self.params.segment(SEG_HEAD), h, vocab, &state);
        Step { input, state, logits }
    }

    /// Raw next-token logits given an encoded context and the previous token.
    pub fn next_logits(&self, context: &[f64], prev: TokenId) -> Vec<f64> {
        self.step(context, prev).logits
    }

    /// Log-probability of an arbitrary (possibly unterminated) prefix.
    pub fn prefix_logprob(&self, x: &TokenSeq, prefix: &[TokenId]) -> Result<f64> {
        check_ids(prefix, self.config.vocab)?;
        let ctx = self.encode(x)?;
        let mut prev = EOS;
        let mut total = 0.0;
        for &tok in prefix {
            let step = self.step(&ctx, prev);
            total += log_softmax(&step.logits, 1.0)?[tok as usize];
            prev = tok;
        }
        Ok(total)
    }

    /// `log P(z | x)`, the sum of per-step log-softmax terms.
    pub fn seq_logprob(&self, x: &TokenSeq, z: &TokenSeq) -> Result<LogProb> {
        LogProb::new(self.prefix_logprob(x, z.ids())?)
    }

    /// Analytic gradient of [`Self::seq_logprob`] over every segment.
    pub fn seq_logprob_grad(&self, x: &TokenSeq, z: &TokenSeq) -> Result<GradientAccumulator> {
        Ok(self.seq_logprob_with_grad(x, z)?.1)
    }

    pub fn seq_logprob_with_grad(&self, x: &TokenSeq, z: &TokenSeq) -> Result<(LogProb, GradientAccumulator)> {
        z.check_vocab(self.config.vocab)?;
        let PolicyConfig { vocab, embed_dim: d, hidden: h, .. } = self.config;
        let ctx = self.encode(x)?;
        let mut grad = self.params.zeros_like();
        let mut d_ctx = vec![0.0; d];
        let mut d_embed_prev: Vec<(TokenId, Vec<f64>)> = Vec::with_capacity(z.len());
        let mut d_rec_w = vec![0.0; h * 2 * d];
        let mut d_rec_b = vec![0.0; h];
        let mut d_head = vec![0.0; h * vocab];
        let w = self.params.segment(SEG_REC_W);
        let head = self.params.segment(SEG_HEAD);
        let mut total = 0.0;
        let mut prev = EOS;
        for &tok in z.ids() {
            let step = self.step(&ctx, prev);
            let lsm = log_softmax(&step.logits, 1.0)?;
            total += lsm[tok as usize];
            let mut g = softmax(&step.logits);
            g.iter_mut().for_each(|p| *p = -*p);
            g[tok as usize] += 1.0;
            add_outer(&mut d_head, &step.state, &g, 1.0);
            let d_state = matvec(head, h, vocab, &g);
            let d_pre: Vec<f64> = d_state.iter().zip(&step.state).map(|(ds, s)| ds * (1.0 - s * s)).collect();
            add_outer(&mut d_rec_w, &d_pre, &step.input, 1.0);
            d_rec_b.iter_mut().zip(&d_pre).for_each(|(b, v)| *b += v);
            let d_input = matvec_t(w, h, 2 * d, &d_pre);
            d_ctx.iter_mut().zip(&d_input[..d]).for_each(|(c, v)| *c += v);
            d_embed_prev.push((prev, d_input[d..].to_vec()));
            prev = tok;
        }
        {
            let d_embed = grad.segment_mut(SEG_EMBED);
            for (id, dv) in d_embed_prev {
                let row = &mut d_embed[id as usize * d..(id as usize + 1) * d];
                row.iter_mut().zip(&dv).for_each(|(r, v)| *r += v);
            }
            let n = x.len() as f64;
            for &id in x.ids() {
                let row = &mut d_embed[id as usize * d..(id as usize + 1) * d];
                row.iter_mut().zip(&d_ctx).for_each(|(r, v)| *r += v / n);
            }
        }
        grad.segment_mut(SEG_REC_W).copy_from_slice(&d_rec_w);
        grad.segment_mut(SEG_REC_B).copy_from_slice(&d_rec_b);
        grad.segment_mut(SEG_HEAD).copy_from_slice(&d_head);
        Ok((LogProb::new(total)?, grad))
    }

    /// Frozen copy for off-policy sampling and KL anchoring.
    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(Arc::new(self.clone()))
    }
}

/// Immutable, cheaply shareable copy of a policy.
#[derive(Debug, Clone)]
pub struct PolicySnapshot(Arc<PolicyParams>);

impl Deref for PolicySnapshot {
    type Target = PolicyParams;
    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-2, batch_size: 8, weight_decay: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct MleOutcome {
    pub params: PolicyParams,
    /// Mean target negative log-likelihood before training and after each epoch.
    pub epoch_nll: Vec<f64>,
}

pub fn mean_nll(params: &PolicyParams, pairs: &[(TokenSeq, TokenSeq)]) -> Result<f64> {
    let mut total = 0.0;
    for (x, z) in pairs {
        total -= params.seq_logprob(x, z)?.value();
    }
    Ok(total / pairs.len() as f64)
}

/// Maximum-likelihood pretraining on `(input, target paraphrase)` pairs.
pub fn pretrain_mle(mut params: PolicyParams, pairs: &[(TokenSeq, TokenSeq)], cfg: &MleConfig) -> Result<MleOutcome> {
    if pairs.is_empty() {
        return Err(RiffError::Empty("pretraining pairs"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch_size", "must be positive"));
    }
    for (_, z) in pairs {
        z.check_max_len(params.max_len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(params.params.len(), cfg.lr, cfg.weight_decay);
    let all = [0..params.params.len()];
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_nll = vec![mean_nll(&params, pairs)?];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = params.params.zeros_like();
            for &i in chunk {
                let (x, z) = &pairs[i];
                let g = params.seq_logprob_grad(x, z)?;
                grad.add_scaled(&g, -1.0 / chunk.len() as f64)?;
            }
            opt.step(params.params.values_mut(), grad.values(), &all)?;
        }
        epoch_nll.push(mean_nll(&params, pairs)?);
    }
    Ok(MleOutcome { params, epoch_nll })
}
