//! The downstream classifier: a one-layer, single-head self-attention
//! mask-prediction model scored over verbalizer tokens, with the seven
//! tuning modes and the paraphrase reward `R(z) = log P(y | z)`.
//!
//! There are no positional encodings. The residual stream is
//! `out_i = h_i + W_o Σ_j softmax_j(q_i·k_j / √d) v_j`; label scores come from
//! the MASK row through `lm_head` (restricted to verbalizer ids), or, in
//! ClsTune mode, from a gelu MLP over the mean of all output rows.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffmath::{
    add_outer, dot, gelu, gelu_grad, log_softmax, matvec, matvec_t, softmax, GradientAccumulator, ParamVector,
};
use crate::error::{invalid, Result, RiffError};
use crate::seqpolicy::{check_ids, TokenId, TokenSeq};

pub const SEG_EMBED: &str = "token_embedding";
pub const SEG_PROMPT: &str = "prompt_table";
pub const SEG_WQ: &str = "attn_q";
pub const SEG_WK: &str = "attn_k";
pub const SEG_WV: &str = "attn_v";
pub const SEG_WO: &str = "attn_o";
pub const SEG_LM_HEAD: &str = "lm_head";
pub const SEG_LORA_AQ: &str = "lora_a_q";
pub const SEG_LORA_BQ: &str = "lora_b_q";
pub const SEG_LORA_AV: &str = "lora_a_v";
pub const SEG_LORA_BV: &str = "lora_b_v";
pub const SEG_CLS_W1: &str = "cls_w1";
pub const SEG_CLS_B1: &str = "cls_b1";
pub const SEG_CLS_W2: &str = "cls_w2";
pub const SEG_CLS_B2: &str = "cls_b2";

/// Which parameter subset trains. `Gs` trains nothing (instruction search only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningMode {
    AllTune,
    HTune,
    InTune,
    ClsTune,
    SpTune,
    LoRA,
    Gs,
}

impl TuningMode {
    pub const ALL: [TuningMode; 7] = [
        TuningMode::AllTune,
        TuningMode::HTune,
        TuningMode::InTune,
        TuningMode::ClsTune,
        TuningMode::SpTune,
        TuningMode::LoRA,
        TuningMode::Gs,
    ];

    pub fn trainable_segments(self) -> &'static [&'static str] {
        match self {
            TuningMode::AllTune => &[SEG_EMBED, SEG_WQ, SEG_WK, SEG_WV, SEG_WO, SEG_LM_HEAD],
            TuningMode::HTune => &[SEG_LM_HEAD],
            TuningMode::InTune => &[SEG_EMBED],
            TuningMode::ClsTune => &[SEG_CLS_W1, SEG_CLS_B1, SEG_CLS_W2, SEG_CLS_B2],
            TuningMode::SpTune => &[SEG_PROMPT],
            TuningMode::LoRA => &[SEG_LORA_AQ, SEG_LORA_BQ, SEG_LORA_AV, SEG_LORA_BV],
            TuningMode::Gs => &[],
        }
    }

    pub fn code(self) -> u8 {
        match self {
            TuningMode::AllTune => 0,
            TuningMode::HTune => 1,
            TuningMode::InTune => 2,
            TuningMode::ClsTune => 3,
            TuningMode::SpTune => 4,
            TuningMode::LoRA => 5,
            TuningMode::Gs => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            TuningMode::AllTune => "alltune",
            TuningMode::HTune => "htune",
            TuningMode::InTune => "intune",
            TuningMode::ClsTune => "clstune",
            TuningMode::SpTune => "sptune",
            TuningMode::LoRA => "lora",
            TuningMode::Gs => "gs",
        }
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TuningMode {
    type Err = RiffError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid("mode", format!("unknown tuning mode `{s}`")))
    }
}

/// Label index → vocabulary id, injective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer(Vec<TokenId>);

impl Verbalizer {
    pub fn new(ids: Vec<TokenId>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(RiffError::Empty("verbalizer"));
        }
        check_ids(&ids, vocab)?;
        for (i, a) in ids.iter().enumerate() {
            if ids[i + 1..].contains(a) {
                return Err(invalid("verbalizer", format!("token {a} maps to more than one label")));
            }
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn num_labels(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub num_labels: usize,
    pub mask_id: TokenId,
    pub max_len: usize,
    pub prompt_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub cls_hidden: usize,
}

impl ClassifierConfig {
    pub fn new(vocab: usize, embed_dim: usize, num_labels: usize, mask_id: TokenId) -> Self {
        Self {
            vocab,
            embed_dim,
            num_labels,
            mask_id,
            max_len: 128,
            prompt_len: 5,
            lora_rank: 2,
            lora_alpha: 32.0,
            cls_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.embed_dim == 0 {
            return Err(invalid("vocab/embed_dim", "must be positive"));
        }
        if self.num_labels < 2 {
            return Err(invalid("num_labels", "need at least two labels"));
        }
        if self.mask_id as usize >= self.vocab {
            return Err(RiffError::TokenOutOfRange { id: self.mask_id, vocab: self.vocab });
        }
        if self.lora_rank == 0 || self.lora_rank > self.embed_dim {
            return Err(invalid("lora_rank", format!("must be in 1..={}", self.embed_dim)));
        }
        if self.cls_hidden == 0 {
            return Err(invalid("cls_hidden", "must be positive"));
        }
        Ok(())
    }

    pub(crate) fn segments(&self) -> Vec<(&'static str, usize)> {
        let (v, d, l, r, dh, c) =
            (self.vocab, self.embed_dim, self.prompt_len, self.lora_rank, self.cls_hidden, self.num_labels);
        vec![
            (SEG_EMBED, v * d),
            (SEG_PROMPT, l * d),
            (SEG_WQ, d * d),
            (SEG_WK, d * d),
            (SEG_WV, d * d),
            (SEG_WO, d * d),
            (SEG_LM_HEAD, d * v),
            (SEG_LORA_AQ, r * d),
            (SEG_LORA_BQ, d * r),
            (SEG_LORA_AV, r * d),
            (SEG_LORA_BV, d * r),
            (SEG_CLS_W1, dh * d),
            (SEG_CLS_B1, dh),
            (SEG_CLS_W2, c * dh),
            (SEG_CLS_B2, c),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub config: ClassifierConfig,
    pub mode: TuningMode,
    pub params: ParamVector,
}

/// `(W + (α/r) B A) v` for `W: d×d`, `A: r×d`, `B: d×r`.
pub fn lora_apply(w: &[f64], a: &[f64], b: &[f64], alpha: f64, rank: usize, v: &[f64]) -> Result<Vec<f64>> {
    let d = v.len();
    if w.len() != d * d {
        return Err(RiffError::Shape(format!("W has {} entries, expected {}", w.len(), d * d)));
    }
    if rank == 0 || a.len() != rank * d || b.len() != d * rank {
        return Err(RiffError::Shape(format!(
            "rank {rank} inconsistent with A ({}) and B ({}) for d = {d}",
            a.len(),
            b.len()
        )));
    }
    Ok(matvec(&lora_effective(w, a, b, alpha, rank, d), d, d, v))
}

fn lora_effective(w: &[f64], a: &[f64], b: &[f64], alpha: f64, rank: usize, d: usize) -> Vec<f64> {
    let scale = alpha / rank as f64;
    let mut eff = w.to_vec();
    for i in 0..d {
        for j in 0..d {
            let mut ba = 0.0;
            for c in 0..rank {
                ba += b[i * rank + c] * a[c * d + j];
            }
            eff[i * d + j] += scale * ba;
        }
    }
    eff
}

/// Cached forward pass.
struct Forward {
    /// Input rows: soft prompts (SpTune only) followed by token embeddings.
    rows: Vec<Vec<f64>>,
    tokens: Vec<TokenId>,
    n_prompt: usize,
    wq: Vec<f64>,
    wv: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    /// Rows for which the query side was evaluated.
    queries: Vec<usize>,
    q: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
    ctx: Vec<Vec<f64>>,
    out: Vec<Vec<f64>>,
}

/// Head-side cache for ClsTune.
struct ClsCache {
    pooled: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl ClassifierParams {
    pub fn zeros(config: ClassifierConfig, mode: TuningMode) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, mode, params: ParamVector::zeros(&config.segments()) })
    }

    pub fn init(config: ClassifierConfig, mode: TuningMode, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config, mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim as f64;
        let inv_sqrt_d = 1.0 / d.sqrt();
        let specs: [(&str, f64); 10] = [
            (SEG_EMBED, 1.0),
            (SEG_PROMPT, 1.0),
            (SEG_WQ, inv_sqrt_d),
            (SEG_WK, inv_sqrt_d),
            (SEG_WV, inv_sqrt_d),
            (SEG_WO, inv_sqrt_d),
            (SEG_LM_HEAD, inv_sqrt_d),
            (SEG_LORA_AQ, 0.02),
            (SEG_LORA_AV, 0.02),
            (SEG_CLS_W1, inv_sqrt_d),
        ];
        for (name, std) in specs {
            let dist = Normal::new(0.0, std).expect("positive std");
            p.params.segment_mut(name).iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
        let w2 = Normal::new(0.0, 1.0 / (config.cls_hidden as f64).sqrt()).expect("positive std");
        p.params.segment_mut(SEG_CLS_W2).iter_mut().for_each(|v| *v = w2.sample(&mut rng));
        Ok(p)
    }

    pub fn from_parts(config: ClassifierConfig, mode: TuningMode, params: ParamVector) -> Result<Self> {
        config.validate()?;
        if ParamVector::zeros(&config.segments()).layout() != params.layout() {
            return Err(RiffError::Shape("parameter layout does not match the classifier config".into()));
        }
        params.check_finite()?;
        Ok(Self { config, mode, params })
    }

    pub fn with_mode(mut self, mode: TuningMode) -> Self {
        self.mode = mode;
        self
    }

    /// Index ranges of the mode's trainable segments.
    pub fn trainable_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.mode
            .trainable_segments()
            .iter()
            .map(|name| {
                let s = self.params.segment_info(name).expect("known segment");
                s.offset..s.offset + s.len
            })
            .filter(|r| !r.is_empty())
            .collect()
    }

    /// Soft-prompt rows prepended to every input (non-zero only under SpTune).
    pub fn prompt_rows(&self) -> usize {
        if self.mode == TuningMode::SpTune {
            self.config.prompt_len
        } else {
            0
        }
    }

    fn check_input(&self, input: &TokenSeq) -> Result<usize> {
        input.check_vocab(self.config.vocab)?;
        let n_prompt = self.prompt_rows();
        if input.len() > self.config.max_len {
            return Err(RiffError::TooLong { len: input.len(), max: self.config.max_len });
        }
        let masks: Vec<usize> =
            input.ids().iter().enumerate().filter(|(_, &t)| t == self.config.mask_id).map(|(i, _)| i).collect();
        if masks.len() != 1 {
            return Err(RiffError::MaskCount(masks.len()));
        }
        Ok(n_prompt + masks[0])
    }

    fn check_verbalizer(&self, verbalizer: &Verbalizer) -> Result<()> {
        if verbalizer.num_labels() != self.config.num_labels {
            return Err(invalid(
                "verbalizer",
                format!("{} labels, classifier has {}", verbalizer.num_labels(), self.config.num_labels),
            ));
        }
        check_ids(verbalizer.ids(), self.config.vocab)
    }

    fn forward(&self, input: &TokenSeq) -> Result<Forward> {
        let mask_row = self.check_input(input)?;
        let d = self.config.embed_dim;
        let n_prompt = self.prompt_rows();
        let embed = self.params.segment(SEG_EMBED);
        let prompts = self.params.segment(SEG_PROMPT);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_prompt + input.len());
        for l in 0..n_prompt {
            rows.push(prompts[l * d..(l + 1) * d].to_vec());
        }
        for &t in input.ids() {
            rows.push(embed[t as usize * d..(t as usize + 1) * d].to_vec());
        }
        let (wq, wv) = if self.mode == TuningMode::LoRA {
            let (r, alpha) = (self.config.lora_rank, self.config.lora_alpha);
            (
                lora_effective(
                    self.params.segment(SEG_WQ),
                    self.params.segment(SEG_LORA_AQ),
                    self.params.segment(SEG_LORA_BQ),
                    alpha,
                    r,
                    d,
                ),
                lora_effective(
                    self.params.segment(SEG_WV),
                    self.params.segment(SEG_LORA_AV),
                    self.params.segment(SEG_LORA_BV),
                    alpha,
                    r,
                    d,
                ),
            )
        } else {
            (self.params.segment(SEG_WQ).to_vec(), self.params.segment(SEG_WV).to_vec())
        };
        let wk = self.params.segment(SEG_WK);
        let wo = self.params.segment(SEG_WO);
        let keys: Vec<Vec<f64>> = rows.iter().map(|h| matvec(wk, d, d, h)).collect();
        let values: Vec<Vec<f64>> = rows.iter().map(|h| matvec(&wv, d, d, h)).collect();
        let queries: Vec<usize> =
            if self.mode == TuningMode::ClsTune { (0..rows.len()).collect() } else { vec![mask_row] };
        let scale = 1.0 / (d as f64).sqrt();
        let mut q = Vec::with_capacity(queries.len());
        let mut attn = Vec::with_capacity(queries.len());
        let mut ctx = Vec::with_capacity(queries.len());
        let mut out = Vec::with_capacity(queries.len());
        for &i in &queries {
            let qi = matvec(&wq, d, d, &rows[i]);
            let scores: Vec<f64> = keys.iter().map(|k| dot(&qi, k) * scale).collect();
            let a = softmax(&scores);
            let mut c = vec![0.0; d];
            for (aj, vj) in a.iter().zip(&values) {
                c.iter_mut().zip(vj).for_each(|(ci, v)| *ci += aj * v);
            }
            let mut o = matvec(wo, d, d, &c);
            o.iter_mut().zip(&rows[i]).for_each(|(oi, hi)| *oi += hi);
            q.push(qi);
            attn.push(a);
            ctx.push(c);
            out.push(o);
        }
        Ok(Forward {
            rows,
            tokens: input.ids().to_vec(),
            n_prompt,
            wq,
            wv,
            keys,
            values,
            queries,
            q,
            attn,
            ctx,
            out,
        })
    }

    fn cls_head(&self, fwd: &Forward) -> (ClsCache, Vec<f64>) {
        let d = self.config.embed_dim;
        let dh = self.config.cls_hidden;
        let c = self.config.num_labels;
        let n = fwd.out.len() as f64;
        let mut pooled = vec![0.0; d];
        for o in &fwd.out {
            pooled.iter_mut().zip(o).for_each(|(p, v)| *p += v);
        }
        pooled.iter_mut().for_each(|p| *p /= n);
        let mut pre = matvec(self.params.segment(SEG_CLS_W1), dh, d, &pooled);
        pre.iter_mut().zip(self.params.segment(SEG_CLS_B1)).for_each(|(u, b)| *u += b);
        let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
        let mut scores = matvec(self.params.segment(SEG_CLS_W2), c, dh, &act);
        scores.iter_mut().zip(self.params.segment(SEG_CLS_B2)).for_each(|(s, b)| *s += b);
        (ClsCache { pooled, pre, act }, scores)
    }

    fn label_scores(&self, fwd: &Forward, verbalizer: &Verbalizer) -> Vec<f64> {
        if self.mode == TuningMode::ClsTune {
            return self.cls_head(fwd).1;
        }
        let d = self.config.embed_dim;
        let v = self.config.vocab;
        let head = self.params.segment(SEG_LM_HEAD);
        let out = &fwd.out[0];
        verbalizer.ids().iter().map(|&id| (0..d).map(|k| out[k] * head[k * v + id as usize]).sum()).collect()
    }

    /// Per-label log-probabilities for a formatted input.
    pub fn label_logprobs(&self, input: &TokenSeq, verbalizer: &Verbalizer) -> Result<Vec<f64>> {
        self.check_verbalizer(verbalizer)?;
        let fwd = self.forward(input)?;
        log_softmax(&self.label_scores(&fwd, verbalizer), 1.0)
    }

    /// ClsTune scoring path: mean-pooled outputs → affine → gelu → affine →
    /// log-softmax over labels. Independent of the current mode.
    pub fn cls_forward(&self, input: &TokenSeq) -> Result<Vec<f64>> {
        let as_cls = ClassifierParams { config: self.config, mode: TuningMode::ClsTune, params: self.params.clone() };
        let fwd = as_cls.forward(input)?;
        log_softmax(&as_cls.cls_head(&fwd).1, 1.0)
    }

    /// Mean of the final hidden rows (the ClsTune feature vector).
    pub fn pooled_features(&self, input: &TokenSeq) -> Result<Vec<f64>> {
        let as_cls = ClassifierParams { config: self.config, mode: TuningMode::ClsTune, params: self.params.clone() };
        let fwd = as_cls.forward(input)?;
        Ok(as_cls.cls_head(&fwd).0.pooled)
    }

    /// `R(z) = log P(y | z)` on an already formatted paraphrase.
    pub fn reward(&self, formatted: &TokenSeq, label: usize, verbalizer: &Verbalizer) -> Result<f64> {
        let lp = self.label_logprobs(formatted, verbalizer)?;
        lp.get(label).copied().ok_or_else(|| invalid("label", format!("{label} out of range")))
    }

    /// `log P(y | input)` and its unmasked gradient, plus the gradient with
    /// respect to each input row (soft prompts first).
    pub fn logprob_with_full_grad(
        &self,
        input: &TokenSeq,
        label: usize,
        verbalizer: &Verbalizer,
    ) -> Result<(f64, GradientAccumulator, Vec<Vec<f64>>)> {
        self.check_verbalizer(verbalizer)?;
        if label >= self.config.num_labels {
            return Err(invalid("label", format!("{label} out of range")));
        }
        let fwd = self.forward(input)?;
        let d = self.config.embed_dim;
        let v = self.config.vocab;
        let mut grad = self.params.zeros_like();
        let mut d_out: Vec<Vec<f64>> = vec![vec![0.0; d]; fwd.queries.len()];

        let logp = if self.mode == TuningMode::ClsTune {
            let dh = self.config.cls_hidden;
            let c = self.config.num_labels;
            let (cache, scores) = self.cls_head(&fwd);
            let lsm = log_softmax(&scores, 1.0)?;
            let mut g = softmax(&scores);
            g.iter_mut().for_each(|p| *p = -*p);
            g[label] += 1.0;
            add_outer(grad.segment_mut(SEG_CLS_W2), &g, &cache.act, 1.0);
            grad.segment_mut(SEG_CLS_B2).copy_from_slice(&g);
            let d_act = matvec_t(self.params.segment(SEG_CLS_W2), c, dh, &g);
            let d_pre: Vec<f64> = d_act.iter().zip(&cache.pre).map(|(a, &u)| a * gelu_grad(u)).collect();
            add_outer(grad.segment_mut(SEG_CLS_W1), &d_pre, &cache.pooled, 1.0);
            grad.segment_mut(SEG_CLS_B1).copy_from_slice(&d_pre);
            let d_pooled = matvec_t(self.params.segment(SEG_CLS_W1), dh, d, &d_pre);
            let n = fwd.out.len() as f64;
            for row in d_out.iter_mut() {
                row.iter_mut().zip(&d_pooled).for_each(|(r, p)| *r = p / n);
            }
            lsm[label]
        } else {
            let scores = self.label_scores(&fwd, verbalizer);
            let lsm = log_softmax(&scores, 1.0)?;
            let mut g = softmax(&scores);
            g.iter_mut().for_each(|p| *p = -*p);
            g[label] += 1.0;
            let head = self.params.segment(SEG_LM_HEAD).to_vec();
            let out = &fwd.out[0];
            let d_head = grad.segment_mut(SEG_LM_HEAD);
            for (c, &id) in verbalizer.ids().iter().enumerate() {
                for k in 0..d {
                    d_head[k * v + id as usize] += out[k] * g[c];
                    d_out[0][k] += head[k * v + id as usize] * g[c];
                }
            }
            lsm[label]
        };

        let d_rows = self.backward_attention(&fwd, &d_out, &mut grad);
        Ok((logp, grad, d_rows))
    }

    fn backward_attention(&self, fwd: &Forward, d_out: &[Vec<f64>], grad: &mut GradientAccumulator) -> Vec<Vec<f64>> {
        let d = self.config.embed_dim;
        let n = fwd.rows.len();
        let scale = 1.0 / (d as f64).sqrt();
        let wk = self.params.segment(SEG_WK);
        let wo = self.params.segment(SEG_WO);
        let mut d_rows: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        let mut d_keys: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        let mut d_values: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        let mut d_wq = vec![0.0; d * d];
        let mut d_wv = vec![0.0; d * d];
        let mut d_wk = vec![0.0; d * d];
        let mut d_wo = vec![0.0; d * d];

        for (qi, &i) in fwd.queries.iter().enumerate() {
            let dout = &d_out[qi];
            d_rows[i].iter_mut().zip(dout).for_each(|(r, g)| *r += g);
            add_outer(&mut d_wo, dout, &fwd.ctx[qi], 1.0);
            let d_ctx = matvec_t(wo, d, d, dout);
            let a = &fwd.attn[qi];
            let d_a: Vec<f64> = fwd.values.iter().map(|vj| dot(&d_ctx, vj)).collect();
            for (j, aj) in a.iter().enumerate() {
                d_values[j].iter_mut().zip(&d_ctx).for_each(|(dv, c)| *dv += aj * c);
            }
            let mean: f64 = a.iter().zip(&d_a).map(|(x, y)| x * y).sum();
            let mut d_q = vec![0.0; d];
            for j in 0..n {
                let ds = a[j] * (d_a[j] - mean) * scale;
                if ds == 0.0 {
                    continue;
                }
                d_q.iter_mut().zip(&fwd.keys[j]).for_each(|(g, k)| *g += ds * k);
                d_keys[j].iter_mut().zip(&fwd.q[qi]).for_each(|(g, q)| *g += ds * q);
            }
            add_outer(&mut d_wq, &d_q, &fwd.rows[i], 1.0);
            let back = matvec_t(&fwd.wq, d, d, &d_q);
            d_rows[i].iter_mut().zip(&back).for_each(|(r, g)| *r += g);
        }
        for j in 0..n {
            add_outer(&mut d_wk, &d_keys[j], &fwd.rows[j], 1.0);
            add_outer(&mut d_wv, &d_values[j], &fwd.rows[j], 1.0);
            let bk = matvec_t(wk, d, d, &d_keys[j]);
            let bv = matvec_t(&fwd.wv, d, d, &d_values[j]);
            d_rows[j].iter_mut().zip(bk.iter().zip(&bv)).for_each(|(r, (a, b))| *r += a + b);
        }

        if self.mode == TuningMode::LoRA {
            let r = self.config.lora_rank;
            let s = self.config.lora_alpha / r as f64;
            for (dw, a_name, b_name) in [(&d_wq, SEG_LORA_AQ, SEG_LORA_BQ), (&d_wv, SEG_LORA_AV, SEG_LORA_BV)] {
                let a = self.params.segment(a_name).to_vec();
                let b = self.params.segment(b_name).to_vec();
                // dB = s · dW Aᵀ (d×r), dA = s · Bᵀ dW (r×d)
                let gb = grad.segment_mut(b_name);
                for i in 0..d {
                    for c in 0..r {
                        gb[i * r + c] += s * (0..d).map(|j| dw[i * d + j] * a[c * d + j]).sum::<f64>();
                    }
                }
                let ga = grad.segment_mut(a_name);
                for c in 0..r {
                    for j in 0..d {
                        ga[c * d + j] += s * (0..d).map(|i| b[i * r + c] * dw[i * d + j]).sum::<f64>();
                    }
                }
            }
        }
        grad.segment_mut(SEG_WQ).copy_from_slice(&d_wq);
        grad.segment_mut(SEG_WK).copy_from_slice(&d_wk);
        grad.segment_mut(SEG_WV).copy_from_slice(&d_wv);
        grad.segment_mut(SEG_WO).copy_from_slice(&d_wo);

        {
            let d_prompt = grad.segment_mut(SEG_PROMPT);
            for l in 0..fwd.n_prompt {
                d_prompt[l * d..(l + 1) * d].iter_mut().zip(&d_rows[l]).for_each(|(g, r)| *g += r);
            }
        }
        let d_embed = grad.segment_mut(SEG_EMBED);
        for (pos, &t) in fwd.tokens.iter().enumerate() {
            let row = &d_rows[fwd.n_prompt + pos];
            d_embed[t as usize * d..(t as usize + 1) * d].iter_mut().zip(row).for_each(|(g, r)| *g += r);
        }
        d_rows
    }

    /// Gradient of `log P(y | input)` restricted to the mode's trainable
    /// segments; every other entry is exactly zero.
    pub fn classifier_grad(&self, input: &TokenSeq, label: usize, verbalizer: &Verbalizer) -> Result<GradientAccumulator> {
        let (_, full, _) = self.logprob_with_full_grad(input, label, verbalizer)?;
        Ok(self.mask_gradient(full))
    }

    pub fn mask_gradient(&self, mut grad: GradientAccumulator) -> GradientAccumulator {
        let keep = self.mode.trainable_segments();
        let layout = grad.layout().to_vec();
        let values = grad.values_mut();
        for seg in layout.iter().filter(|s| !keep.contains(&s.name.as_str())) {
            values[seg.offset..seg.offset + seg.len].iter_mut().for_each(|v| *v = 0.0);
        }
        grad
    }

    /// Predicted label (argmax, lowest index on ties).
    pub fn predict(&self, input: &TokenSeq, verbalizer: &Verbalizer) -> Result<usize> {
        Ok(argmax(&self.label_logprobs(input, verbalizer)?))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
