//! Discrete instruction search: rank replacement tokens for one instruction
//! slot by a first-order estimate of the change in label log-likelihood, then
//! keep whichever of the top candidates (or the incumbent) scores best.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierParams, SEG_EMBED};
use crate::data::{Example, Instruction, Task};
use crate::error::{invalid, Result, RiffError};
use crate::seqpolicy::TokenId;

/// Minibatch size per search step.
pub const GS_BATCH: usize = 2;
/// Candidates re-evaluated per step.
pub const GS_TOP_K: usize = 4;

/// `Σ_i log P(y_i | template(p, x_i))` over the minibatch.
pub fn minibatch_loglik(classifier: &ClassifierParams, task: &Task, batch: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        total += classifier.reward(&task.format(&ex.x)?, ex.y, &task.verbalizer)?;
    }
    Ok(total)
}

/// First-order scores `e_v · ∇_{e_pos} Σ_i log P(y_i | p, x_i)` for every
/// vocabulary token `v`.
pub fn candidate_scores(classifier: &ClassifierParams, task: &Task, position: usize, batch: &[Example]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(RiffError::Empty("search minibatch"));
    }
    if position >= task.instruction.len() {
        return Err(invalid("position", format!("{position} outside instruction of length {}", task.instruction.len())));
    }
    let d = classifier.config.embed_dim;
    // the instruction follows BOS in both template orders
    let row = classifier.prompt_rows() + 1 + position;
    let mut g = vec![0.0; d];
    for ex in batch {
        let (_, _, d_rows) = classifier.logprob_with_full_grad(&task.format(&ex.x)?, ex.y, &task.verbalizer)?;
        g.iter_mut().zip(&d_rows[row]).for_each(|(a, b)| *a += b);
    }
    let embed = classifier.params.segment(SEG_EMBED);
    Ok(embed.chunks_exact(d).map(|e| e.iter().zip(&g).map(|(a, b)| a * b).sum()).collect())
}

/// All token ids ordered by score, highest first, ascending id on ties.
pub fn rank_tokens(scores: &[f64]) -> Vec<TokenId> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.into_iter().map(|i| i as TokenId).collect()
}

/// Top `k` replacement tokens for `position`.
pub fn gs_candidates(
    classifier: &ClassifierParams,
    task: &Task,
    position: usize,
    batch: &[Example],
    k: usize,
) -> Result<Vec<TokenId>> {
    if k == 0 {
        return Err(invalid("k", "must be at least 1"));
    }
    let scores = candidate_scores(classifier, task, position, batch)?;
    Ok(rank_tokens(&scores).into_iter().take(k).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsStep {
    pub position: usize,
    pub candidates: Vec<TokenId>,
    pub incumbent_loglik: f64,
    pub chosen_loglik: f64,
    pub instruction: Instruction,
}

/// One search step at a uniformly random position. Reserved template ids and
/// the incumbent token are skipped when picking the `k` candidates; the
/// incumbent is re-scored alongside them and kept unless a candidate is
/// strictly better on this minibatch.
pub fn gs_step<R: Rng>(
    classifier: &ClassifierParams,
    task: &Task,
    batch: &[Example],
    k: usize,
    rng: &mut R,
) -> Result<GsStep> {
    if k == 0 {
        return Err(invalid("k", "must be at least 1"));
    }
    if task.instruction.is_empty() {
        return Err(RiffError::Empty("instruction"));
    }
    let position = rng.random_range(0..task.instruction.len());
    let incumbent_tok = task.instruction.ids()[position];
    let scores = candidate_scores(classifier, task, position, batch)?;
    let candidates: Vec<TokenId> = rank_tokens(&scores)
        .into_iter()
        .filter(|&t| t != incumbent_tok && !task.template.is_special(t))
        .take(k)
        .collect();
    let incumbent_loglik = minibatch_loglik(classifier, task, batch)?;
    let mut best = (task.instruction.clone(), incumbent_loglik);
    for &tok in &candidates {
        let mut ids = task.instruction.ids().to_vec();
        ids[position] = tok;
        let trial = Instruction(ids);
        let ll = minibatch_loglik(classifier, &task.with_instruction(trial.clone()), batch)?;
        if ll > best.1 {
            best = (trial, ll);
        }
    }
    Ok(GsStep { position, candidates, incumbent_loglik, chosen_loglik: best.1, instruction: best.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsTrace {
    pub steps: Vec<GsStep>,
    pub instruction: Instruction,
}

/// `steps` rounds of [`gs_step`] on minibatches drawn from `train`.
pub fn gs_search(
    classifier: &ClassifierParams,
    task: &Task,
    train: &[Example],
    steps: usize,
    batch_size: usize,
    k: usize,
    seed: u64,
) -> Result<GsTrace> {
    if train.is_empty() {
        return Err(RiffError::Empty("training examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = task.clone();
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<Example> = train.choose_multiple(&mut rng, batch_size.min(train.len())).cloned().collect();
        let step = gs_step(classifier, &current, &batch, k, &mut rng)?;
        current = current.with_instruction(step.instruction.clone());
        trace.push(step);
    }
    Ok(GsTrace { steps: trace, instruction: current.instruction })
}
