//! End-to-end synthetic setup shared by the CLI, the acceptance suite and the
//! Python bindings: task, few-shot split, MLE-pretrained paraphraser, and a
//! reward classifier warmed up on a disjoint pool.

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, ClassifierParams, TuningMode};
use crate::data::{gen_rewriter_corpus, gen_synthetic_task, Instruction, SyntheticTask, SyntheticVocab, Task};
use crate::error::{invalid, Result};
use crate::optim::AdamW;
use crate::seqpolicy::{pretrain_mle, MleConfig, PolicyConfig, PolicyParams};
use crate::trainer::{fewshot_split, supervised_gradient, FewShotSplit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SetupConfig {
    pub vocab_size: usize,
    pub num_labels: usize,
    /// Examples generated for the few-shot split to draw from.
    pub pool_size: usize,
    /// Held-out examples for final evaluation.
    pub test_size: usize,
    /// Examples per label in each of train and validation.
    pub shots: usize,
    pub policy_embed_dim: usize,
    pub policy_hidden: usize,
    pub policy_max_len: usize,
    pub rewriter_pairs: usize,
    pub mle_epochs: usize,
    pub mle_lr: f64,
    pub classifier_embed_dim: usize,
    /// Soft-prompt rows.
    pub prompt_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Hidden width of the classification head.
    pub cls_hidden: usize,
    /// Size of the disjoint pool the reward classifier is warmed up on.
    pub warmup_examples: usize,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub seed: u64,
}

impl Default for SetupConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            num_labels: 2,
            pool_size: 200,
            test_size: 200,
            shots: 16,
            policy_embed_dim: 8,
            policy_hidden: 16,
            policy_max_len: 18,
            rewriter_pairs: 400,
            mle_epochs: 10,
            mle_lr: 1e-2,
            classifier_embed_dim: 8,
            prompt_len: 5,
            lora_rank: 2,
            lora_alpha: 32.0,
            cls_hidden: 16,
            warmup_examples: 200,
            warmup_steps: 60,
            warmup_lr: 1e-2,
            seed: 0,
        }
    }
}

impl SetupConfig {
    pub fn validate(&self) -> Result<()> {
        SyntheticVocab::new(self.vocab_size, self.num_labels)?;
        if self.shots == 0 || self.pool_size < 2 * self.shots * self.num_labels {
            return Err(invalid("pool_size", "too small for the requested shots"));
        }
        if self.policy_max_len < 17 {
            return Err(invalid("policy_max_len", "synthetic inputs reach 16 tokens plus EOS"));
        }
        if self.rewriter_pairs == 0 || self.warmup_examples == 0 {
            return Err(invalid("rewriter_pairs/warmup_examples", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSetup {
    pub vocab: SyntheticVocab,
    pub task: Task,
    pub data: SyntheticTask,
    pub split: FewShotSplit,
    pub policy: PolicyParams,
    pub classifier: ClassifierParams,
    /// Target NLL before and after each pretraining epoch.
    pub mle_curve: Vec<f64>,
}

fn seed_mix(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

/// Supervised warm-up of the classifier on `examples` (all parameters).
pub fn warmup_classifier(
    classifier: ClassifierParams,
    task: &Task,
    examples: &[crate::data::Example],
    steps: usize,
    lr: f64,
) -> Result<ClassifierParams> {
    let mut clf = classifier.with_mode(TuningMode::AllTune);
    let mut opt = AdamW::new(clf.params.len(), lr, 1e-4);
    let ranges = clf.trainable_ranges();
    let batch = 8.min(examples.len());
    for step in 0..steps {
        let start = (step * batch) % examples.len();
        let mb: Vec<&crate::data::Example> = (0..batch).map(|i| &examples[(start + i) % examples.len()]).collect();
        let (_, mut g) = supervised_gradient(&clf, task, &mb)?;
        g.scale(1.0 / mb.len() as f64);
        opt.step(clf.params.values_mut(), g.values(), &ranges)?;
    }
    Ok(clf)
}

pub fn build_setup(cfg: &SetupConfig) -> Result<SyntheticSetup> {
    cfg.validate()?;
    let data = gen_synthetic_task(cfg.vocab_size, cfg.num_labels, cfg.pool_size, cfg.test_size, seed_mix(cfg.seed, 1))?;
    let vocab = data.vocab;
    let split = fewshot_split(&data.train, cfg.shots, seed_mix(cfg.seed, 2))?;

    let ccfg = ClassifierConfig {
        prompt_len: cfg.prompt_len,
        lora_rank: cfg.lora_rank,
        lora_alpha: cfg.lora_alpha,
        cls_hidden: cfg.cls_hidden,
        ..ClassifierConfig::new(vocab.size, cfg.classifier_embed_dim, cfg.num_labels, vocab.mask())
    };
    ccfg.validate()?;
    let task = Task {
        template: vocab.template(ccfg.max_len, false),
        instruction: Instruction(vec![]),
        verbalizer: vocab.verbalizer(),
    };
    let warm = gen_synthetic_task(cfg.vocab_size, cfg.num_labels, cfg.warmup_examples, 0, seed_mix(cfg.seed, 3))?;
    let classifier = ClassifierParams::init(ccfg, TuningMode::AllTune, seed_mix(cfg.seed, 4))?;
    let classifier = warmup_classifier(classifier, &task, &warm.train, cfg.warmup_steps, cfg.warmup_lr)?;

    let corpus_src = gen_synthetic_task(cfg.vocab_size, cfg.num_labels, cfg.rewriter_pairs, 0, seed_mix(cfg.seed, 5))?;
    let pairs = gen_rewriter_corpus(&vocab, &corpus_src.train, seed_mix(cfg.seed, 6));
    let pcfg = PolicyConfig {
        vocab: vocab.text_vocab(),
        embed_dim: cfg.policy_embed_dim,
        hidden: cfg.policy_hidden,
        max_len: cfg.policy_max_len,
    };
    let policy = PolicyParams::init(pcfg, seed_mix(cfg.seed, 7))?;
    let mle = MleConfig { epochs: cfg.mle_epochs, lr: cfg.mle_lr, batch_size: 8, weight_decay: 1e-4, seed: seed_mix(cfg.seed, 8) };
    let out = pretrain_mle(policy, &pairs, &mle)?;
    Ok(SyntheticSetup { vocab, task, data, split, policy: out.params, classifier, mle_curve: out.epoch_nll })
}
