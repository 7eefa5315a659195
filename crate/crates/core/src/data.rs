//! Examples, task templates, the synthetic sentiment-style task and its
//! rule-based rewriter corpus, plus JSONL ingestion for user-supplied data.

use std::io::BufRead;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierParams, Verbalizer};
use crate::error::{invalid, Result, RiffError};
use crate::seqpolicy::{TokenId, TokenSeq, EOS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub x: TokenSeq,
    pub y: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Ordered token ids that precede the input text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Instruction(pub Vec<TokenId>);

impl Instruction {
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Input scaffold around the instruction and text.
///
/// Default order: `BOS instruction text SEP MASK EOS` (the
/// "{instruction} {text} . It was <mask> ." layout, with SEP standing for the
/// fixed "It was" bridge). `mask_first` gives `BOS instruction MASK SEP text EOS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub bos: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
    pub mask_first: bool,
    pub max_len: usize,
}

impl TaskTemplate {
    pub fn special_ids(&self) -> [TokenId; 4] {
        [EOS, self.bos, self.sep, self.mask]
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special_ids().contains(&id)
    }
}

/// On-disk template description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateFile {
    pub instruction: Vec<TokenId>,
    #[serde(default)]
    pub mask_first: bool,
}

impl TemplateFile {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn format_input(template: &TaskTemplate, instruction: &Instruction, x: &TokenSeq) -> Result<TokenSeq> {
    if let Some(&bad) = instruction.ids().iter().find(|&&t| template.is_special(t)) {
        return Err(invalid("instruction", format!("contains reserved token {bad}")));
    }
    let content = x.content();
    let mut ids = Vec::with_capacity(instruction.len() + content.len() + 4);
    ids.push(template.bos);
    ids.extend_from_slice(instruction.ids());
    if template.mask_first {
        ids.extend_from_slice(&[template.mask, template.sep]);
        ids.extend_from_slice(content);
    } else {
        ids.extend_from_slice(content);
        ids.extend_from_slice(&[template.sep, template.mask]);
    }
    ids.push(EOS);
    if ids.len() > template.max_len {
        return Err(RiffError::TooLong { len: ids.len(), max: template.max_len });
    }
    TokenSeq::new(ids)
}

/// Everything needed to score a text with the downstream classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub template: TaskTemplate,
    pub instruction: Instruction,
    pub verbalizer: Verbalizer,
}

impl Task {
    pub fn format(&self, x: &TokenSeq) -> Result<TokenSeq> {
        format_input(&self.template, &self.instruction, x)
    }

    pub fn with_instruction(&self, instruction: Instruction) -> Self {
        Self { instruction, ..self.clone() }
    }

    pub fn label_logprobs(&self, classifier: &ClassifierParams, x: &TokenSeq) -> Result<Vec<f64>> {
        classifier.label_logprobs(&self.format(x)?, &self.verbalizer)
    }

    /// Paraphrase reward `log P(y | template(z))`.
    pub fn reward(&self, classifier: &ClassifierParams, z: &TokenSeq, y: usize) -> Result<f64> {
        classifier.reward(&self.format(z)?, y, &self.verbalizer)
    }
}

/// Vocabulary layout of the synthetic task:
/// `0` EOS, then `C` families of two synonyms, then distractors, then BOS, MASK, SEP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticVocab {
    pub size: usize,
    pub num_labels: usize,
}

impl SyntheticVocab {
    pub fn new(size: usize, num_labels: usize) -> Result<Self> {
        if num_labels < 2 {
            return Err(invalid("C", "need at least two labels"));
        }
        if size < 2 * num_labels + 4 {
            return Err(invalid("V", format!("need V >= 2C + 4 = {}, got {size}", 2 * num_labels + 4)));
        }
        Ok(Self { size, num_labels })
    }

    pub fn family_token(&self, family: usize, synonym: usize) -> TokenId {
        (1 + 2 * family + synonym) as TokenId
    }

    /// Family of a token, if it belongs to one.
    pub fn family_of(&self, id: TokenId) -> Option<usize> {
        let id = id as usize;
        (id >= 1 && id <= 2 * self.num_labels).then(|| (id - 1) / 2)
    }

    pub fn synonym_of(&self, id: TokenId) -> Option<TokenId> {
        self.family_of(id).map(|_| if (id - 1) % 2 == 0 { id + 1 } else { id - 1 })
    }

    pub fn distractors(&self) -> std::ops::Range<TokenId> {
        (1 + 2 * self.num_labels) as TokenId..(self.size - 3) as TokenId
    }

    pub fn bos(&self) -> TokenId {
        (self.size - 3) as TokenId
    }

    pub fn mask(&self) -> TokenId {
        (self.size - 2) as TokenId
    }

    pub fn sep(&self) -> TokenId {
        (self.size - 1) as TokenId
    }

    /// Ids a paraphraser may emit: EOS, family tokens and distractors.
    pub fn text_vocab(&self) -> usize {
        self.size - 3
    }

    pub fn verbalizer(&self) -> Verbalizer {
        Verbalizer::new((0..self.num_labels).map(|c| self.family_token(c, 0)).collect(), self.size)
            .expect("family tokens are distinct and in range")
    }

    pub fn template(&self, max_len: usize, mask_first: bool) -> TaskTemplate {
        TaskTemplate { bos: self.bos(), sep: self.sep(), mask: self.mask(), mask_first, max_len }
    }
}

/// The generative labelling rule: the family with the most tokens wins,
/// lowest family on ties.
pub fn majority_label(vocab: &SyntheticVocab, x: &TokenSeq) -> usize {
    let mut counts = vec![0usize; vocab.num_labels];
    for &t in x.content() {
        if let Some(f) = vocab.family_of(t) {
            counts[f] += 1;
        }
    }
    let mut best = 0;
    for (f, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = f;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub vocab: SyntheticVocab,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

fn synth_example(vocab: &SyntheticVocab, label: usize, rng: &mut ChaCha8Rng) -> Example {
    let len = rng.random_range(8..=16usize);
    let dom = rng.random_range(3..=len / 2 + 1);
    let mut counts = vec![0usize; vocab.num_labels];
    counts[label] = dom;
    let mut used = dom;
    for f in (0..vocab.num_labels).filter(|&f| f != label) {
        let cap = (dom - 1).min(len - used);
        let c = rng.random_range(0..=cap);
        counts[f] = c;
        used += c;
    }
    let distractors: Vec<TokenId> = vocab.distractors().collect();
    let mut ids = Vec::with_capacity(len);
    if distractors.is_empty() {
        counts[label] += len - used;
    } else {
        for _ in used..len {
            ids.push(*distractors.choose(rng).expect("non-empty"));
        }
    }
    for (f, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            ids.push(vocab.family_token(f, rng.random_range(0..2)));
        }
    }
    ids.shuffle(rng);
    Example { x: TokenSeq::from_content(&ids).expect("content is EOS-free"), y: label, text: None }
}

/// Balanced synthetic task whose label is the majority token family.
pub fn gen_synthetic_task(vocab_size: usize, num_labels: usize, n_train: usize, n_test: usize, seed: u64) -> Result<SyntheticTask> {
    let vocab = SyntheticVocab::new(vocab_size, num_labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        let mut out: Vec<Example> = (0..n).map(|i| synth_example(&vocab, i % num_labels, rng)).collect();
        out.shuffle(rng);
        out
    };
    let train = make(n_train, &mut rng);
    let test = make(n_test, &mut rng);
    Ok(SyntheticTask { vocab, train, test })
}

/// Rule-based paraphrase targets: each family token switches to its synonym
/// with probability 0.5, then interior positions are shuffled within
/// consecutive windows of 3 (first and last tokens stay anchored).
pub fn gen_rewriter_corpus(vocab: &SyntheticVocab, examples: &[Example], seed: u64) -> Vec<(TokenSeq, TokenSeq)> {
    const SWAP_PROB: f64 = 0.5;
    const WINDOW: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples
        .iter()
        .map(|ex| {
            let mut ids: Vec<TokenId> = ex
                .x
                .content()
                .iter()
                .map(|&t| match vocab.synonym_of(t) {
                    Some(s) if rng.random_bool(SWAP_PROB) => s,
                    _ => t,
                })
                .collect();
            if ids.len() > 2 {
                let last = ids.len() - 1;
                for window in ids[1..last].chunks_mut(WINDOW) {
                    window.shuffle(&mut rng);
                }
            }
            (ex.x.clone(), TokenSeq::from_content(&ids).expect("content is EOS-free"))
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TextField {
    Ids(Vec<TokenId>),
    Text(String),
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: TextField,
    label: usize,
}

/// Reads `{"text", "label"}` records. `text` is either an id array or a
/// whitespace-separated string of ids (pre-tokenized data).
pub fn load_jsonl(path: &Path, vocab: usize, num_labels: usize) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line)?;
        let (ids, text) = match rec.text {
            TextField::Ids(ids) => (ids, None),
            TextField::Text(s) => {
                let ids = s
                    .split_whitespace()
                    .map(|w| w.parse::<TokenId>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| invalid("text", format!("line {}: {e}", lineno + 1)))?;
                (ids, Some(s))
            }
        };
        if rec.label >= num_labels {
            return Err(invalid("label", format!("line {}: {} >= {num_labels}", lineno + 1, rec.label)));
        }
        let x = TokenSeq::from_content(&ids)?;
        x.check_vocab(vocab)?;
        out.push(Example { x, y: rec.label, text });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::lexical_diversity;
    use std::io::Write;

    fn vocab() -> SyntheticVocab {
        SyntheticVocab::new(20, 2).unwrap()
    }

    #[test]
    fn format_layouts() {
        let v = vocab();
        let x = TokenSeq::from_content(&[3, 7]).unwrap();
        let t = v.template(64, false);
        let out = format_input(&t, &Instruction::default(), &x).unwrap();
        assert_eq!(out.ids(), &[v.bos(), 3, 7, v.sep(), v.mask(), EOS]);
        let out = format_input(&t, &Instruction(vec![9, 10]), &x).unwrap();
        assert_eq!(out.ids(), &[v.bos(), 9, 10, 3, 7, v.sep(), v.mask(), EOS]);
        let mf = v.template(64, true);
        let out = format_input(&mf, &Instruction(vec![9]), &x).unwrap();
        assert_eq!(out.ids(), &[v.bos(), 9, v.mask(), v.sep(), 3, 7, EOS]);
    }

    #[test]
    fn format_errors() {
        let v = vocab();
        let x = TokenSeq::from_content(&[3, 7, 8, 9]).unwrap();
        assert!(matches!(
            format_input(&v.template(6, false), &Instruction::default(), &x),
            Err(RiffError::TooLong { len: 8, max: 6 })
        ));
        assert!(format_input(&v.template(64, false), &Instruction(vec![v.mask()]), &x).is_err());
    }

    #[test]
    fn format_is_injective() {
        let v = vocab();
        let t = v.template(64, false);
        let ins = Instruction(vec![9]);
        let task = gen_synthetic_task(20, 2, 60, 0, 4).unwrap();
        let mut seen = std::collections::HashMap::new();
        for ex in &task.train {
            let f = format_input(&t, &ins, &ex.x).unwrap();
            if let Some(prev) = seen.insert(f, ex.x.clone()) {
                assert_eq!(prev, ex.x);
            }
        }
    }

    #[test]
    fn synthetic_labels_follow_majority() {
        let task = gen_synthetic_task(20, 3, 301, 50, 7).unwrap();
        for ex in task.train.iter().chain(&task.test) {
            assert_eq!(majority_label(&task.vocab, &ex.x), ex.y);
            assert!((9..=17).contains(&ex.x.len()));
            assert!(ex.x.content().iter().all(|&t| (t as usize) < task.vocab.text_vocab()));
        }
        let mut counts = [0usize; 3];
        task.train.iter().for_each(|e| counts[e.y] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn synthetic_without_distractors() {
        let task = gen_synthetic_task(8, 2, 40, 0, 1).unwrap();
        assert!(task.vocab.distractors().is_empty());
        for ex in &task.train {
            assert_eq!(majority_label(&task.vocab, &ex.x), ex.y);
        }
        assert!(gen_synthetic_task(7, 2, 4, 0, 1).is_err());
    }

    #[test]
    fn dominated_by_family_zero() {
        let v = vocab();
        let x = TokenSeq::from_content(&[1, 2, 1, 3, 9, 10]).unwrap();
        assert_eq!(majority_label(&v, &x), 0);
    }

    #[test]
    fn rewrites_preserve_labels_and_differ() {
        let task = gen_synthetic_task(20, 2, 200, 0, 3).unwrap();
        let corpus = gen_rewriter_corpus(&task.vocab, &task.train, 9);
        let mut differing = 0;
        for ((x, z), ex) in corpus.iter().zip(&task.train) {
            assert_eq!(x, &ex.x);
            assert_eq!(majority_label(&task.vocab, z), ex.y);
            assert_eq!(z.len(), x.len());
            if lexical_diversity(x.content(), z.content()).unwrap() > 0.0 {
                differing += 1;
            }
        }
        assert!(differing as f64 >= 0.9 * corpus.len() as f64, "{differing}/{}", corpus.len());
    }

    #[test]
    fn distractor_free_rewrite_is_synonym_permutation() {
        let v = vocab();
        let x = TokenSeq::from_content(&[1, 3, 2, 2, 4, 1]).unwrap();
        let ex = Example { x: x.clone(), y: 0, text: None };
        let (_, z) = gen_rewriter_corpus(&v, &[ex], 5).pop().unwrap();
        let fam = |s: &TokenSeq| {
            let mut f: Vec<usize> = s.content().iter().map(|&t| v.family_of(t).unwrap()).collect();
            f.sort();
            f
        };
        assert_eq!(fam(&x), fam(&z));
    }

    #[test]
    fn jsonl_ingestion() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"text": "3 5 7", "label": 1}}"#).unwrap();
        writeln!(f, r#"{{"text": [4, 4], "label": 0}}"#).unwrap();
        let ex = load_jsonl(f.path(), 20, 2).unwrap();
        assert_eq!(ex[0].x.ids(), &[3, 5, 7, 0]);
        assert_eq!(ex[0].text.as_deref(), Some("3 5 7"));
        assert_eq!(ex[1].y, 0);
        assert!(load_jsonl(f.path(), 6, 2).is_err());
        assert!(load_jsonl(f.path(), 20, 1).is_err());
    }
}
