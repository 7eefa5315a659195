//! Paraphrase-quality metrics: n-gram Rouge F1, lexical diversity against the
//! original, pairwise diversity among paraphrases, and the JSONL adapter
//! boundary for scorers that need an external model.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RiffError};

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// F1 of clipped n-gram overlap. Zero when either side has no n-grams.
pub fn rouge_n<T: Eq + Hash + Clone>(a: &[T], b: &[T], n: usize) -> Result<f64> {
    if !(n == 1 || n == 2) {
        return Err(invalid("n", format!("rouge order must be 1 or 2, got {n}")));
    }
    let ca = ngram_counts(a, n);
    let cb = ngram_counts(b, n);
    let total_a: usize = ca.values().sum();
    let total_b: usize = cb.values().sum();
    if total_a == 0 || total_b == 0 {
        return Ok(0.0);
    }
    let overlap: usize = ca.iter().map(|(g, &c)| c.min(*cb.get(g).unwrap_or(&0))).sum();
    if overlap == 0 {
        return Ok(0.0);
    }
    let precision = overlap as f64 / total_b as f64;
    let recall = overlap as f64 / total_a as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// `1 − (Rouge-1 + Rouge-2) / 2`.
pub fn lexical_diversity<T: Eq + Hash + Clone>(original: &[T], paraphrase: &[T]) -> Result<f64> {
    if original.is_empty() || paraphrase.is_empty() {
        return Err(RiffError::Empty("lexical diversity input"));
    }
    Ok(1.0 - (rouge_n(original, paraphrase, 1)? + rouge_n(original, paraphrase, 2)?) / 2.0)
}

/// Mean lexical diversity over all unordered pairs.
pub fn pairwise_ld<T: Eq + Hash + Clone, S: AsRef<[T]>>(paraphrases: &[S]) -> Result<f64> {
    if paraphrases.len() < 2 {
        return Err(invalid("paraphrases", "need at least two"));
    }
    let mut values = Vec::with_capacity(paraphrases.len() * (paraphrases.len() - 1) / 2);
    for i in 0..paraphrases.len() {
        for j in i + 1..paraphrases.len() {
            values.push(lexical_diversity(paraphrases[i].as_ref(), paraphrases[j].as_ref())?);
        }
    }
    // Summing in sorted order makes the result exactly invariant to input order.
    values.sort_by(f64::total_cmp);
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Fraction of predictions equal to their labels.
pub fn accuracy(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(RiffError::Shape(format!("{} predictions for {} labels", predicted.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(RiffError::Empty("accuracy input"));
    }
    Ok(predicted.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: String,
    pub text_a: String,
    pub text_b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub id: String,
    pub score: f64,
}

/// Runs an external scorer (perplexity, semantic similarity, factual
/// consistency, ...). Requests go to the adapter's stdin as JSONL, responses
/// are read from its stdout as JSONL and matched back by id.
pub fn external_score(adapter_cmd: &[String], pairs: &[ScoreRequest]) -> Result<Vec<ScoreResponse>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let (program, args) =
        adapter_cmd.split_first().ok_or_else(|| RiffError::Adapter("empty adapter command".into()))?;
    let mut payload = Vec::new();
    for req in pairs {
        serde_json::to_writer(&mut payload, req)?;
        payload.push(b'\n');
    }
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| RiffError::Adapter(format!("cannot start `{program}`: {e}")))?;
    {
        let mut stdin = child.stdin.take().expect("piped stdin");
        stdin.write_all(&payload)?;
    }
    let output = child.wait_with_output()?;
    if !output.status.success() {
        return Err(RiffError::Adapter(format!(
            "`{program}` exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    let mut by_id: HashMap<String, f64> = HashMap::new();
    for (i, line) in String::from_utf8_lossy(&output.stdout).lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let resp: ScoreResponse = serde_json::from_str(line)
            .map_err(|e| RiffError::Adapter(format!("malformed response line {}: {e}", i + 1)))?;
        if by_id.insert(resp.id.clone(), resp.score).is_some() {
            return Err(RiffError::Adapter(format!("duplicate response id `{}`", resp.id)));
        }
    }
    if by_id.len() != pairs.len() {
        let extra: Vec<&String> = by_id.keys().filter(|k| !pairs.iter().any(|p| &p.id == *k)).collect();
        if !extra.is_empty() {
            return Err(RiffError::Adapter(format!("unknown response ids {extra:?}")));
        }
    }
    pairs
        .iter()
        .map(|p| {
            by_id
                .get(&p.id)
                .map(|&score| ScoreResponse { id: p.id.clone(), score })
                .ok_or_else(|| RiffError::Adapter(format!("missing response for id `{}`", p.id)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rouge_worked_example() {
        let a = ["w1", "w2", "w3"];
        let b = ["w1", "w2"];
        // P = 1, R = 2/3 → F1 = 0.8; bigrams P = 1, R = 1/2 → F1 = 2/3
        assert!((rouge_n(&a, &b, 1).unwrap() - 0.8).abs() < 1e-15);
        assert!((rouge_n(&a, &b, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((lexical_diversity(&a, &b).unwrap() - (1.0 - (0.8 + 2.0 / 3.0) / 2.0)).abs() < 1e-15);
        assert!((lexical_diversity(&a, &b).unwrap() - 0.266_666_666_666_666_7).abs() < 1e-12);
    }

    #[test]
    fn rouge_endpoints() {
        assert_eq!(rouge_n(&[1, 2, 3], &[1, 2, 3], 1).unwrap(), 1.0);
        assert_eq!(rouge_n(&[1, 2], &[3, 4], 2).unwrap(), 0.0);
        assert_eq!(rouge_n(&[1], &[1], 2).unwrap(), 0.0);
        assert!(rouge_n(&[1], &[1], 3).is_err());
        assert_eq!(lexical_diversity(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(lexical_diversity(&[1, 2, 3], &[4, 5]).unwrap(), 1.0);
        assert!(lexical_diversity::<u32>(&[], &[1]).is_err());
    }

    #[test]
    fn rouge_clips_counts() {
        // a has "x" once, b three times: overlap clipped to 1.
        let r = rouge_n(&["x", "y"], &["x", "x", "x"], 1).unwrap();
        let (p, rec) = (1.0 / 3.0, 1.0 / 2.0);
        assert!((r - 2.0 * p * rec / (p + rec)).abs() < 1e-15);
    }

    #[test]
    fn pairwise_examples() {
        assert_eq!(pairwise_ld(&[vec![1, 2], vec![1, 2], vec![1, 2]]).unwrap(), 0.0);
        assert_eq!(pairwise_ld(&[vec![1, 2], vec![3, 4]]).unwrap(), 1.0);
        let texts = [vec![1, 2, 3], vec![1, 2], vec![2, 3, 4]];
        let expect = (lexical_diversity(&texts[0], &texts[1]).unwrap()
            + lexical_diversity(&texts[0], &texts[2]).unwrap()
            + lexical_diversity(&texts[1], &texts[2]).unwrap())
            / 3.0;
        assert!((pairwise_ld(&texts).unwrap() - expect).abs() < 1e-15);

        // hand: (0.2667 + (1 − (2/3 + 1/2)/2) + (1 − (0.4 + 0)/2)) / 3
        let hand = ((1.0 - (0.8 + 2.0 / 3.0) / 2.0) + (1.0 - (2.0 / 3.0 + 0.5) / 2.0) + (1.0 - 0.4 / 2.0)) / 3.0;
        assert!((pairwise_ld(&texts).unwrap() - hand).abs() < 1e-15);
        assert!(pairwise_ld(&[vec![1]]).is_err());
    }

    fn stub(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    fn reqs() -> Vec<ScoreRequest> {
        (0..3).map(|i| ScoreRequest { id: format!("p{i}"), text_a: "a".into(), text_b: format!("b {i}") }).collect()
    }

    #[test]
    fn adapter_stub_scores() {
        let script = r#"sed -E 's/.*"id":"([^"]*)".*/{"id":"\1","score":0.5}/'"#;
        let out = external_score(&stub(script), &reqs()).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|r| r.score == 0.5));
        assert_eq!(out[2].id, "p2");
    }

    #[test]
    fn adapter_permuted_ids_matched_by_id() {
        let script = r#"cat >/dev/null; printf '{"id":"p2","score":2}\n{"id":"p0","score":0}\n{"id":"p1","score":1}\n'"#;
        let out = external_score(&stub(script), &reqs()).unwrap();
        let scores: Vec<f64> = out.iter().map(|r| r.score).collect();
        assert_eq!(scores, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn adapter_failures() {
        assert!(external_score(&stub("cat >/dev/null; exit 3"), &reqs()).is_err());
        assert!(external_score(&stub("cat >/dev/null; echo not-json"), &reqs()).is_err());
        let missing = r#"cat >/dev/null; printf '{"id":"p0","score":0}\n'"#;
        assert!(matches!(external_score(&stub(missing), &reqs()), Err(RiffError::Adapter(_))));
        // empty request list never spawns the (nonexistent) adapter
        assert!(external_score(&["/nonexistent/adapter".to_string()], &[]).unwrap().is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn rouge_symmetric(a in prop::collection::vec(0u8..6, 0..10), b in prop::collection::vec(0u8..6, 0..10)) {
            for n in [1, 2] {
                prop_assert_eq!(rouge_n(&a, &b, n).unwrap(), rouge_n(&b, &a, n).unwrap());
            }
            if !a.is_empty() && !b.is_empty() {
                let ld = lexical_diversity(&a, &b).unwrap();
                prop_assert!((0.0..=1.0).contains(&ld));
            }
        }

        #[test]
        fn pld_permutation_symmetric(texts in prop::collection::vec(prop::collection::vec(0u8..5, 1..6), 2..6), rot in 0usize..6) {
            let base = pairwise_ld(&texts).unwrap();
            let mut perm = texts.clone();
            perm.rotate_left(rot % texts.len());
            perm.reverse();
            prop_assert_eq!(pairwise_ld(&perm).unwrap(), base);
        }
    }
}
