//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use riff_core::classifier::{ClassifierConfig, ClassifierParams, TuningMode, Verbalizer};
use riff_core::data::{gen_synthetic_task, Example, Instruction, Task};
use riff_core::decoding::{decode, diverse_beam, nucleus_set, top_p_sample, DecodeConfig, DecodeScheme};
use riff_core::diffmath::{log_softmax, logsumexp};
use riff_core::estimators::{
    mml_coefficients, normalize_rewards, offpolicy_coefficients, pg_coefficients, EstimatorKind, Sample, SampleBatch,
};
use riff_core::experiment::{build_setup, SetupConfig};
use riff_core::metrics::{lexical_diversity, pairwise_ld, rouge_n};
use riff_core::oracle::{
    enumerate_sequences, exact_gradient_with_rewards, exact_klon_gradient, klon_fd_error, mml_fd_error, TinyInstance,
};
use riff_core::promptsearch::{gs_search, GS_BATCH, GS_TOP_K};
use riff_core::seqpolicy::{PolicyConfig, PolicyParams, TokenSeq, EOS};
use riff_core::trainer::{
    augmented_gradient, ensemble_scores_from, finetune_paraphraser, supervised_gradient, write_finetune_run, RunConfig,
    RunManifest,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn tiny_instances(seed: u64, n: usize) -> Vec<TinyInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let vocab = rng.random_range(2..=4);
            let max_len = rng.random_range(2..=4);
            TinyInstance::random(rng.random(), vocab, max_len, 4).unwrap()
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for inst in tiny_instances(1, 20) {
        worst = worst.max(mml_fd_error(&inst).map_err(|e| e.to_string())?);
    }
    let elapsed = start.elapsed();
    check(worst < 1e-3, format!("max relative error {worst:.3e}"))?;
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("20 instances, max relative error {worst:.3e}, {elapsed:.2?}"))
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    for (k, inst) in tiny_instances(2, 20).into_iter().enumerate() {
        let fixed = inst.perturbed_policy(k as u64, 0.5);
        for beta in [0.1, 0.6] {
            worst = worst.max(klon_fd_error(&inst, &fixed, beta).map_err(|e| e.to_string())?);
        }
        let rewards = inst.rewards().map_err(|e| e.to_string())?;
        let plain = exact_gradient_with_rewards(&inst.policy, &inst.x, &rewards).map_err(|e| e.to_string())?;
        let zero = exact_klon_gradient(&inst.policy, &fixed, &inst.x, &rewards, 0.0).map_err(|e| e.to_string())?;
        let bitwise = plain.values().iter().zip(zero.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        check(bitwise, format!("instance {k}: beta = 0 differs from the plain gradient"))?;
    }
    check(worst < 1e-3, format!("max relative error {worst:.3e}"))?;
    Ok(format!("beta in {{0.1, 0.6}} max relative error {worst:.3e}; beta = 0 bitwise"))
}

fn random_batch(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let m = rng.random_range(1..=16);
    let cur = (0..m).map(|_| rng.random_range(-25.0..0.0)).collect();
    let rewards = (0..m).map(|_| rng.random_range(-8.0..0.0)).collect();
    (cur, rewards)
}

fn batch(cur: &[f64], fixed: &[f64], rewards: &[f64]) -> SampleBatch {
    let samples = (0..cur.len())
        .map(|j| Sample {
            seq: TokenSeq::from_content(&[j as u32 + 1]).unwrap(),
            cur_logprob: cur[j],
            fixed_logprob: fixed[j],
            reward: rewards[j],
        })
        .collect();
    SampleBatch::new(samples).unwrap()
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..1000 {
        let (cur, r) = random_batch(&mut rng);
        let b = batch(&cur, &cur, &r);
        let mml = mml_coefficients(&b).map_err(|e| e.to_string())?.phi;
        let sum: f64 = mml.iter().sum();
        check((sum - 1.0).abs() <= 1e-9, format!("trial {trial}: MML sums to {sum}"))?;
        check(mml.iter().all(|&p| p >= 0.0), format!("trial {trial}: negative MML coefficient"))?;

        let shift = rng.random_range(-5.0..5.0);
        let shifted: Vec<f64> = r.iter().map(|x| x + shift).collect();
        let mml_s = mml_coefficients(&batch(&cur, &cur, &shifted)).unwrap().phi;
        check(argmax_first(&mml) == argmax_first(&mml_s), format!("trial {trial}: shift moved the argmax"))?;

        let lambda = rng.random_range(-3.0..3.0);
        let scaled: Vec<f64> = r.iter().map(|x| lambda * x).collect();
        let pg = pg_coefficients(&b).unwrap().phi;
        let pg_s = pg_coefficients(&batch(&cur, &cur, &scaled)).unwrap().phi;
        for (a, s) in pg.iter().zip(&pg_s) {
            check((lambda * a - s).abs() <= 1e-12 * (1.0 + s.abs()), format!("trial {trial}: PG not homogeneous"))?;
        }

        let off = offpolicy_coefficients(&b, EstimatorKind::Mml).unwrap().phi;
        let z = logsumexp(&r).unwrap();
        for (o, ri) in off.iter().zip(&r) {
            check((o - (ri - z).exp()).abs() <= 1e-12, format!("trial {trial}: off-policy MML != softmax(R)"))?;
        }
        let off_pg = offpolicy_coefficients(&b, EstimatorKind::Pg).unwrap().phi;
        for (o, ri) in off_pg.iter().zip(&r) {
            check((o - ri).abs() <= 1e-12, format!("trial {trial}: off-policy PG != R"))?;
        }

        let n = normalize_rewards(&r).unwrap();
        let m = n.len() as f64;
        if r.iter().all(|&x| x == r[0]) {
            check(n.iter().all(|&x| x == 0.0), format!("trial {trial}: constant input not zeroed"))?;
        } else {
            let mean = n.iter().sum::<f64>() / m;
            let sd = (n.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m).sqrt();
            check(mean.abs() <= 1e-12 && (sd - 1.0).abs() <= 1e-12, format!("trial {trial}: mean {mean}, sd {sd}"))?;
        }
    }
    let constant = normalize_rewards(&[-0.4; 6]).unwrap();
    check(constant.iter().all(|&x| x == 0.0), "constant rewards not zeroed")?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!("1000 random batches, {elapsed:.2?}"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let greedy = DecodeConfig { m: 1, diversity_penalty: 0.0, repetition_penalty: 1.0, ..Default::default() };
    for k in 0..50 {
        let vocab = rng.random_range(2..=4);
        let max_len = rng.random_range(2..=4);
        let mut policy =
            PolicyParams::init(PolicyConfig { vocab, embed_dim: 4, hidden: 4, max_len }, rng.random()).unwrap();
        policy.params.scale(3.0);
        let content: Vec<u32> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..vocab as u32)).collect();
        let x = TokenSeq::from_content(&content).unwrap();
        let beam = diverse_beam(&policy, &x, &greedy).map_err(|e| e.to_string())?;
        let en = enumerate_sequences(&policy, &x).map_err(|e| e.to_string())?;
        check(beam[0].seq == en.greedy_path(), format!("instance {k}: beam {:?} vs {:?}", beam[0].seq, en.greedy_path()))?;
    }

    // One free step (max_len 2) over three tokens, p = 1, 10k draws.
    let policy = PolicyParams::init(PolicyConfig { vocab: 3, embed_dim: 4, hidden: 4, max_len: 2 }, 44).unwrap();
    let x = TokenSeq::from_content(&[1, 2]).unwrap();
    let ctx = policy.encode(&x).unwrap();
    let probs: Vec<f64> = log_softmax(&policy.next_logits(&ctx, EOS), 1.0).unwrap().iter().map(|l| l.exp()).collect();
    check(nucleus_set(&probs, 1.0).len() == 3, "p = 1 must keep every token")?;
    let draws = top_p_sample(&policy, &x, &DecodeConfig { m: 10_000, p: 1.0, seed: 9, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let mut counts = [0f64; 3];
    for d in &draws {
        counts[d.seq.ids()[0] as usize] += 1.0;
    }
    let n = draws.len() as f64;
    let chi2: f64 = counts.iter().zip(&probs).map(|(o, q)| (o - n * q).powi(2) / (n * q)).sum();
    let p_value = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
    check(p_value > 0.01, format!("chi-square p-value {p_value:.4}"))?;

    let policy = PolicyParams::init(PolicyConfig { vocab: 6, embed_dim: 4, hidden: 6, max_len: 7 }, 45).unwrap();
    let cfg = DecodeConfig { m: 6, seed: 77, ..Default::default() };
    for scheme in DecodeScheme::ALL {
        let a = decode(&policy, &x, scheme, &cfg).unwrap();
        let b = decode(&policy, &x, scheme, &cfg).unwrap();
        let same = a.len() == b.len()
            && a.iter().zip(&b).all(|(p, q)| p.seq == q.seq && p.logprob.to_bits() == q.logprob.to_bits());
        check(same, format!("{scheme} not deterministic"))?;
    }
    Ok(format!("50/50 greedy matches, chi-square p = {p_value:.3}, 3 decoders deterministic"))
}

fn criterion_5() -> Outcome {
    let vocab = 10;
    let mask = 9;
    let base_cfg = ClassifierConfig { prompt_len: 3, cls_hidden: 5, ..ClassifierConfig::new(vocab, 4, 2, mask) };
    let verb = Verbalizer::new(vec![1, 2], vocab).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let modes = [
        TuningMode::AllTune,
        TuningMode::HTune,
        TuningMode::InTune,
        TuningMode::ClsTune,
        TuningMode::SpTune,
        TuningMode::LoRA,
    ];
    for mode in modes {
        let keep = mode.trainable_segments();
        for k in 0..100 {
            let mut clf = ClassifierParams::init(base_cfg, mode, rng.random()).unwrap();
            clf.params.values_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            let len = rng.random_range(1..6);
            let mut ids: Vec<u32> = (0..len).map(|_| rng.random_range(1..mask)).collect();
            ids.insert(rng.random_range(0..=ids.len()), mask);
            ids.push(EOS);
            let input = TokenSeq::new(ids).unwrap();
            let g = clf.classifier_grad(&input, rng.random_range(0..2), &verb).map_err(|e| e.to_string())?;
            for seg in g.layout() {
                if keep.contains(&seg.name.as_str()) {
                    continue;
                }
                let vals = g.segment(&seg.name);
                check(vals.iter().all(|&v| v == 0.0), format!("{mode} evaluation {k}: `{}` has gradient", seg.name))?;
            }
        }
    }

    for seed in 0..20 {
        let lora = ClassifierParams::init(base_cfg, TuningMode::LoRA, seed).unwrap();
        let base = lora.clone().with_mode(TuningMode::AllTune);
        let input = TokenSeq::new(vec![3, 4, mask, 5, EOS]).unwrap();
        let a = lora.label_logprobs(&input, &verb).unwrap();
        let b = base.label_logprobs(&input, &verb).unwrap();
        check(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), format!("LoRA seed {seed} not bitwise"))?;
    }

    let st = gen_synthetic_task(14, 2, 40, 0, 5).unwrap();
    let v = st.vocab;
    let cc = ClassifierConfig::new(v.size, 4, 2, v.mask());
    let clf = ClassifierParams::init(cc, TuningMode::Gs, 5).unwrap();
    let d0 = v.distractors().start;
    let task = Task { template: v.template(cc.max_len, false), instruction: Instruction(vec![d0; 4]), verbalizer: v.verbalizer() };
    let trace = gs_search(&clf, &task, &st.train, 500, GS_BATCH, GS_TOP_K, 5).map_err(|e| e.to_string())?;
    for (i, s) in trace.steps.iter().enumerate() {
        check(s.chosen_loglik >= s.incumbent_loglik, format!("GS step {i} decreased the minibatch log-likelihood"))?;
    }
    Ok("6 modes x 100 evaluations exact zeros, LoRA identity bitwise, 500 monotone GS steps".into())
}

fn criterion_6() -> Outcome {
    let setup = build_setup(&SetupConfig { shots: 128, pool_size: 600, seed: 6, ..Default::default() })
        .map_err(|e| e.to_string())?;
    check(setup.split.train.len() == 256, "128-shot x 2 labels should give 256 training examples")?;
    let cfg = RunConfig { steps: 1120, batch_size: 8, checkpoint_interval: 8, eval_m: 2, ..RunConfig::riff(6) };
    let out = finetune_paraphraser(setup.policy.clone(), &setup.classifier, &setup.task, &setup.split, &cfg)
        .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = write_finetune_run(dir.path(), "protocol", &cfg, &setup.split, &out).map_err(|e| e.to_string())?;
    let m = RunManifest::load(&path).map_err(|e| e.to_string())?;
    check(m.epochs == 35.0, format!("manifest reports {} epochs", m.epochs))?;
    check(m.checkpoint_count == 140, format!("manifest reports {} checkpoints", m.checkpoint_count))?;
    check(m.checkpoint_steps.iter().all(|s| s % 8 == 0), "checkpoint step not a multiple of 8")?;
    Ok(format!("{} epochs, {} checkpoints from manifest", m.epochs, m.checkpoint_count))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let setup = build_setup(&SetupConfig { seed, ..Default::default() }).map_err(|e| e.to_string())?;
        let cfg = RunConfig::riff(seed);
        let out = finetune_paraphraser(setup.policy.clone(), &setup.classifier, &setup.task, &setup.split, &cfg)
            .map_err(|e| e.to_string())?;
        let (base, best) = (out.baseline.val_accuracy, out.best().val_accuracy);
        wins += (best > base) as usize;
        detail.push(format!("{base:.3}->{best:.3}"));
    }
    let elapsed = start.elapsed();
    let summary = format!("{wins}/5 seeds improve [{}], {elapsed:.1?}", detail.join(", "));
    check(wins >= 4, summary.clone())?;
    check(elapsed < Duration::from_secs(600), summary.clone())?;
    Ok(summary)
}

fn criterion_8() -> Outcome {
    let setup = build_setup(&SetupConfig { seed: 8, ..Default::default() }).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for mode in TuningMode::ALL {
        let clf = setup.classifier.clone().with_mode(mode);
        for chunk in setup.split.train.chunks(8) {
            let batch: Vec<&Example> = chunk.iter().collect();
            let (_, plain) = supervised_gradient(&clf, &setup.task, &batch).map_err(|e| e.to_string())?;
            let empty: Vec<(&Example, &[TokenSeq])> = batch.iter().map(|e| (*e, &[][..])).collect();
            let (_, aug) = augmented_gradient(&clf, &setup.task, &empty).map_err(|e| e.to_string())?;
            let aug = clf.mask_gradient(aug);
            for (a, b) in aug.values().iter().zip(plain.values()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(worst <= 1e-12, format!("M = 0 gradient gap {worst:e}"))?;
    let s = ensemble_scores_from(Some(&[-0.2, -1.7]), &[vec![-1.6, -0.2], vec![-1.4, -0.3]]).unwrap();
    check((s[0] - -1.7).abs() < 1e-12 && (s[1] - -1.95).abs() < 1e-12, format!("ensemble scores {s:?}"))?;
    check(argmax_first(&s) == 0, "ensemble label should be 0")?;
    Ok(format!("M = 0 max gradient gap {worst:e}; ensemble hand case [-1.7, -1.95] -> 0"))
}

fn criterion_9() -> Outcome {
    let same = [3u32, 1, 4, 1, 5];
    check(lexical_diversity(&same, &same).unwrap() == 0.0, "LD(x, x) != 0")?;
    check(lexical_diversity(&[1u32, 2, 3], &[4u32, 5]).unwrap() == 1.0, "disjoint LD != 1")?;
    let a = ["w1", "w2", "w3"];
    let b = ["w1", "w2"];
    check(rouge_n(&a, &b, 1).unwrap() == 0.8, "rouge-1 != 0.8")?;
    check(rouge_n(&a, &b, 2).unwrap() == 2.0 / 3.0, "rouge-2 != 2/3")?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..200 {
        let k = rng.random_range(2..7);
        let texts: Vec<Vec<u32>> =
            (0..k).map(|_| (0..rng.random_range(1..8)).map(|_| rng.random_range(0..6)).collect()).collect();
        let base = pairwise_ld(&texts).unwrap();
        let mut perm = texts.clone();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        check(pairwise_ld(&perm).unwrap() == base, format!("trial {trial}: PLD changed under permutation"))?;
    }
    Ok("LD endpoints 0/1, rouge 0.8 and 2/3, PLD permutation-exact".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient anchor", criterion_1),
        ("KL-penalized anchor", criterion_2),
        ("coefficient algebra", criterion_3),
        ("decoder contracts", criterion_4),
        ("tuning-mode masks", criterion_5),
        ("protocol arithmetic", criterion_6),
        ("end-to-end direction", criterion_7),
        ("augmentation reduction and ensemble", criterion_8),
        ("paraphrase metrics", criterion_9),
    ];
    let mut results = BTreeMap::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match &outcome {
            Ok(msg) => println!("criterion {} ({name}): PASS - {msg}", i + 1),
            Err(msg) => println!("criterion {} ({name}): FAIL - {msg}", i + 1),
        }
        results.insert(i + 1, outcome.is_ok());
    }
    let failed: Vec<_> = results.iter().filter(|(_, ok)| !**ok).map(|(k, _)| *k).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
