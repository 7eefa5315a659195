use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde_json::json;

use riff_core::checkpoint::{file_hash, load_classifier, load_policy, save_classifier, save_policy};
use riff_core::data::Instruction;
use riff_core::decoding::DecodeScheme;
use riff_core::estimators::EstimatorKind;
use riff_core::experiment::{build_setup, SyntheticSetup};
use riff_core::metrics::{lexical_diversity, pairwise_ld};
use riff_core::oracle::run_oracle_suite;
use riff_core::trainer::{
    ensemble_accuracy, finetune_paraphraser, metrics_csv, test_paraphrases, train_classifier_augmented,
    write_classifier_run, write_finetune_run, MetricRow, Regime, MANIFEST_FILE, METRICS_FILE,
};

use crate::config::ExperimentConfig;

pub const CONFIG_FILE: &str = "config.json";

/// `<root>/runs/<name>/<seed>`.
pub fn run_dir(root: &Path, name: &str, seed: u64) -> PathBuf {
    root.join("runs").join(name).join(seed.to_string())
}

/// Creates the run directory, refusing to reuse one written by a different
/// pipeline.
fn claim_dir(dir: &Path, kind: &str) -> anyhow::Result<()> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() {
        let existing: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest)?)?;
        if existing["kind"] != kind {
            bail!("{} already holds a `{}` run", dir.display(), existing["kind"].as_str().unwrap_or("?"));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

/// Synthetic setup with checkpoint overrides and the configured instruction.
pub fn prepare(cfg: &ExperimentConfig) -> anyhow::Result<SyntheticSetup> {
    let mut setup = build_setup(&cfg.setup)?;
    if let Some(p) = &cfg.policy_checkpoint {
        setup.policy = load_policy(p).with_context(|| format!("loading policy {}", p.display()))?;
    }
    if let Some(p) = &cfg.classifier_checkpoint {
        setup.classifier = load_classifier(p).with_context(|| format!("loading classifier {}", p.display()))?;
    }
    setup.task.instruction = Instruction(cfg.instruction.clone());
    Ok(setup)
}

fn write_small_run(dir: &Path, manifest: serde_json::Value, metrics: &[MetricRow], files: &[&str]) -> anyhow::Result<()> {
    fs::write(dir.join(METRICS_FILE), metrics_csv(metrics))?;
    let mut hashes = BTreeMap::new();
    for f in files.iter().copied().chain([METRICS_FILE]) {
        hashes.insert(f.to_string(), file_hash(&dir.join(f))?);
    }
    let mut manifest = manifest;
    manifest["files"] = serde_json::to_value(hashes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn pretrain(cfg: &ExperimentConfig, root: &Path) -> anyhow::Result<PathBuf> {
    let dir = run_dir(root, &cfg.name, cfg.seed());
    claim_dir(&dir, "pretrain")?;
    let setup = build_setup(&cfg.setup)?;
    save_policy(&dir.join("policy.ckpt"), &setup.policy)?;
    save_classifier(&dir.join("classifier.ckpt"), &setup.classifier)?;
    write_config(&dir, cfg)?;
    let metrics: Vec<MetricRow> = setup
        .mle_curve
        .iter()
        .enumerate()
        .map(|(epoch, &nll)| MetricRow { step: epoch, split: "train".into(), metric: "mle_nll".into(), value: nll })
        .collect();
    let manifest = json!({
        "kind": "pretrain",
        "name": cfg.name,
        "seed": cfg.seed(),
        "config": cfg.setup,
        "mle_epochs": cfg.setup.mle_epochs,
        "initial_nll": setup.mle_curve.first(),
        "final_nll": setup.mle_curve.last(),
    });
    write_small_run(&dir, manifest, &metrics, &["policy.ckpt", "classifier.ckpt"])?;
    println!(
        "pretrain {}: target NLL {:.4} -> {:.4}; wrote {}",
        cfg.name,
        setup.mle_curve.first().copied().unwrap_or(f64::NAN),
        setup.mle_curve.last().copied().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(dir)
}

fn finetune_in(cfg: &ExperimentConfig, setup: &SyntheticSetup, dir: &Path) -> anyhow::Result<(f64, f64, f64)> {
    claim_dir(dir, "riff-finetune")?;
    let run = cfg.run_config();
    let out = finetune_paraphraser(setup.policy.clone(), &setup.classifier, &setup.task, &setup.split, &run)?;
    write_finetune_run(dir, &cfg.name, &run, &setup.split, &out)?;
    write_config(dir, cfg)?;
    Ok((out.baseline.val_accuracy, out.best().val_accuracy, out.mean_checkpoint_accuracy()))
}

pub fn riff_finetune(cfg: &ExperimentConfig, root: &Path) -> anyhow::Result<PathBuf> {
    let setup = prepare(cfg)?;
    let dir = run_dir(root, &cfg.name, cfg.seed());
    let (base, best, mean) = finetune_in(cfg, &setup, &dir)?;
    println!(
        "riff-finetune {} seed {}: step-0 {base:.4}, best {best:.4}, mean over checkpoints {mean:.4}; wrote {}",
        cfg.name,
        cfg.seed(),
        dir.display()
    );
    Ok(dir)
}

pub fn train_classifier(cfg: &ExperimentConfig, root: &Path) -> anyhow::Result<PathBuf> {
    let setup = prepare(cfg)?;
    let dir = run_dir(root, &cfg.name, cfg.seed());
    claim_dir(&dir, "train-classifier")?;
    let ccfg = cfg.classifier_config();
    let clf = setup.classifier.clone().with_mode(cfg.mode);
    let out = train_classifier_augmented(clf, &setup.policy, &setup.task, &setup.split, &cfg.decode_config(ccfg.m), &ccfg)?;
    write_classifier_run(&dir, &cfg.name, &ccfg, &setup.split, &out)?;
    write_config(&dir, cfg)?;
    let best = out.best();
    println!(
        "train-classifier {} ({}, M={}): step-0 {:.4}, best {:.4} at step {}; wrote {}",
        cfg.name,
        cfg.mode,
        ccfg.m,
        out.baseline.val_accuracy,
        best.val_accuracy,
        best.step,
        dir.display()
    );
    Ok(dir)
}

pub fn evaluate(cfg: &ExperimentConfig, root: &Path) -> anyhow::Result<PathBuf> {
    let setup = prepare(cfg)?;
    let test = &setup.data.test;
    if test.is_empty() {
        bail!("no test examples; set test_size above 0");
    }
    let dir = run_dir(root, &cfg.name, cfg.seed());
    claim_dir(&dir, "evaluate")?;
    let (clf, task, policy) = (&setup.classifier, &setup.task, &setup.policy);
    let dec = cfg.decode_config(cfg.eval_m);

    let hits = test
        .par_iter()
        .map(|ex| Ok(clf.predict(&task.format(&ex.x)?, &task.verbalizer)? == ex.y))
        .collect::<riff_core::Result<Vec<bool>>>()?;
    let plain = hits.iter().filter(|&&h| h).count() as f64 / test.len() as f64;
    let with_original = ensemble_accuracy(clf, task, policy, test, &dec, cfg.eval_m, true)?;
    let paraphrase_only = ensemble_accuracy(clf, task, policy, test, &dec, cfg.eval_m, false)?;
    let diversity = test
        .par_iter()
        .map(|ex| {
            let zs = test_paraphrases(policy, &ex.x, &dec, cfg.eval_m)?;
            let mut ld = 0.0;
            for z in &zs {
                ld += lexical_diversity(ex.x.content(), z.content())?;
            }
            let texts: Vec<&[u32]> = zs.iter().map(|z| z.content()).collect();
            let pld = if texts.len() > 1 { pairwise_ld(&texts)? } else { 0.0 };
            Ok((ld / zs.len() as f64, pld))
        })
        .collect::<riff_core::Result<Vec<(f64, f64)>>>()?;
    let n = diversity.len() as f64;
    let ld = diversity.iter().map(|d| d.0).sum::<f64>() / n;
    let pld = diversity.iter().map(|d| d.1).sum::<f64>() / n;

    let row = |metric: &str, value: f64| MetricRow { step: 0, split: "test".into(), metric: metric.into(), value };
    let metrics = vec![
        row("accuracy", plain),
        row("ensemble_accuracy", with_original),
        row("paraphrase_only_accuracy", paraphrase_only),
        row("lexical_diversity", ld),
        row("pairwise_lexical_diversity", pld),
    ];
    write_config(&dir, cfg)?;
    let manifest = json!({
        "kind": "evaluate",
        "name": cfg.name,
        "seed": cfg.seed(),
        "n_test": test.len(),
        "eval_m": cfg.eval_m,
        "policy_checkpoint": cfg.policy_checkpoint,
        "classifier_checkpoint": cfg.classifier_checkpoint,
    });
    write_small_run(&dir, manifest, &metrics, &[])?;
    println!(
        "evaluate {} on {} test examples: accuracy {plain:.4}, ensemble {with_original:.4}, paraphrase-only {paraphrase_only:.4}, LD {ld:.4}, PLD {pld:.4}",
        cfg.name,
        test.len()
    );
    Ok(dir)
}

/// Runs the oracle suite and reports whether it passed.
pub fn oracle_check(seed: u64, instances: usize) -> anyhow::Result<bool> {
    let report = run_oracle_suite(seed, instances)?;
    let worst = report.max_rel_err();
    println!("oracle-check seed {seed}: {} instances", report.instances);
    println!("  full-enumeration gradient max relative error {:.3e}", report.mml_max_rel_err);
    println!("  KL-anchored gradient max relative error      {:.3e}", report.klon_max_rel_err);
    println!("  beta = 0 reduces bitwise: {}", report.klon_zero_beta_bitwise);
    println!("max relative gradient error {worst:.3e}");
    Ok(worst < 1e-3 && report.klon_zero_beta_bitwise)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCell {
    pub estimator: EstimatorKind,
    pub regime: Regime,
    pub decoder: DecodeScheme,
    pub normalize: bool,
}

impl GridCell {
    pub fn label(&self) -> String {
        let z = if self.normalize { "z" } else { "raw" };
        format!("{}_{}_{}_{}", self.estimator, self.regime, self.decoder, z)
    }
}

pub fn grid_cells(
    estimators: &[EstimatorKind],
    regimes: &[Regime],
    decoders: &[DecodeScheme],
    normalize: &[bool],
) -> Vec<GridCell> {
    let mut cells = Vec::new();
    for &estimator in estimators {
        for &regime in regimes {
            for &decoder in decoders {
                for &normalize in normalize {
                    cells.push(GridCell { estimator, regime, decoder, normalize });
                }
            }
        }
    }
    cells
}

/// Every cell for every seed, in parallel. Returns the run directories.
pub fn grid(cfg: &ExperimentConfig, cells: &[GridCell], seeds: &[u64], root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;
    pool.install(|| {
        let setups = seeds.par_iter().map(|&s| prepare(&cfg.with_seed(s))).collect::<anyhow::Result<Vec<_>>>()?;
        let jobs: Vec<(usize, GridCell)> =
            (0..seeds.len()).flat_map(|i| cells.iter().map(move |&c| (i, c))).collect();
        println!("grid: {} cells x {} seeds = {} runs", cells.len(), seeds.len(), jobs.len());
        let results: Vec<anyhow::Result<PathBuf>> = jobs
            .par_iter()
            .map(|&(i, cell)| {
                let run_cfg = ExperimentConfig {
                    name: format!("{}_{}", cfg.name, cell.label()),
                    estimator: cell.estimator,
                    regime: cell.regime,
                    decoder: cell.decoder,
                    normalize: cell.normalize,
                    ..cfg.with_seed(seeds[i])
                };
                let dir = run_dir(root, &run_cfg.name, run_cfg.seed());
                let (base, best, mean) = finetune_in(&run_cfg, &setups[i], &dir)
                    .with_context(|| format!("{} seed {}", run_cfg.name, run_cfg.seed()))?;
                println!("  {} seed {}: step-0 {base:.4}, best {best:.4}, mean {mean:.4}", run_cfg.name, run_cfg.seed());
                Ok(dir)
            })
            .collect();
        let mut dirs = Vec::new();
        let mut failures = Vec::new();
        for r in results {
            match r {
                Ok(d) => dirs.push(d),
                Err(e) => failures.push(format!("{e:#}")),
            }
        }
        if !failures.is_empty() {
            bail!("{} of {} runs failed:\n  {}", failures.len(), jobs.len(), failures.join("\n  "));
        }
        Ok(dirs)
    })
}
