use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use riff_core::trainer::{parse_metrics_csv, RunConfig, RunManifest};

const TINY: &str = r#"{
  "shots": 4, "pool_size": 40, "test_size": 12, "rewriter_pairs": 40, "mle_epochs": 1,
  "warmup_examples": 40, "warmup_steps": 5, "steps": 8, "batch_size": 2,
  "checkpoint_interval": 4, "m": 2, "eval_m": 2, "classifier_m": 2, "classifier_steps": 8
}"#;

fn riff(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riff")).env("RIFF_OUT", root).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn with_fields(extra: &str) -> String {
    format!("{}, {extra} }}", TINY.trim_end().trim_end_matches('}'))
}

#[test]
fn oracle_check_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = riff(tmp.path(), &["oracle-check", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let line = text.lines().find(|l| l.starts_with("max relative gradient error")).expect("summary line");
    let err: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-3);
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = riff(tmp.path(), &["riff-finetune", "--config", tmp.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    for (text, field) in [(r#"{"lrate": 1}"#, "lrate"), (r#"{"steps": -4}"#, "steps"), (r#"{"batch_size": 0}"#, "batch_size")] {
        let cfg = write_config(tmp.path(), "bad.json", text);
        let out = riff(tmp.path(), &["pretrain", "--config", cfg.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{text}");
        assert!(stderr(&out).contains(field), "{text}: {}", stderr(&out));
    }

    let out = riff(tmp.path(), &["grid", "--estimators", "mml,reinforce"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("reinforce"));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn runtime_failure_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY);
    let out = riff(
        tmp.path(),
        &["evaluate", "--config", cfg.to_str().unwrap(), "--policy", tmp.path().join("missing.ckpt").to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn pipeline_writes_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = write_config(root, "tiny.json", TINY);
    let cfg = cfg.to_str().unwrap();

    let out = riff(root, &["pretrain", "--config", cfg, "--name", "base"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let base = root.join("runs/base/0");
    for f in ["policy.ckpt", "classifier.ckpt", "metrics.csv", "manifest.json", "config.json"] {
        assert!(base.join(f).is_file(), "{f}");
    }

    let out = riff(root, &["riff-finetune", "--config", cfg, "--name", "ft", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let ft = root.join("runs/ft/3");
    let manifest = RunManifest::load(&ft.join("manifest.json")).unwrap();
    assert_eq!(manifest.kind, "riff-finetune");
    assert_eq!(manifest.checkpoint_steps, vec![4, 8]);
    assert!(ft.join("checkpoints/step_000000.ckpt").is_file());
    assert!(ft.join("checkpoints/step_000008.ckpt").is_file());
    let run: RunConfig = serde_json::from_value(manifest.config.clone()).unwrap();
    assert_eq!((run.seed, run.steps, run.m, run.beta), (3, 8, 2, 0.1));
    let saved = fs::read_to_string(ft.join("config.json")).unwrap();
    let reparsed: serde_json::Value = serde_json::from_str(&saved).unwrap();
    assert_eq!(reparsed["seed"], 3);
    assert_eq!(reparsed["name"], "ft");

    let cls_cfg = write_config(root, "cls.json", &with_fields(r#""mode": "gs", "instruction": [13, 14]"#));
    let out = riff(root, &["train-classifier", "--config", cls_cfg.to_str().unwrap(), "--name", "gs"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let gs = root.join("runs/gs/0");
    assert!(gs.join("checkpoints/step_000008.instruction.json").is_file());

    let policy = ft.join("checkpoints/step_000008.ckpt");
    let out = riff(root, &["evaluate", "--config", cfg, "--name", "ev", "--policy", policy.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rows = parse_metrics_csv(&fs::read_to_string(root.join("runs/ev/0/metrics.csv")).unwrap()).unwrap();
    let metrics: Vec<&str> = rows.iter().map(|r| r.metric.as_str()).collect();
    assert!(metrics.contains(&"paraphrase_only_accuracy") && metrics.contains(&"pairwise_lexical_diversity"));
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.value)));

    // A run directory belongs to one pipeline.
    let out = riff(root, &["pretrain", "--config", cfg, "--name", "ft", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(1));
}

/// Best and mean-over-checkpoints straight from the metric files.
fn recompute(runs_root: &Path) -> BTreeMap<String, (Vec<f64>, Vec<f64>)> {
    let mut out: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for cell in fs::read_dir(runs_root).unwrap() {
        let cell = cell.unwrap().path();
        for seed in fs::read_dir(&cell).unwrap() {
            let text = fs::read_to_string(seed.unwrap().path().join("metrics.csv")).unwrap();
            let acc: Vec<f64> = parse_metrics_csv(&text)
                .unwrap()
                .into_iter()
                .filter(|r| r.metric == "ensemble_accuracy" && r.step > 0)
                .map(|r| r.value)
                .collect();
            let entry = out.entry(cell.file_name().unwrap().to_string_lossy().into_owned()).or_default();
            entry.0.push(acc.iter().copied().fold(f64::MIN, f64::max));
            entry.1.push(acc.iter().sum::<f64>() / acc.len() as f64);
        }
    }
    out
}

#[test]
fn grid_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = write_config(root, "tiny.json", &with_fields(r#""name": "g", "steps": 4"#));
    let out = riff(
        root,
        &[
            "grid",
            "--config",
            cfg.to_str().unwrap(),
            "--estimators",
            "mml,pg",
            "--regimes",
            "on,off,klon",
            "--decoders",
            "beam,top_p,mixed",
            "--normalize",
            "both",
            "--seeds",
            "0,1",
            "--workers",
            "4",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("36 cells x 2 seeds = 72 runs"));
    let runs_root = root.join("runs");
    let cells: Vec<_> = fs::read_dir(&runs_root).unwrap().collect();
    assert_eq!(cells.len(), 36);
    let csvs = fs::read_dir(&runs_root)
        .unwrap()
        .flat_map(|c| fs::read_dir(c.unwrap().path()).unwrap())
        .filter(|s| s.as_ref().unwrap().path().join("metrics.csv").is_file())
        .count();
    assert_eq!(csvs, 72);
    let pg = RunManifest::load(&runs_root.join("g_pg_klon_beam_raw/1/manifest.json")).unwrap();
    assert_eq!(pg.config["beta"], 0.6);
    assert_eq!(pg.config["normalize"], false);

    let summary = root.join("summary.csv");
    let out = riff(root, &["report", runs_root.to_str().unwrap(), "--csv", summary.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = fs::read_to_string(&summary).unwrap();
    let expected = recompute(&runs_root);
    let lines: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(lines.len(), 36);
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let (best, mean) = &expected[f[0]];
        let best_mean = best.iter().sum::<f64>() / best.len() as f64;
        let ckpt_mean = mean.iter().sum::<f64>() / mean.len() as f64;
        assert_eq!(f[2], "2");
        assert!((f[4].parse::<f64>().unwrap() - best_mean).abs() < 1e-12, "{line}");
        assert!((f[6].parse::<f64>().unwrap() - ckpt_mean).abs() < 1e-12, "{line}");
        assert_eq!(f[8], "ok");
    }

    // Break one run: it is flagged, the report still succeeds.
    fs::remove_file(runs_root.join("g_mml_on_beam_z/0/manifest.json")).unwrap();
    fs::write(runs_root.join("g_mml_off_beam_z/1/checkpoints/step_000004.ckpt"), b"garbage").unwrap();
    let out = riff(root, &["report", runs_root.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("missing manifest"), "{text}");
    assert!(text.contains("does not match its recorded hash"), "{text}");
    assert_eq!(text.matches("INCOMPLETE (1 of 2 runs)").count(), 2, "{text}");
}

#[test]
fn report_needs_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = riff(tmp.path(), &["report", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
