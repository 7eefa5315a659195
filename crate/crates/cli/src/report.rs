//! Aggregates finished runs into one row per configuration. Accuracies are
//! recomputed from each run's `metrics.csv`; the manifest is only used to
//! decide whether the run is complete.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use riff_core::checkpoint::file_hash;
use riff_core::trainer::{parse_metrics_csv, RunManifest, MANIFEST_FILE, METRICS_FILE};

const REPORTED_KINDS: [&str; 2] = ["riff-finetune", "train-classifier"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub name: String,
    pub kind: String,
    pub seed: Option<u64>,
    pub baseline: Option<f64>,
    /// Validation accuracy per checkpoint, step order.
    pub checkpoints: Vec<f64>,
    /// Why the run cannot be trusted, if it cannot.
    pub issue: Option<String>,
}

impl RunSummary {
    pub fn best(&self) -> Option<f64> {
        self.checkpoints.iter().copied().reduce(f64::max)
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.checkpoints.is_empty()).then(|| self.checkpoints.iter().sum::<f64>() / self.checkpoints.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub name: String,
    pub kind: String,
    pub seeds: usize,
    pub incomplete: usize,
    pub best_mean: f64,
    pub best_std: f64,
    pub checkpoint_mean: f64,
    pub baseline_mean: f64,
}

/// Run directories under `paths`: any directory holding a manifest or a
/// metrics file. Other directories are searched recursively.
pub fn discover(paths: &[PathBuf]) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        walk(p, &mut out)?;
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if dir.join(MANIFEST_FILE).is_file() || dir.join(METRICS_FILE).is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut children: Vec<PathBuf> =
        fs::read_dir(dir)?.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    children.sort();
    for c in children {
        if c.file_name().is_some_and(|n| n == "checkpoints") {
            continue;
        }
        walk(&c, out)?;
    }
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<RunManifest, String> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err("missing manifest".into());
    }
    RunManifest::load(&path).map_err(|e| format!("unreadable manifest: {e}"))
}

pub fn summarize_run(dir: &Path) -> RunSummary {
    let seed_from_path = dir.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse().ok());
    let name_from_path = dir.parent().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned());
    let manifest = read_manifest(dir);
    let mut summary = RunSummary {
        dir: dir.to_path_buf(),
        name: manifest.as_ref().map(|m| m.name.clone()).ok().or(name_from_path).unwrap_or_default(),
        kind: manifest.as_ref().map(|m| m.kind.clone()).unwrap_or_else(|_| "unknown".into()),
        seed: manifest.as_ref().map(|m| m.seed).ok().or(seed_from_path),
        baseline: None,
        checkpoints: Vec::new(),
        issue: None,
    };
    let rows = fs::read_to_string(dir.join(METRICS_FILE))
        .map_err(|_| "missing metrics".to_string())
        .and_then(|t| parse_metrics_csv(&t).map_err(|e| e.to_string()));
    match &rows {
        Ok(rows) => {
            for r in rows.iter().filter(|r| r.split == "validation" && r.metric == "ensemble_accuracy") {
                if r.step == 0 {
                    summary.baseline = Some(r.value);
                } else {
                    summary.checkpoints.push(r.value);
                }
            }
        }
        Err(e) => summary.issue = Some(e.clone()),
    }
    if summary.issue.is_none() {
        summary.issue = match &manifest {
            Err(e) => Some(e.clone()),
            Ok(m) if m.checkpoint_count != summary.checkpoints.len() => Some(format!(
                "{} of {} checkpoints evaluated",
                summary.checkpoints.len(),
                m.checkpoint_count
            )),
            Ok(m) => m.files.iter().find_map(|(rel, hash)| match file_hash(&dir.join(rel)) {
                Ok(h) if &h == hash => None,
                Ok(_) => Some(format!("{rel} does not match its recorded hash")),
                Err(_) => Some(format!("{rel} is missing")),
            }),
        };
    }
    if summary.issue.is_none() && summary.checkpoints.is_empty() {
        summary.issue = Some("no checkpoints".into());
    }
    summary
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation; 0 for a single value.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return if xs.is_empty() { f64::NAN } else { 0.0 };
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// One row per run name. Only complete runs enter the statistics;
/// incomplete ones are counted and flagged.
pub fn aggregate(runs: &[RunSummary]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.kind == "unknown" || REPORTED_KINDS.contains(&r.kind.as_str())) {
        groups.entry(r.name.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(name, rs)| {
            let ok: Vec<&&RunSummary> = rs.iter().filter(|r| r.issue.is_none()).collect();
            let best: Vec<f64> = ok.iter().filter_map(|r| r.best()).collect();
            let ckpt: Vec<f64> = ok.iter().filter_map(|r| r.mean()).collect();
            let base: Vec<f64> = ok.iter().filter_map(|r| r.baseline).collect();
            let kind = ok.first().map(|r| r.kind.clone()).or_else(|| rs.first().map(|r| r.kind.clone())).unwrap_or_default();
            CellSummary {
                name: name.to_string(),
                kind,
                seeds: ok.len(),
                incomplete: rs.len() - ok.len(),
                best_mean: mean(&best),
                best_std: std_dev(&best),
                checkpoint_mean: mean(&ckpt),
                baseline_mean: mean(&base),
            }
        })
        .collect()
}

fn status(c: &CellSummary) -> String {
    match (c.seeds, c.incomplete) {
        (_, 0) => "ok".into(),
        (0, n) => format!("INCOMPLETE ({n} runs)"),
        (_, n) => format!("INCOMPLETE ({n} of {} runs)", n + c.seeds),
    }
}

pub const CSV_HEADER: &str = "name,kind,seeds,incomplete,best_mean,best_std,checkpoint_mean,baseline_mean,status";

pub fn to_csv(cells: &[CellSummary]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            c.name,
            c.kind,
            c.seeds,
            c.incomplete,
            c.best_mean,
            c.best_std,
            c.checkpoint_mean,
            c.baseline_mean,
            status(c)
        );
    }
    s
}

/// Aligned table in the `best (std | mean over checkpoints)` convention.
pub fn to_text(cells: &[CellSummary], runs: &[RunSummary]) -> String {
    let width = cells.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<width$}  {:>5}  {:>24}  {:>8}  status\n", "name", "seeds", "best (std | mean)", "step-0");
    for c in cells {
        let cell = format!("{:.1} ({:.1} | {:.1})", 100.0 * c.best_mean, 100.0 * c.best_std, 100.0 * c.checkpoint_mean);
        let _ = writeln!(
            s,
            "{:<width$}  {:>5}  {:>24}  {:>8.1}  {}",
            c.name,
            c.seeds,
            cell,
            100.0 * c.baseline_mean,
            status(c)
        );
    }
    for r in runs.iter().filter(|r| r.issue.is_some()) {
        let _ = writeln!(s, "  flagged {}: {}", r.dir.display(), r.issue.as_deref().unwrap_or(""));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(name: &str, seed: u64, ckpts: &[f64]) -> RunSummary {
        RunSummary {
            dir: PathBuf::from(format!("runs/{name}/{seed}")),
            name: name.into(),
            kind: "riff-finetune".into(),
            seed: Some(seed),
            baseline: Some(0.5),
            checkpoints: ckpts.to_vec(),
            issue: None,
        }
    }

    #[test]
    fn single_checkpoint_best_equals_mean() {
        let cells = aggregate(&[run("a", 0, &[0.75])]);
        assert_eq!(cells[0].best_mean, cells[0].checkpoint_mean);
        assert_eq!(cells[0].best_std, 0.0);
    }

    #[test]
    fn identical_seeds_have_zero_std() {
        let runs: Vec<RunSummary> = (0..5).map(|s| run("a", s, &[0.5, 0.9, 0.7])).collect();
        let c = &aggregate(&runs)[0];
        assert_eq!(c.seeds, 5);
        assert_eq!(c.best_std, 0.0);
        assert_eq!(c.best_mean, 0.9);
        assert!((c.checkpoint_mean - 0.7).abs() < 1e-15);
    }

    #[test]
    fn sample_std() {
        let c = &aggregate(&[run("a", 0, &[0.5]), run("a", 1, &[0.7])])[0];
        assert!((c.best_std - 0.2 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn incomplete_runs_are_flagged_not_counted() {
        let mut bad = run("a", 1, &[0.1]);
        bad.issue = Some("missing manifest".into());
        let cells = aggregate(&[run("a", 0, &[0.8]), bad.clone()]);
        assert_eq!((cells[0].seeds, cells[0].incomplete), (1, 1));
        assert_eq!(cells[0].best_mean, 0.8);
        assert!(to_text(&cells, &[bad]).contains("INCOMPLETE"));
        assert!(to_csv(&cells).lines().nth(1).unwrap().ends_with("INCOMPLETE (1 of 2 runs)"));
    }
}
