//! Cross-seed summaries of finished run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{read_csv, EvalRow, PredictionRow, CONFIG_FILE, EVAL_FILE, PREDICTIONS_FILE};
use crate::robustness::mce_from_errors;

/// Condition name under which the per-run mean corruption error is listed.
pub const MCE_CONDITION: &str = "mce";

/// One loaded run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub run_name: String,
    pub method: String,
    pub seed: Option<u64>,
    /// `None` when `eval.csv` is missing or unreadable.
    pub eval: Option<Vec<EvalRow>>,
    pub problem: Option<String>,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let config_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let config = ExperimentConfig::from_toml(&text)?;
        let method = serde_json::to_value(config.method)?
            .as_str()
            .unwrap_or_default()
            .to_string();
        let (eval, problem) = match read_csv::<EvalRow>(&dir.join(EVAL_FILE)) {
            Ok(rows) if !rows.is_empty() => (Some(rows), None),
            Ok(_) => (None, Some("eval.csv is empty".to_string())),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            run_name: config.run_name,
            method,
            seed: config.seeds.first().copied(),
            eval,
            problem,
        })
    }

    /// Error per condition, plus `mce` when corruption rows exist.
    pub fn errors(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        let Some(rows) = &self.eval else {
            return out;
        };
        let mut corrupt = Vec::new();
        for r in rows {
            if r.condition.starts_with("corrupt:") {
                corrupt.push(r.top1_error);
            }
            out.insert(r.condition.clone(), r.top1_error);
        }
        if let Ok(m) = mce_from_errors(&corrupt) {
            out.insert(MCE_CONDITION.to_string(), m);
        }
        out
    }
}

/// Aggregate of one condition over the complete runs of one run name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_name: String,
    pub method: String,
    pub condition: String,
    pub n_runs: usize,
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
    /// Runs of this name lacking a final evaluation.
    pub incomplete_runs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    pub runs: Vec<RunRecord>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn condition_rank(c: &str) -> (u8, &str) {
    let group = match c {
        "clean" => 0,
        _ if c.starts_with("attack:") => 1,
        _ if c.starts_with("corrupt:") => 2,
        MCE_CONDITION => 3,
        _ => 4,
    };
    (group, c)
}

/// Summarizes run directories grouped by run name. Runs without a final
/// evaluation are counted per group and listed, never silently dropped.
pub fn report(dirs: &[PathBuf]) -> Result<Report> {
    let runs = dirs.iter().map(|d| RunRecord::load(d)).collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in &runs {
        groups.entry((r.run_name.clone(), r.method.clone())).or_default().push(r);
    }
    let mut rows = Vec::new();
    for ((run_name, method), members) in groups {
        let incomplete = members.iter().filter(|r| r.eval.is_none()).count();
        let mut per_condition: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in members.iter().filter(|r| r.eval.is_some()) {
            for (c, e) in r.errors() {
                per_condition.entry(c).or_default().push(e);
            }
        }
        let mut conditions: Vec<(String, Vec<f64>)> = per_condition.into_iter().collect();
        conditions.sort_by(|a, b| condition_rank(&a.0).cmp(&condition_rank(&b.0)));
        if conditions.is_empty() {
            rows.push(SummaryRow {
                run_name: run_name.clone(),
                method: method.clone(),
                condition: "-".into(),
                n_runs: 0,
                mean: f64::NAN,
                std: f64::NAN,
                incomplete_runs: incomplete,
            });
        }
        for (condition, values) in conditions {
            let (mean, std) = mean_std(&values);
            rows.push(SummaryRow {
                run_name: run_name.clone(),
                method: method.clone(),
                condition,
                n_runs: values.len(),
                mean,
                std,
                incomplete_runs: incomplete,
            });
        }
    }
    Ok(Report { rows, runs })
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:<9} {:<28} {:>4} {:>9} {:>9} {:>10}",
            "run", "method", "condition", "n", "mean", "std", "incomplete"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:<9} {:<28} {:>4} {:>9.4} {:>9.4} {:>10}",
                r.run_name, r.method, r.condition, r.n_runs, r.mean, r.std, r.incomplete_runs
            );
        }
        for run in self.runs.iter().filter(|r| r.eval.is_none()) {
            let _ = writeln!(
                out,
                "INCOMPLETE {}: {}",
                run.dir.display(),
                run.problem.as_deref().unwrap_or("no evaluation")
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::experiment::write_csv(path, &self.rows)
    }
}

/// Top-1 error for one condition recomputed from `predictions.csv`.
pub fn error_from_predictions(run_dir: &Path, condition: &str) -> Result<f64> {
    let rows: Vec<PredictionRow> = read_csv(&run_dir.join(PREDICTIONS_FILE))?;
    let (wrong, total) = rows
        .iter()
        .filter(|r| r.condition == condition)
        .fold((0usize, 0usize), |(w, t), r| (w + usize::from(r.label != r.prediction), t + 1));
    if total == 0 {
        return Err(Error::InvalidArgument(format!("no predictions for '{condition}'")));
    }
    Ok(wrong as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[0.1, 0.2, 0.3]);
        assert!((m - 0.2).abs() < 1e-12);
        assert!((s - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
    }

    #[test]
    fn condition_order() {
        let mut c = vec!["mce", "corrupt:a:1", "attack:fgsm:0.1:1", "clean"];
        c.sort_by(|a, b| condition_rank(a).cmp(&condition_rank(b)));
        assert_eq!(c, vec!["clean", "attack:fgsm:0.1:1", "corrupt:a:1", "mce"]);
    }
}
