//! Per-checkpoint BLEU bookkeeping, forgetting deltas and report files.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_synth::GENERAL;
use crate::error::{Error, Result};

/// One BLEU measurement. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub config: String,
    /// Index of the adaptation step (0 for plain configuration runs).
    pub adapt_step: usize,
    /// Optimizer steps taken so far in the run, across all stages.
    pub train_step: usize,
    pub test_set: String,
    pub bleu: f64,
}

/// What one training stage did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub run_id: String,
    pub config: String,
    pub adapt_step: usize,
    pub stage: usize,
    pub steps: usize,
    /// Sampled task count per task name (`supervised`, `mass`, `bt`) and
    /// domain, keyed `task:domain`.
    pub task_counts: BTreeMap<String, usize>,
    /// Mean training loss over the last (up to 100) steps.
    pub final_loss: f64,
}

/// Final scores of one run in the "in-domain (general)" shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub config: String,
    /// Mean final BLEU over the run's non-general test sets.
    pub in_domain: Option<f64>,
    /// Mean final BLEU over the general test sets.
    pub general: Option<f64>,
    pub display: String,
}

/// Append-only collection of metrics rows, one per (run, adaptation step,
/// training step, test set).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    rows: Vec<MetricsRow>,
    #[serde(default)]
    stages: Vec<StageLog>,
}

pub const CSV_HEADER: &str = "run_id,config,adapt_step,train_step,test_set,bleu";

/// True for test sets of the general domain (`general.src-tgt`, ...).
pub fn is_general_test_set(id: &str) -> bool {
    id.split('.').next() == Some(GENERAL)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    PlotCsv,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn stages(&self) -> &[StageLog] {
        &self.stages
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        let dup = self.rows.iter().any(|r| {
            r.run_id == row.run_id
                && r.adapt_step == row.adapt_step
                && r.train_step == row.train_step
                && r.test_set == row.test_set
        });
        if dup {
            return Err(Error::Invalid(format!(
                "duplicate metrics row for run {} step {}/{} test set {}",
                row.run_id, row.adapt_step, row.train_step, row.test_set
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn push_stage(&mut self, log: StageLog) {
        self.stages.push(log);
    }

    /// Appends every row and stage log of `other`.
    pub fn extend(&mut self, other: MetricsReport) -> Result<()> {
        for r in other.rows {
            self.push(r)?;
        }
        self.stages.extend(other.stages);
        Ok(())
    }

    /// Run ids in order of first appearance.
    pub fn run_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.rows
            .iter()
            .map(|r| r.run_id.as_str())
            .filter(|id| seen.insert(*id))
            .collect()
    }

    /// BLEU per test set at the run's last evaluated checkpoint.
    pub fn final_scores(&self, run_id: &str) -> Result<BTreeMap<String, f64>> {
        self.scores_at(run_id, None)
    }

    /// BLEU per test set at the last checkpoint of adaptation step
    /// `adapt_step` (or of the whole run when `None`).
    pub fn scores_at(&self, run_id: &str, adapt_step: Option<usize>) -> Result<BTreeMap<String, f64>> {
        let rows: Vec<&MetricsRow> = self
            .rows
            .iter()
            .filter(|r| r.run_id == run_id && adapt_step.is_none_or(|a| r.adapt_step == a))
            .collect();
        let last = rows
            .iter()
            .map(|r| (r.adapt_step, r.train_step))
            .max()
            .ok_or_else(|| Error::Invalid(format!("no metrics for run `{run_id}`")))?;
        Ok(rows
            .into_iter()
            .filter(|r| (r.adapt_step, r.train_step) == last)
            .map(|r| (r.test_set.clone(), r.bleu))
            .collect())
    }

    /// Final BLEU of `run` minus final BLEU of `baseline`, per test set.
    pub fn forgetting_delta(&self, run_id: &str, baseline_run: &str) -> Result<BTreeMap<String, f64>> {
        let run = self.final_scores(run_id)?;
        let base = self.final_scores(baseline_run)?;
        let sets: BTreeSet<&String> = run.keys().chain(base.keys()).collect();
        sets.into_iter()
            .map(|t| match (run.get(t), base.get(t)) {
                (Some(a), Some(b)) => Ok((t.clone(), a - b)),
                _ => Err(Error::MissingTestSet(t.clone())),
            })
            .collect()
    }

    pub fn summary(&self) -> Result<Vec<SummaryRow>> {
        self.run_ids()
            .into_iter()
            .map(|run| {
                let scores = self.final_scores(run)?;
                let (general, in_domain): (Vec<_>, Vec<_>) = scores.iter().partition(|(t, _)| is_general_test_set(t));
                let in_domain = mean(&in_domain.into_iter().map(|(_, &b)| b).collect::<Vec<_>>());
                let general = mean(&general.into_iter().map(|(_, &b)| b).collect::<Vec<_>>());
                let fmt = |x: Option<f64>| x.map_or("-".to_string(), |b| format!("{b:.1}"));
                let config = self.rows.iter().find(|r| r.run_id == run).map(|r| r.config.clone()).unwrap_or_default();
                Ok(SummaryRow {
                    run_id: run.to_string(),
                    config,
                    display: format!("{} ({})", fmt(in_domain), fmt(general)),
                    in_domain,
                    general,
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(format!("{CSV_HEADER}\n{}", String::from_utf8_lossy(&body)))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rd
            .headers()
            .map_err(|e| Error::Invalid(e.to_string()))?
            .iter()
            .map(String::from)
            .collect();
        if header.join(",") != CSV_HEADER {
            return Err(Error::Invalid(format!("unexpected metrics header {header:?}")));
        }
        let mut report = MetricsReport::new();
        for row in rd.deserialize() {
            report.push(row.map_err(|e| Error::Invalid(e.to_string()))?)?;
        }
        Ok(report)
    }

    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::json!({
            "rows": self.rows,
            "stages": self.stages,
            "summary": self.summary()?,
        });
        Ok(serde_json::to_string_pretty(&value)?)
    }

    /// Wide per-step curves: one line per (run, adaptation step, training
    /// step), one column per test set.
    pub fn to_plot_csv(&self) -> String {
        let sets: BTreeSet<&str> = self.rows.iter().map(|r| r.test_set.as_str()).collect();
        let mut points: BTreeMap<(&str, usize, usize), BTreeMap<&str, f64>> = BTreeMap::new();
        for r in &self.rows {
            points
                .entry((r.run_id.as_str(), r.adapt_step, r.train_step))
                .or_default()
                .insert(r.test_set.as_str(), r.bleu);
        }
        let mut out = String::from("run_id,adapt_step,train_step");
        for s in &sets {
            out.push(',');
            out.push_str(s);
        }
        out.push('\n');
        for ((run, a, t), vals) in points {
            out.push_str(&format!("{run},{a},{t}"));
            for s in &sets {
                out.push(',');
                if let Some(b) = vals.get(s) {
                    out.push_str(&b.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Writes the report in each requested format into `dir` as
/// `metrics.csv`, `metrics.json` and `curves.csv`. Returns the paths.
pub fn emit_report(report: &MetricsReport, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for &f in formats {
        let (name, text) = match f {
            ReportFormat::Csv => ("metrics.csv", report.to_csv()?),
            ReportFormat::Json => ("metrics.json", report.to_json()?),
            ReportFormat::PlotCsv => ("curves.csv", report.to_plot_csv()),
        };
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
