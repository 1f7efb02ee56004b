//! Run records, per-step traces, seed aggregation and figure data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Rule, TaskKind};
use crate::error::{Error, Result};
use crate::meta_train::EvalResult;

pub const SCHEMA_VERSION: u32 = 1;

/// Slack on the logged gate bound `η·‖δ‖ ≤ η0·max_norm` for rounding.
pub const GATE_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    /// Training episodes consumed when the evaluation ran.
    pub episodes_seen: usize,
    pub end_of_epoch: bool,
    pub result: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub epoch: usize,
    pub index: usize,
    pub episode_seed: u64,
    pub meta_loss: f64,
    pub mean_eta: f64,
    /// Per plastic layer, the mean Frobenius norm over the episode.
    pub layer_norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub mean_eta: f64,
    pub mean_norm: f64,
    pub validation: EvalResult,
}

/// One per-step trace row of a training episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub episode: usize,
    pub t: usize,
    pub eta: f64,
    pub delta_norm: f64,
    pub norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub task: TaskKind,
    pub rule: Rule,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub parameter_count: usize,
    pub evals: Vec<EvalPoint>,
    pub epochs: Vec<EpochSummary>,
    pub episodes: Vec<EpisodeLog>,
    /// Last validation result.
    pub summary: Option<EvalResult>,
    pub completed: bool,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    /// The record with wall-clock fields zeroed, for replay comparisons.
    pub fn without_wall_clock(&self) -> RunRecord {
        RunRecord {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunRecord = serde_json::from_str(text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "record schema version {} is not supported (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// `η0` and `max_norm` from the config snapshot.
    fn gate_constants(&self) -> Option<(f64, f64)> {
        let m = self.config.get("model")?;
        Some((m.get("eta0")?.as_f64()?, m.get("max_norm")?.as_f64()?))
    }

    /// Re-checks every logged `η` against the gate bound.
    pub fn check_gate_bound(&self, trace: &[TraceRow]) -> Result<()> {
        let Some((eta0, max_norm)) = self.gate_constants() else {
            return Err(Error::Contract("record config lacks eta0/max_norm".into()));
        };
        let in_range = |eta: f64| (0.0..=eta0 + GATE_SLACK).contains(&eta);
        for e in &self.episodes {
            if !in_range(e.mean_eta) {
                return Err(Error::Contract(format!("episode {} logs η = {} outside [0, η0]", e.index, e.mean_eta)));
            }
        }
        for r in trace {
            if !in_range(r.eta) || r.eta * r.delta_norm > eta0 * max_norm + GATE_SLACK {
                return Err(Error::Contract(format!(
                    "step {} of episode {} violates the gate bound (η = {}, ‖δ‖ = {})",
                    r.t, r.episode, r.eta, r.delta_norm
                )));
            }
        }
        Ok(())
    }

    /// Writes `record.json` and `trace.csv` into `dir`, after re-checking
    /// the gate bound. Files are replaced atomically.
    pub fn write(&self, dir: &Path, trace: &[TraceRow]) -> Result<()> {
        self.check_gate_bound(trace)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("record.json"), &self.to_json()?)?;
        write_atomic(&dir.join("trace.csv"), &trace_csv(trace))
    }
}

/// Writes via a temporary sibling and a rename so a failed write never
/// leaves a truncated file behind.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let layers = trace.first().map_or(0, |r| r.norms.len());
    let mut s = String::from("epoch,episode,t,eta,delta_norm");
    for l in 0..layers {
        let _ = write!(s, ",norm_{l}");
    }
    s.push('\n');
    for r in trace {
        let _ = write!(s, "{},{},{},{:e},{:e}", r.epoch, r.episode, r.t, r.eta, r.delta_norm);
        for n in &r.norms {
            let _ = write!(s, ",{n:e}");
        }
        s.push('\n');
    }
    s
}

/// `<root>/runs/<task>/<rule>/<seed>`
pub fn run_dir(root: &Path, task: TaskKind, rule: Rule, seed: u64) -> PathBuf {
    root.join("runs").join(task.as_str()).join(rule.as_str()).join(seed.to_string())
}

pub fn report_dir(root: &Path) -> PathBuf {
    root.join("report")
}

/// Every `record.json` below `root`, in sorted path order.
pub fn find_records(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "record.json") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Mean and sample standard deviation; the std is 0 for a single value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Pooled standard deviation of two groups.
pub fn pooled_std(s1: f64, n1: usize, s2: f64, n2: usize) -> f64 {
    if n1 + n2 <= 2 {
        return 0.0;
    }
    let num = (n1.saturating_sub(1)) as f64 * s1 * s1 + (n2.saturating_sub(1)) as f64 * s2 * s2;
    (num / (n1 + n2 - 2) as f64).sqrt()
}

/// A difference counts only when it exceeds the pooled standard deviation.
pub fn reliable(mean_diff: f64, pooled: f64) -> bool {
    mean_diff.abs() > pooled
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: TaskKind,
    pub rule: Rule,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    /// Fewer than two seeds: the std is not meaningful.
    pub std_flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task: TaskKind,
    pub rule: Rule,
    pub metric: String,
    /// Mean of `rule` minus mean of the `none` baseline.
    pub diff: f64,
    pub pooled_std: f64,
    pub reliable: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub rows: Vec<AggregateRow>,
    pub comparisons: Vec<Comparison>,
}

/// The per-seed values a report summarises.
fn record_metrics(r: &RunRecord) -> Result<Vec<(String, f64)>> {
    let s = r
        .summary
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("run {}/{}/{} has no validation result", r.task, r.rule, r.seed)))?;
    Ok(vec![
        ("loss".into(), s.loss),
        (r.task.metric_name().into(), s.metric),
        ("mean_eta".into(), s.mean_eta),
        ("mean_norm".into(), s.mean_norm),
    ])
}

fn rule_order(r: Rule) -> usize {
    Rule::ALL.iter().position(|&x| x == r).unwrap_or(usize::MAX)
}

/// Mean ± std over seeds per (task, rule) and the reliability of each
/// plastic rule against `none`. Within a (task, rule) group every record
/// must share one configuration hash.
pub fn aggregate(records: &[RunRecord]) -> Result<AggregateReport> {
    let mut groups: BTreeMap<(TaskKind, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.task, rule_order(r.rule))).or_default().push(r);
    }
    let mut report = AggregateReport::default();
    let mut stats: BTreeMap<(TaskKind, Rule, String), (f64, f64, usize)> = BTreeMap::new();
    for ((task, _), mut group) in groups {
        group.sort_by_key(|r| r.seed);
        let hash = &group[0].config_hash;
        if let Some(odd) = group.iter().find(|r| &r.config_hash != hash) {
            return Err(Error::Contract(format!(
                "mixed configurations for {task}/{}: seed {} differs from seed {}",
                odd.rule, odd.seed, group[0].seed
            )));
        }
        for pair in group.windows(2) {
            if pair[0].seed == pair[1].seed {
                return Err(Error::Contract(format!("seed {} appears twice for {task}/{}", pair[0].seed, pair[0].rule)));
            }
        }
        let rule = group[0].rule;
        let per_seed: Vec<Vec<(String, f64)>> = group.iter().map(|r| record_metrics(r)).collect::<Result<_>>()?;
        for (k, (name, _)) in per_seed[0].iter().enumerate() {
            let xs: Vec<f64> = per_seed.iter().map(|m| m[k].1).collect();
            let (mean, std) = mean_std(&xs);
            stats.insert((task, rule, name.clone()), (mean, std, xs.len()));
            report.rows.push(AggregateRow {
                task,
                rule,
                metric: name.clone(),
                mean,
                std,
                n_seeds: xs.len(),
                std_flagged: xs.len() < 2,
            });
        }
    }
    for row in &report.rows {
        if row.rule == Rule::None || row.metric == "mean_eta" || row.metric == "mean_norm" {
            continue;
        }
        if let Some(&(bm, bs, bn)) = stats.get(&(row.task, Rule::None, row.metric.clone())) {
            let diff = row.mean - bm;
            let pooled = pooled_std(row.std, row.n_seeds, bs, bn);
            report.comparisons.push(Comparison {
                task: row.task,
                rule: row.rule,
                metric: row.metric.clone(),
                diff,
                pooled_std: pooled,
                reliable: reliable(diff, pooled),
            });
        }
    }
    Ok(report)
}

impl AggregateReport {
    pub fn row(&self, task: TaskKind, rule: Rule, metric: &str) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.rule == rule && r.metric == metric)
    }

    /// One table per task, rows by rule, `mean ± std` cells; a `*` marks
    /// a std over fewer than two seeds.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut tasks: Vec<TaskKind> = self.rows.iter().map(|r| r.task).collect();
        tasks.dedup();
        for task in tasks {
            let metrics = ["loss", task.metric_name(), "mean_eta", "mean_norm"];
            let _ = writeln!(out, "{task}");
            let _ = write!(out, "{:<10}", "rule");
            for m in metrics {
                let _ = write!(out, " {m:>26}");
            }
            out.push('\n');
            for rule in Rule::ALL {
                if self.row(task, rule, "loss").is_none() {
                    continue;
                }
                let _ = write!(out, "{:<10}", rule.as_str());
                for m in metrics {
                    let cell = match self.row(task, rule, m) {
                        Some(r) => format!(
                            "{:.4e} ± {:.2e}{}",
                            r.mean,
                            r.std,
                            if r.std_flagged { "*" } else { "" }
                        ),
                        None => "-".into(),
                    };
                    let _ = write!(out, " {cell:>26}");
                }
                out.push('\n');
            }
            for c in self.comparisons.iter().filter(|c| c.task == task) {
                let _ = writeln!(
                    out,
                    "  {} vs none on {}: diff {:+.4e}, pooled std {:.4e} → {}",
                    c.rule,
                    c.metric,
                    c.diff,
                    c.pooled_std,
                    if c.reliable { "reliable" } else { "within noise" }
                );
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,rule,metric,mean,std,n_seeds,std_flagged\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:e},{:e},{},{}",
                r.task, r.rule, r.metric, r.mean, r.std, r.n_seeds, r.std_flagged
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// One row per (task, rule, metric) of final validation values.
    SummaryBars,
    /// One row per (task, rule, epoch) for the η and norm series.
    MechTraces,
}

pub const PLOT_HEADER: &str = "series,x,mean,std";
pub const EMPTY_MARKER: &str = "# empty: no records";

/// CSV `series,x,mean,std` for regenerating the summary and mechanism
/// figures with any plotting tool.
pub fn export_plot_data(records: &[RunRecord], kind: PlotKind) -> Result<String> {
    let mut s = format!("{PLOT_HEADER}\n");
    if records.is_empty() {
        s.push_str(EMPTY_MARKER);
        s.push('\n');
        return Ok(s);
    }
    match kind {
        PlotKind::SummaryBars => {
            let report = aggregate(records)?;
            for r in &report.rows {
                let _ = writeln!(s, "{}/{}/{},0,{:e},{:e}", r.task, r.rule, r.metric, r.mean, r.std);
            }
        }
        PlotKind::MechTraces => {
            let mut groups: BTreeMap<(TaskKind, usize), Vec<&RunRecord>> = BTreeMap::new();
            for r in records {
                groups.entry((r.task, rule_order(r.rule))).or_default().push(r);
            }
            for ((task, _), mut group) in groups {
                group.sort_by_key(|r| r.seed);
                let rule = group[0].rule;
                let epochs = group.iter().map(|r| r.epochs.len()).min().unwrap_or(0);
                for (series, pick) in [
                    ("eta", (|e: &EpochSummary| e.mean_eta) as fn(&EpochSummary) -> f64),
                    ("norm", |e: &EpochSummary| e.mean_norm),
                ] {
                    for ep in 0..epochs {
                        let xs: Vec<f64> = group.iter().map(|r| pick(&r.epochs[ep])).collect();
                        let (m, sd) = mean_std(&xs);
                        let _ = writeln!(s, "{task}/{rule}/{series},{},{m:e},{sd:e}", ep + 1);
                    }
                }
            }
        }
    }
    Ok(s)
}
