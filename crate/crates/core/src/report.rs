//! Machine-readable run outputs. Everything here is a pure function of a
//! [`RunState`], so re-emitting from a checkpoint reproduces the files.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::Mode;
use crate::controller::{Diagnostics, Escalation, Phase, QueryRecord, RunState, Stage};
use crate::error::{Error, Result};
use crate::representation::{mean_pairwise_similarity, Alphabet, Sequence};

/// Mean, sample standard deviation and the three best (lowest) scores.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    /// Best first.
    pub top: Vec<f64>,
}

impl ScoreSummary {
    pub fn of(scores: &[f64]) -> Self {
        let n = scores.len();
        let mean = if n == 0 { f64::NAN } else { scores.iter().sum::<f64>() / n as f64 };
        let sd = if n < 2 {
            0.0
        } else {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        let mut top = scores.to_vec();
        top.sort_by(f64::total_cmp);
        top.truncate(3);
        Self { n, mean, sd, top }
    }

    pub fn top_mean(&self) -> f64 {
        self.top.iter().sum::<f64>() / self.top.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalDesign {
    pub sequence: String,
    pub score: Option<f64>,
    pub true_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub complete: bool,
    pub finals: Vec<FinalDesign>,
    pub summary: ScoreSummary,
    /// Finals short of the requested count.
    pub final_shortfall: usize,
    pub final_similarity: f64,
    pub steps: usize,
    pub final_level: usize,
    pub spent: f64,
    pub max_cost: f64,
    pub evaluation_spent: f64,
    /// Budget-account queries per oracle fidelity.
    pub queries: Vec<u64>,
    pub escalations: Vec<Escalation>,
    pub diagnostics: Diagnostics,
    /// Resolved configuration; loading it reproduces the run.
    pub config_toml: String,
}

impl RunReport {
    pub fn from_state(state: &RunState) -> Result<Self> {
        let cfg = &state.config;
        let alphabet = Alphabet::with_size(cfg.env.alphabet_size)?;
        let finals: Vec<FinalDesign> = state
            .finals()
            .map(|r| FinalDesign { sequence: r.sequence.clone(), score: r.score, true_score: r.true_score })
            .collect();
        let scores: Vec<f64> = finals.iter().filter_map(|f| f.score).collect();
        let seqs = finals
            .iter()
            .map(|f| Sequence::parse(&f.sequence, &alphabet))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode: cfg.mode,
            seed: cfg.seed,
            complete: state.stage == Stage::Done,
            summary: ScoreSummary::of(&scores),
            final_shortfall: state.diagnostics.final_shortfall,
            final_similarity: mean_pairwise_similarity(&seqs),
            finals,
            steps: state.step,
            final_level: state.level,
            spent: state.ledger.spent(),
            max_cost: cfg.budget.max_cost,
            evaluation_spent: state.ledger.evaluation_spent(),
            queries: state.ledger.budget_counts.clone(),
            escalations: state.escalations.clone(),
            diagnostics: state.diagnostics.clone(),
            config_toml: cfg.to_toml(),
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub const SUMMARY_HEADER: [&str; 10] =
    ["mode", "seed", "n", "mean", "sd", "first", "second", "third", "similarity", "shortfall"];

/// One row per report, keyed by mode and seed.
pub fn write_summary(reports: &[RunReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    for r in reports {
        let s = &r.summary;
        let top = |i: usize| s.top.get(i).map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.mode.to_string(),
            r.seed.to_string(),
            s.n.to_string(),
            s.mean.to_string(),
            s.sd.to_string(),
            top(0),
            top(1),
            top(2),
            r.final_similarity.to_string(),
            r.final_shortfall.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub const TRACE_HEADER: [&str; 12] = [
    "step",
    "phase",
    "source",
    "level",
    "fidelity",
    "sequence",
    "score",
    "error",
    "cost",
    "spent",
    "true_score",
    "relative_variance",
];

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Seed => "seed",
        Phase::Active => "active",
        Phase::Final => "final",
    }
}

pub fn write_trace_csv(records: &[QueryRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    for r in records {
        let source = serde_json::to_value(r.source).expect("enum serializes");
        w.write_record([
            r.step.to_string(),
            phase_name(r.phase).to_string(),
            source.as_str().unwrap_or_default().to_string(),
            r.level.to_string(),
            r.fidelity.to_string(),
            r.sequence.clone(),
            fmt_opt(r.score),
            r.error.clone().unwrap_or_default(),
            r.cost.to_string(),
            r.spent.to_string(),
            fmt_opt(r.true_score),
            fmt_opt(r.relative_variance),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_jsonl(records: &[QueryRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Io(e.into()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Active-learning query scores per oracle fidelity, with the running best.
pub fn write_series(records: &[QueryRecord], fidelities: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["fidelity", "step", "score", "best_so_far"]).map_err(csv_err)?;
    for f in 1..=fidelities {
        let mut best = f64::INFINITY;
        for r in records.iter().filter(|r| r.phase == Phase::Active && r.fidelity == f) {
            let Some(s) = r.score else { continue };
            best = best.min(s);
            w.write_record([f.to_string(), r.step.to_string(), s.to_string(), best.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json`, `config.toml`, `summary.csv`, `trace.csv`,
/// `trace.jsonl` and `series.csv` into `dir`.
pub fn emit_report(state: &RunState, dir: &Path) -> Result<RunReport> {
    fs::create_dir_all(dir)?;
    let report = RunReport::from_state(state)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.into()))?;
    fs::write(dir.join("report.json"), json + "\n")?;
    fs::write(dir.join("config.toml"), &report.config_toml)?;
    write_summary(std::slice::from_ref(&report), &dir.join("summary.csv"))?;
    write_trace_csv(&state.records, &dir.join("trace.csv"))?;
    write_trace_jsonl(&state.records, &dir.join("trace.jsonl"))?;
    write_series(&state.records, state.config.env.fidelities(), &dir.join("series.csv"))?;
    Ok(report)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &t in &idx[i..=j] {
                r[t] = avg;
            }
            i = j + 1;
        }
        r
    }
    crate::oracles::pearson(&ranks(a), &ranks(b))
}
