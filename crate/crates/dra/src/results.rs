//! Delimited-text result tables and the line-delimited training log.

use std::fs;
use std::io::Write;
use std::path::Path;

use dra_core::eval::{RunReport, RunSummary, ScoredExample};
use dra_core::trainer::TrainingLog;
use dra_core::HeadKind;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};

pub const RESULT_COLUMNS: [&str; 8] = ["dataset", "subset", "protocol", "shots", "preset", "seed", "auc", "seconds"];
pub const SUMMARY_COLUMNS: [&str; 8] = [
    "dataset", "subset", "protocol", "shots", "preset", "mean_auc", "std_auc", "n_runs",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub subset: String,
    pub protocol: String,
    pub shots: usize,
    pub preset: String,
    pub seed: u64,
    pub auc: f64,
    pub seconds: f64,
}

impl From<&RunReport> for ResultRow {
    fn from(r: &RunReport) -> Self {
        Self {
            dataset: r.dataset.clone(),
            subset: r.subset.clone(),
            protocol: r.protocol.clone(),
            shots: r.shots,
            preset: r.preset.clone(),
            seed: r.seed,
            auc: r.auc,
            seconds: r.seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub subset: String,
    pub protocol: String,
    pub shots: usize,
    pub preset: String,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub n_runs: usize,
}

impl From<&RunSummary> for SummaryRow {
    fn from(s: &RunSummary) -> Self {
        Self {
            dataset: s.dataset.clone(),
            subset: s.subset.clone(),
            protocol: s.protocol.clone(),
            shots: s.shots,
            preset: s.preset.clone(),
            mean_auc: s.mean_auc,
            std_auc: s.std_auc,
            n_runs: s.n_runs,
        }
    }
}

pub fn write_results(reports: &[RunReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(ResultRow::from(r))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_summary(summaries: &[RunSummary], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in summaries {
        if s.low_replication {
            log::warn!(
                "{}/{} {} {}-shot {}: a single run, std is not meaningful",
                s.dataset,
                s.subset,
                s.protocol,
                s.shots,
                s.preset
            );
        }
        w.serialize(SummaryRow::from(s))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// One row per test image with the composite score and every head's score
/// at every scale. Disabled heads leave their cells empty.
pub fn write_scores(scored: &[ScoredExample], path: &Path) -> Result<()> {
    let scales = scored.first().map_or(0, |s| s.per_scale.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["id", "label", "class", "score"].map(String::from).to_vec();
    for level in 0..scales {
        header.extend(HeadKind::ALL.iter().map(|h| format!("s{level}_{}", h.name())));
    }
    w.write_record(&header)?;
    for s in scored {
        let mut row = vec![
            s.id.clone(),
            s.label.to_string(),
            s.class.clone().unwrap_or_default(),
            s.score.to_string(),
        ];
        for hs in &s.per_scale {
            row.extend(HeadKind::ALL.iter().map(|h| hs.get(*h).map(|v| v.to_string()).unwrap_or_default()));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[derive(Serialize)]
struct LogLine<'a> {
    epoch: usize,
    mean_loss: f64,
    per_head_losses: &'a dra_core::losses::LossBreakdown,
}

pub fn write_training_log(log: &TrainingLog, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for r in &log.epochs {
        let line = serde_json::to_string(&LogLine {
            epoch: r.epoch,
            mean_loss: r.mean_loss,
            per_head_losses: &r.per_head,
        })?;
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dra_core::HeadScores;

    #[test]
    fn results_table_has_the_documented_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let r = RunReport {
            dataset: "synthetic".into(),
            subset: "synth32".into(),
            protocol: "hard".into(),
            shots: 10,
            preset: "DRA".into(),
            seed: 2,
            auc: 0.875,
            seconds: 0.0,
            config_hash: "ab".into(),
        };
        write_results(std::slice::from_ref(&r), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), RESULT_COLUMNS.join(","));
        assert_eq!(read_results(&p).unwrap(), vec![ResultRow::from(&r)]);
    }

    #[test]
    fn scores_leave_disabled_heads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let hs = HeadScores {
            seen: Some(1.5),
            ..HeadScores::default()
        };
        let s = ScoredExample {
            id: "test/good/0".into(),
            label: 0,
            class: None,
            score: 1.5,
            per_scale: vec![hs, hs],
        };
        write_scores(&[s], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "id,label,class,score,s0_seen,s0_pseudo,s0_residual,s0_normal,s1_seen,s1_pseudo,s1_residual,s1_normal"
        );
        assert_eq!(lines.next().unwrap(), "test/good/0,0,,1.5,1.5,,,,1.5,,,");
    }
}
