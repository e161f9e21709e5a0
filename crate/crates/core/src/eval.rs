//! Scoring, rank-sum AUC and multi-seed aggregation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{DraError, Result};
use crate::heads::HeadScores;
use crate::model::DraModel;
use crate::protocols::{ImageProvider, SplitResult};

/// One scored test image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub id: String,
    /// 0 normal, 1 anomaly.
    pub label: u8,
    pub class: Option<String>,
    pub score: f64,
    pub per_scale: Vec<HeadScores>,
}

/// Scores every test image of `split`: normals first, then anomalies.
pub fn score_dataset(model: &DraModel, split: &SplitResult, images: &dyn ImageProvider) -> Result<Vec<ScoredExample>> {
    let normals = split.test_normals.iter().map(|id| (id, 0u8, None));
    let anomalies = split.test_anomalies.iter().map(|a| (&a.id, 1u8, Some(a.class.clone())));
    normals
        .chain(anomalies)
        .map(|(id, label, class)| {
            let s = model
                .score(&images.load(id)?)
                .map_err(|e| DraError::Input(format!("scoring `{id}`: {e}")))?;
            Ok(ScoredExample {
                id: id.clone(),
                label,
                class,
                score: s.composite,
                per_scale: s.per_scale,
            })
        })
        .collect()
}

/// Probability that a random anomaly outranks a random normal, ties
/// credited one half, via the rank-sum statistic.
pub fn auc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DraError::Input(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(DraError::Numeric(format!("score {s} is not finite")));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DraError::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} anomalies and {n_neg} normals"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based, tie-averaged) ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn auc(scored: &[ScoredExample]) -> Result<f64> {
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.label == 1).collect();
    auc_scores(&scores, &labels)
}

/// Result of one (dataset, protocol, shots, preset, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub subset: String,
    pub protocol: String,
    pub shots: usize,
    pub preset: String,
    pub seed: u64,
    pub auc: f64,
    pub seconds: f64,
    pub config_hash: String,
}

/// Mean and population standard deviation of AUC over a group of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: String,
    pub subset: String,
    pub protocol: String,
    pub shots: usize,
    pub preset: String,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub n_runs: usize,
    /// Fewer than two runs in the group.
    pub low_replication: bool,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, crate::math::sqrt(var))
}

/// Groups by (dataset, subset, protocol, shots, preset), in sorted key order.
pub fn aggregate_runs(reports: &[RunReport]) -> Vec<RunSummary> {
    let mut groups: BTreeMap<(String, String, String, usize, String), Vec<f64>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.dataset.clone(), r.subset.clone(), r.protocol.clone(), r.shots, r.preset.clone()))
            .or_default()
            .push(r.auc);
    }
    groups
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|((dataset, subset, protocol, shots, preset), aucs)| {
            let (mean_auc, std_auc) = mean_std(&aucs);
            RunSummary {
                dataset,
                subset,
                protocol,
                shots,
                preset,
                mean_auc,
                std_auc,
                n_runs: aucs.len(),
                low_replication: aucs.len() < 2,
            }
        })
        .collect()
}

/// Dataset-level rows: the uniform mean over subsets of the per-subset means.
/// The reported std is that of the subset means; `n_runs` is the number of
/// subsets.
pub fn aggregate_subsets(summaries: &[RunSummary]) -> Vec<RunSummary> {
    let mut groups: BTreeMap<(String, String, usize, String), Vec<f64>> = BTreeMap::new();
    for s in summaries {
        groups
            .entry((s.dataset.clone(), s.protocol.clone(), s.shots, s.preset.clone()))
            .or_default()
            .push(s.mean_auc);
    }
    groups
        .into_iter()
        .map(|((dataset, protocol, shots, preset), means)| {
            let (mean_auc, std_auc) = mean_std(&means);
            RunSummary {
                dataset,
                subset: String::from("*"),
                protocol,
                shots,
                preset,
                mean_auc,
                std_auc,
                n_runs: means.len(),
                low_replication: means.len() < 2,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    fn report(auc: f64, seed: u64) -> RunReport {
        RunReport {
            dataset: "d".into(),
            subset: "s".into(),
            protocol: "general".into(),
            shots: 10,
            preset: "DRA".into(),
            seed,
            auc,
            seconds: 0.0,
            config_hash: String::new(),
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_scores(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc_scores(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(auc_scores(&[1.0, 0.0], &[false, true]).unwrap(), 0.0);
        assert!(matches!(auc_scores(&[1.0, 2.0], &[true, true]), Err(DraError::UndefinedMetric(_))));
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate_runs(&[report(0.9, 0), report(0.9, 1), report(0.9, 2)]);
        assert_eq!(s.len(), 1);
        assert!((s[0].mean_auc - 0.9).abs() < 1e-15 && s[0].std_auc < 1e-15);
        let s = aggregate_runs(&[report(0.8, 0), report(1.0, 1)]);
        assert!((s[0].mean_auc - 0.9).abs() < 1e-15);
        assert!((s[0].std_auc - 0.1).abs() < 1e-12);
        let s = aggregate_runs(&[report(0.7, 0)]);
        assert_eq!(s[0].std_auc, 0.0);
        assert!(s[0].low_replication);
    }

    #[test]
    fn subsets_average_uniformly() {
        let mut a = report(0.8, 0);
        a.subset = "a".into();
        let mut b = report(1.0, 0);
        b.subset = "b".into();
        let mut b2 = report(1.0, 1);
        b2.subset = "b".into();
        let top = aggregate_subsets(&aggregate_runs(&[a, b, b2]));
        assert_eq!(top.len(), 1);
        assert!((top[0].mean_auc - 0.9).abs() < 1e-15);
        assert_eq!(top[0].n_runs, 2);
    }
}
