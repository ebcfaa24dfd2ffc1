//! Evaluation: outage and correlation metrics on post-warm-up samples,
//! windowed pooling baselines and the grouped leave-one-out protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ident::{outage_rate, predict_pinned, train, TrainConfig, TraceRecord, TrainingDataset};
use crate::model::{HwParams, InitPolicy, PredictedTrace, StsqTrace};

/// Window length of the pooling baselines (seconds). A pooled prediction at
/// second t summarizes the trailing window `stsq[t-11..=t]`.
pub const POOL_WINDOW: usize = 12;

/// Pooling statistic applied over the trailing window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Min,
    Median,
    Mean,
}

impl PoolKind {
    pub const ALL: [PoolKind; 4] = [PoolKind::Max, PoolKind::Min, PoolKind::Median, PoolKind::Mean];

    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Max => "max",
            PoolKind::Min => "min",
            PoolKind::Median => "median",
            PoolKind::Mean => "mean",
        }
    }
}

/// Metrics of one prediction/measurement pair. Correlations are `None` when
/// undefined (constant inputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub outage: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub n_samples: usize,
}

/// Dataset-level evaluation: per-trace metrics, their means, and metrics on
/// the concatenated post-warm-up samples of all traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_trace: Vec<TraceMetrics>,
    pub mean_outage: f64,
    pub mean_pearson: Option<f64>,
    pub mean_spearman: Option<f64>,
    pub pooled: TraceMetrics,
    pub warnings: Vec<String>,
}

/// Pearson linear correlation; `None` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Ranks with ties sharing the average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling; `None` when a
/// series is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Baseline prediction pooling the trailing `window` STSQ samples.
///
/// Seconds before a full window (the first `window - 1`) are flagged as
/// warm-up and filled with the statistic over the partial prefix window.
pub fn pool_trace(stsq: &StsqTrace, window: usize, kind: PoolKind) -> Result<PredictedTrace> {
    if window == 0 || window > stsq.len() {
        return Err(Error::Contract(format!(
            "pool window {window} invalid for a trace of length {}",
            stsq.len()
        )));
    }
    let values: Vec<f64> = (0..stsq.len())
        .map(|t| {
            let start = (t + 1).saturating_sub(window);
            pool_stat(&stsq.values[start..=t], kind)
        })
        .collect();
    Ok(PredictedTrace {
        values,
        warmup: window - 1,
        init_policy: InitPolicy::ZeroState,
    })
}

fn pool_stat(window: &[f64], kind: PoolKind) -> f64 {
    match kind {
        PoolKind::Max => window.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        PoolKind::Min => window.iter().copied().fold(f64::INFINITY, f64::min),
        PoolKind::Mean => window.iter().sum::<f64>() / window.len() as f64,
        PoolKind::Median => {
            let mut sorted = window.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            if n % 2 == 1 {
                sorted[n / 2]
            } else {
                (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
            }
        }
    }
}

fn metrics_for(pred: &PredictedTrace, item: &TraceRecord, warnings: &mut Vec<String>, label: &str) -> Result<TraceMetrics> {
    let warmup = pred.warmup;
    let outage = outage_rate(pred, &item.tvsq, warmup)?;
    let x = &pred.values[warmup..];
    let y = &item.tvsq.values[warmup..];
    let p = pearson(x, y);
    let s = spearman(x, y);
    if p.is_none() || s.is_none() {
        warnings.push(format!("{label}: correlation undefined (constant series)"));
    }
    Ok(TraceMetrics {
        outage,
        pearson: p,
        spearman: s,
        n_samples: x.len(),
    })
}

fn assemble_report(
    predictions: &[PredictedTrace],
    data: &TrainingDataset,
) -> Result<EvalReport> {
    let mut warnings = Vec::new();
    let mut per_trace = Vec::with_capacity(data.n_traces());
    let mut all_pred = Vec::new();
    let mut all_meas = Vec::new();
    let mut violations = 0usize;
    for (n, (pred, item)) in predictions.iter().zip(&data.items).enumerate() {
        per_trace.push(metrics_for(pred, item, &mut warnings, &format!("trace {}", n + 1))?);
        let warmup = pred.warmup;
        for t in warmup..pred.values.len() {
            all_pred.push(pred.values[t]);
            all_meas.push(item.tvsq.values[t]);
            if (pred.values[t] - item.tvsq.values[t]).abs() > 2.0 * item.tvsq.ci[t] {
                violations += 1;
            }
        }
    }
    let mean_outage =
        per_trace.iter().map(|m| m.outage).sum::<f64>() / per_trace.len() as f64;
    let pearsons: Vec<f64> = per_trace.iter().filter_map(|m| m.pearson).collect();
    let spearmans: Vec<f64> = per_trace.iter().filter_map(|m| m.spearman).collect();
    let mean_of = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let pooled = TraceMetrics {
        outage: violations as f64 / all_pred.len() as f64,
        pearson: pearson(&all_pred, &all_meas),
        spearman: spearman(&all_pred, &all_meas),
        n_samples: all_pred.len(),
    };
    Ok(EvalReport {
        per_trace,
        mean_outage,
        mean_pearson: mean_of(&pearsons),
        mean_spearman: mean_of(&spearmans),
        pooled,
        warnings,
    })
}

/// Evaluates a trained model on a dataset with pinned initialization, the
/// same simulation the training objective uses.
pub fn evaluate_params(params: &HwParams, data: &TrainingDataset) -> Result<EvalReport> {
    params.validate()?;
    let predictions: Vec<PredictedTrace> = data
        .items
        .iter()
        .map(|item| predict_pinned(params, &item.stsq, &item.tvsq))
        .collect::<Result<Vec<_>>>()?;
    assemble_report(&predictions, data)
}

/// Evaluates one pooling baseline over the dataset.
pub fn evaluate_pooling(data: &TrainingDataset, window: usize, kind: PoolKind) -> Result<EvalReport> {
    let predictions: Vec<PredictedTrace> = data
        .items
        .iter()
        .map(|item| pool_trace(&item.stsq, window, kind))
        .collect::<Result<Vec<_>>>()?;
    assemble_report(&predictions, data)
}

/// One fold of the grouped cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub group: String,
    pub n_train: usize,
    pub n_validate: usize,
    pub report: EvalReport,
}

/// Leave-one-group-out protocol: for every distinct group label, trains on
/// the remaining traces and evaluates on the held-out group. Unlabeled
/// traces form singleton groups.
pub fn leave_one_group_out(
    data: &TrainingDataset,
    groups: &[Option<String>],
    r: usize,
    config: &TrainConfig,
) -> Result<Vec<FoldReport>> {
    if groups.len() != data.n_traces() {
        return Err(Error::Contract("group labels must cover every trace".into()));
    }
    let labels: Vec<String> = groups
        .iter()
        .enumerate()
        .map(|(n, g)| g.clone().unwrap_or_else(|| format!("trace-{}", n + 1)))
        .collect();
    let mut folds: Vec<String> = Vec::new();
    for label in &labels {
        if !folds.contains(label) {
            folds.push(label.clone());
        }
    }
    if folds.len() < 2 {
        return Err(Error::Contract(
            "grouped cross-validation needs at least two groups".into(),
        ));
    }
    let mut reports = Vec::with_capacity(folds.len());
    for fold in &folds {
        let train_items: Vec<TraceRecord> = data
            .items
            .iter()
            .zip(&labels)
            .filter(|(_, label)| *label != fold)
            .map(|(item, _)| item.clone())
            .collect();
        let validate_items: Vec<TraceRecord> = data
            .items
            .iter()
            .zip(&labels)
            .filter(|(_, label)| *label == fold)
            .map(|(item, _)| item.clone())
            .collect();
        let train_set = TrainingDataset::new(train_items)?;
        let validate_set = TrainingDataset::new(validate_items)?;
        let trained = train(&train_set, r, config)?;
        let report = evaluate_params(&trained.theta_star, &validate_set)?;
        reports.push(FoldReport {
            group: fold.clone(),
            n_train: train_set.n_traces(),
            n_validate: validate_set.n_traces(),
            report,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TvsqTrace;
    use crate::synth::SplitMix64;
    use approx::assert_relative_eq;

    #[test]
    fn pearson_hand_case() {
        let x = [1.0, 2.0, 2.0, 3.0, 5.0];
        let y = [2.0, 1.0, 4.0, 4.0, 6.0];
        assert_relative_eq!(
            pearson(&x, &y).unwrap(),
            0.8287248620773795,
            epsilon = 1e-12
        );
        // perfect linear relation
        let y2: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        assert_relative_eq!(pearson(&x, &y2).unwrap(), 1.0, epsilon = 1e-12);
        assert!(pearson(&[1.0, 1.0, 1.0], &y[..3]).is_none());
    }

    #[test]
    fn spearman_hand_case_with_ties() {
        let x = [1.0, 2.0, 2.0, 3.0, 5.0];
        let y = [2.0, 1.0, 4.0, 4.0, 6.0];
        assert_relative_eq!(
            spearman(&x, &y).unwrap(),
            0.7631578947368421,
            epsilon = 1e-12
        );
        // monotone transform leaves rank correlation at 1
        let y2: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        assert_relative_eq!(spearman(&x, &y2).unwrap(), 1.0, epsilon = 1e-12);
        assert!(spearman(&[2.0, 2.0], &[1.0, 3.0]).is_none());
    }

    #[test]
    fn average_ranks_tie_handling() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 20.0, 30.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
    }

    #[test]
    fn pooling_matches_brute_force() {
        let mut rng = SplitMix64::new(101);
        for _ in 0..20 {
            let len = 40;
            let stsq =
                StsqTrace::new((0..len).map(|_| rng.next_f64() * 100.0).collect()).unwrap();
            for kind in PoolKind::ALL {
                let pooled = pool_trace(&stsq, POOL_WINDOW, kind).unwrap();
                assert_eq!(pooled.warmup, POOL_WINDOW - 1);
                for t in POOL_WINDOW - 1..len {
                    let window = &stsq.values[t + 1 - POOL_WINDOW..=t];
                    let expected = match kind {
                        PoolKind::Max => {
                            window.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                        }
                        PoolKind::Min => window.iter().copied().fold(f64::INFINITY, f64::min),
                        PoolKind::Mean => window.iter().sum::<f64>() / window.len() as f64,
                        PoolKind::Median => {
                            let mut s = window.to_vec();
                            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
                            (s[5] + s[6]) / 2.0
                        }
                    };
                    assert_eq!(pooled.values[t], expected, "{kind:?} at t={t}");
                }
            }
        }
    }

    #[test]
    fn pooling_hand_built_window() {
        // 15 samples, window 12: check one fully-specified window by hand
        let values: Vec<f64> = (1..=15).map(|v| v as f64).collect();
        let stsq = StsqTrace::new(values).unwrap();
        let max = pool_trace(&stsq, 12, PoolKind::Max).unwrap();
        let min = pool_trace(&stsq, 12, PoolKind::Min).unwrap();
        let median = pool_trace(&stsq, 12, PoolKind::Median).unwrap();
        let mean = pool_trace(&stsq, 12, PoolKind::Mean).unwrap();
        // at t = 14 (0-based): window 4..=15
        assert_eq!(max.values[14], 15.0);
        assert_eq!(min.values[14], 4.0);
        assert_eq!(median.values[14], 9.5);
        assert_relative_eq!(mean.values[14], (4..=15).sum::<i32>() as f64 / 12.0);
    }

    fn perfect_dataset() -> (TrainingDataset, Vec<PredictedTrace>) {
        let mut rng = SplitMix64::new(103);
        let len = 40;
        let mut items = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..3 {
            let values: Vec<f64> = (0..len).map(|_| 20.0 + rng.next_f64() * 60.0).collect();
            let stsq = StsqTrace::new(values.clone()).unwrap();
            let tvsq = TvsqTrace::new(values.clone(), vec![2.0; len]).unwrap();
            items.push(TraceRecord { stsq, tvsq });
            preds.push(PredictedTrace {
                values,
                warmup: 4,
                init_policy: InitPolicy::ZeroState,
            });
        }
        (TrainingDataset::new(items).unwrap(), preds)
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        let (data, preds) = perfect_dataset();
        let report = assemble_report(&preds, &data).unwrap();
        assert_eq!(report.mean_outage, 0.0);
        assert_relative_eq!(report.mean_pearson.unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(report.mean_spearman.unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(report.pooled.pearson.unwrap(), 1.0, epsilon = 1e-12);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn constant_predictions_report_null_with_warning() {
        let (data, _) = perfect_dataset();
        let preds: Vec<PredictedTrace> = data
            .items
            .iter()
            .map(|item| PredictedTrace {
                values: vec![50.0; item.stsq.len()],
                warmup: 4,
                init_policy: InitPolicy::ZeroState,
            })
            .collect();
        let report = assemble_report(&preds, &data).unwrap();
        assert!(report.per_trace[0].pearson.is_none());
        assert!(report.per_trace[0].spearman.is_none());
        assert!(report.mean_pearson.is_none());
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn evaluate_params_runs_pinned() {
        let mut rng = SplitMix64::new(107);
        let params = crate::ident::initial_params(2);
        let len = 50;
        let items: Vec<TraceRecord> = (0..2)
            .map(|_| {
                let stsq =
                    StsqTrace::new((0..len).map(|_| 20.0 + rng.next_f64() * 60.0).collect())
                        .unwrap();
                let tvsq = TvsqTrace::new(
                    (0..len).map(|_| 30.0 + rng.next_f64() * 40.0).collect(),
                    vec![2.0; len],
                )
                .unwrap();
                TraceRecord { stsq, tvsq }
            })
            .collect();
        let data = TrainingDataset::new(items).unwrap();
        let report = evaluate_params(&params, &data).unwrap();
        assert_eq!(report.per_trace.len(), 2);
        assert_eq!(report.per_trace[0].n_samples, len - 2);
        // library evaluation equals a manual pinned simulation
        let pred = predict_pinned(&params, &data.items[0].stsq, &data.items[0].tvsq).unwrap();
        let manual = outage_rate(&pred, &data.items[0].tvsq, 2).unwrap();
        assert_eq!(report.per_trace[0].outage, manual);
    }
}
