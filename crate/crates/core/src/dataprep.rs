//! Subjective-score preprocessing: quality-score mapping, reference
//! offsetting, Z-score normalization, outlier rejection and aggregation of
//! per-subject sliders into TVSQ traces with confidence half-widths.
//!
//! The aggregation half-width uses `eps = (1.96 * eta / sqrt(I - |O|)) / 8 * 100`:
//! only the confidence term is rescaled by the slope of the [-4, 4] -> [0, 100]
//! affine map. Carrying the map's +4 offset into the half-width would make
//! `2*eps > 100` for any data and zero the outage rate everywhere.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{StsqTrace, TvsqTrace};

/// Raw continuous scores `c[i][j][t]` for subjects i, videos j, seconds t,
/// plus the per-subject scores of the session's reference video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScorePanel {
    pub scores: Vec<Vec<Vec<f64>>>,
    pub ref_scores: Vec<Vec<f64>>,
    pub session: String,
}

impl SubjectScorePanel {
    pub fn new(scores: Vec<Vec<Vec<f64>>>, ref_scores: Vec<Vec<f64>>, session: String) -> Result<Self> {
        let panel = SubjectScorePanel {
            scores,
            ref_scores,
            session,
        };
        panel.validate()?;
        Ok(panel)
    }

    pub fn validate(&self) -> Result<()> {
        let i_count = self.scores.len();
        if i_count < 2 {
            return Err(Error::Contract("panel needs at least two subjects".into()));
        }
        if self.ref_scores.len() != i_count {
            return Err(Error::Contract(
                "reference scores must cover every subject".into(),
            ));
        }
        let j_count = self.scores[0].len();
        if j_count == 0 {
            return Err(Error::Contract("panel needs at least one video".into()));
        }
        let t_len = self.scores[0].first().map(|v| v.len()).unwrap_or(0);
        if t_len == 0 {
            return Err(Error::Contract("panel needs at least one sample".into()));
        }
        for (i, per_subject) in self.scores.iter().enumerate() {
            if per_subject.len() != j_count {
                return Err(Error::Contract(format!(
                    "subject {} covers {} videos, expected {j_count}",
                    i + 1,
                    per_subject.len()
                )));
            }
            for (j, series) in per_subject.iter().enumerate() {
                if series.len() != t_len {
                    return Err(Error::Contract(format!(
                        "subject {} video {} has {} samples, expected {t_len}",
                        i + 1,
                        j + 1,
                        series.len()
                    )));
                }
                for &s in series {
                    if !(0.0..=100.0).contains(&s) {
                        return Err(Error::Contract(format!(
                            "score {s} outside [0, 100] (subject {}, video {})",
                            i + 1,
                            j + 1
                        )));
                    }
                }
            }
            if self.ref_scores[i].len() != t_len {
                return Err(Error::Contract(format!(
                    "reference scores of subject {} have {} samples, expected {t_len}",
                    i + 1,
                    self.ref_scores[i].len()
                )));
            }
            for &s in &self.ref_scores[i] {
                if !(0.0..=100.0).contains(&s) {
                    return Err(Error::Contract(format!(
                        "reference score {s} outside [0, 100] (subject {})",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.scores.len()
    }

    pub fn n_videos(&self) -> usize {
        self.scores[0].len()
    }

    pub fn n_samples(&self) -> usize {
        self.scores[0][0].len()
    }
}

/// Normalization statistics and outlier sets produced by [`aggregate_tvsq`].
/// Subject statistics refer to the final pass (outliers excluded); sample
/// statistics are over the retained subjects at each (video, second).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub subject_mean: Vec<f64>,
    pub subject_std: Vec<f64>,
    pub sample_mean: Vec<Vec<f64>>,
    pub sample_std: Vec<Vec<f64>>,
    pub outliers: Vec<Vec<Vec<usize>>>,
}

/// Per-second RDMOS values of the available quality versions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityLevelBank {
    pub levels: Vec<Vec<f64>>,
}

impl QualityLevelBank {
    pub fn new(levels: Vec<Vec<f64>>) -> Result<Self> {
        if levels.is_empty() || levels[0].is_empty() {
            return Err(Error::Contract("level bank must be nonempty".into()));
        }
        let t_len = levels[0].len();
        for (l, level) in levels.iter().enumerate() {
            if level.len() != t_len {
                return Err(Error::Contract(format!(
                    "level {} has {} samples, expected {t_len}",
                    l + 1,
                    level.len()
                )));
            }
            if level.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("non-finite level value".into()));
            }
        }
        Ok(QualityLevelBank { levels })
    }
}

/// Result of the full aggregation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub traces: Vec<TvsqTrace>,
    pub stats: ZScoreStats,
    pub warnings: Vec<String>,
}

/// Maps a nonnegative quality index to DMOS,
/// `16.4769 + 9.7111 * ln(1 + x / 0.6444)`.
pub fn dmos_from_rred(rred: f64) -> Result<f64> {
    if !(rred >= 0.0) {
        return Err(Error::Contract(format!("index {rred} must be nonnegative")));
    }
    Ok(16.4769 + 9.7111 * (1.0 + rred / 0.6444).ln())
}

/// Reversed DMOS: higher is better.
pub fn rdmos_from_dmos(dmos: f64) -> f64 {
    100.0 - dmos
}

/// Removes the content baseline: `100 - (c_ref[i][t] - c[i][j][t])`.
pub fn offset_scores(panel: &SubjectScorePanel) -> Vec<Vec<Vec<f64>>> {
    panel
        .scores
        .iter()
        .enumerate()
        .map(|(i, per_subject)| {
            per_subject
                .iter()
                .map(|series| {
                    series
                        .iter()
                        .zip(&panel.ref_scores[i])
                        .map(|(c, c_ref)| 100.0 - (c_ref - c))
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn subject_stats(samples: &[f64], subject: usize) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::DegenerateSubject { subject });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::DegenerateSubject { subject });
    }
    Ok((mean, var.sqrt()))
}

/// Per-subject Z-scores over all (video, second) samples with unbiased
/// variance. A subject whose scores never vary cannot be normalized; the
/// error names the 1-based subject index.
pub fn zscore_normalize(
    offset: &[Vec<Vec<f64>>],
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<f64>, Vec<f64>)> {
    let mut z = Vec::with_capacity(offset.len());
    let mut means = Vec::with_capacity(offset.len());
    let mut stds = Vec::with_capacity(offset.len());
    for (i, per_subject) in offset.iter().enumerate() {
        let flat: Vec<f64> = per_subject.iter().flatten().copied().collect();
        let (mean, std) = subject_stats(&flat, i + 1)?;
        means.push(mean);
        stds.push(std);
        z.push(
            per_subject
                .iter()
                .map(|series| series.iter().map(|c| (c - mean) / std).collect())
                .collect(),
        );
    }
    Ok((z, means, stds))
}

/// Flags subject i at (video, second) when its Z-score leaves the band
/// `mean +- 2 * std` over subjects (unbiased std). Applied literally: a
/// symmetric extreme pair can inflate the band enough to keep both.
pub fn detect_outliers(z: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<usize>>> {
    let i_count = z.len();
    let j_count = z[0].len();
    let t_len = z[0][0].len();
    let mut outliers = vec![vec![Vec::new(); t_len]; j_count];
    for (j, per_video) in outliers.iter_mut().enumerate() {
        for (t, set) in per_video.iter_mut().enumerate() {
            let samples: Vec<f64> = (0..i_count).map(|i| z[i][j][t]).collect();
            let n = i_count as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
            let std = var.max(0.0).sqrt();
            for (i, &zi) in samples.iter().enumerate() {
                if zi > mean + 2.0 * std || zi < mean - 2.0 * std {
                    set.push(i);
                }
            }
        }
    }
    outliers
}

/// Full preprocessing pipeline: offset, normalize, flag outliers, renormalize
/// over retained samples, aggregate and rescale to RDMOS with per-sample
/// confidence half-widths. Averaged Z-scores outside [-4, 4] are clamped
/// with a warning.
pub fn aggregate_tvsq(panel: &SubjectScorePanel) -> Result<AggregateResult> {
    panel.validate()?;
    let offset = offset_scores(panel);
    let (z1, _, _) = zscore_normalize(&offset)?;
    let outliers = detect_outliers(&z1);

    let i_count = panel.n_subjects();
    let j_count = panel.n_videos();
    let t_len = panel.n_samples();

    // renormalize each subject over its retained samples only
    let mut subject_mean = Vec::with_capacity(i_count);
    let mut subject_std = Vec::with_capacity(i_count);
    for i in 0..i_count {
        let mut kept = Vec::with_capacity(j_count * t_len);
        for j in 0..j_count {
            for t in 0..t_len {
                if !outliers[j][t].contains(&i) {
                    kept.push(offset[i][j][t]);
                }
            }
        }
        let (mean, std) = subject_stats(&kept, i + 1)?;
        subject_mean.push(mean);
        subject_std.push(std);
    }

    let mut traces = Vec::with_capacity(j_count);
    let mut sample_mean = vec![vec![0.0; t_len]; j_count];
    let mut sample_std = vec![vec![0.0; t_len]; j_count];
    let mut warnings = Vec::new();
    for j in 0..j_count {
        let mut values = Vec::with_capacity(t_len);
        let mut ci = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let retained: Vec<usize> = (0..i_count)
                .filter(|i| !outliers[j][t].contains(i))
                .collect();
            if retained.is_empty() {
                return Err(Error::AllOutliers { video: j + 1, t: t + 1 });
            }
            if retained.len() < 2 {
                return Err(Error::Contract(format!(
                    "only one retained subject at video {}, t={}; no confidence interval",
                    j + 1,
                    t + 1
                )));
            }
            let zs: Vec<f64> = retained
                .iter()
                .map(|&i| (offset[i][j][t] - subject_mean[i]) / subject_std[i])
                .collect();
            let n = zs.len() as f64;
            let mean = zs.iter().sum::<f64>() / n;
            let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / (n - 1.0);
            let eta = var.max(0.0).sqrt();
            sample_mean[j][t] = mean;
            sample_std[j][t] = eta;

            let clamped = mean.clamp(-4.0, 4.0);
            if clamped != mean {
                warnings.push(format!(
                    "averaged z-score {mean:.4} clamped at video {}, t={}",
                    j + 1,
                    t + 1
                ));
                log::warn!("averaged z-score {mean} outside [-4, 4] at video {}, t={}", j + 1, t + 1);
            }
            values.push((clamped + 4.0) / 8.0 * 100.0);
            let half_width = 1.96 * eta / n.sqrt() / 8.0 * 100.0;
            if !(half_width > 0.0) {
                return Err(Error::Contract(format!(
                    "degenerate confidence interval at video {}, t={}",
                    j + 1,
                    t + 1
                )));
            }
            ci.push(half_width);
        }
        traces.push(TvsqTrace::new(values, ci)?);
    }
    Ok(AggregateResult {
        traces,
        stats: ZScoreStats {
            subject_mean,
            subject_std,
            sample_mean,
            sample_std,
            outliers,
        },
        warnings,
    })
}

/// Picks, per second, the bank level closest to the target (ties toward the
/// smaller index) and returns the chosen indices with the achieved trace.
pub fn quantize_to_levels(
    target: &StsqTrace,
    bank: &QualityLevelBank,
) -> Result<(Vec<usize>, StsqTrace)> {
    if bank.levels[0].len() != target.len() {
        return Err(Error::Contract(format!(
            "bank length {} does not match target length {}",
            bank.levels[0].len(),
            target.len()
        )));
    }
    let mut indices = Vec::with_capacity(target.len());
    let mut achieved = Vec::with_capacity(target.len());
    for (t, &goal) in target.values.iter().enumerate() {
        let mut best = 0usize;
        let mut best_err = (bank.levels[0][t] - goal).abs();
        for (l, level) in bank.levels.iter().enumerate().skip(1) {
            let err = (level[t] - goal).abs();
            if err < best_err {
                best = l;
                best_err = err;
            }
        }
        indices.push(best);
        achieved.push(bank.levels[best][t]);
    }
    Ok((indices, StsqTrace::new(achieved)?))
}
