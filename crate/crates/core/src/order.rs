//! Filter-order selection: a Lipschitz-quotient screen over the candidate
//! range followed by minimum-description-length comparison of trained
//! candidates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ident::{train, train_with_start, TrainConfig, TrainReport, TrainingDataset};
use crate::model::{HwParams, StsqTrace, TvsqTrace};

/// Scan over candidate orders. `lipschitz`, `outage` and `mdl` are indexed
/// like `candidates`; `selected` minimizes the description length with ties
/// broken toward the smaller order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderScan {
    pub candidates: Vec<usize>,
    pub lipschitz: Vec<f64>,
    pub outage: Vec<f64>,
    pub mdl: Vec<f64>,
    pub selected: usize,
    pub warnings: Vec<String>,
}

/// Regressor `phi_r[t] = (stsq[t-r..t], tvsq[t-r..t-1])`, length 2r+1.
/// `t` is 1-based and must satisfy `r+1 <= t <= T`.
pub fn regressor(stsq: &StsqTrace, tvsq: &TvsqTrace, r: usize, t: usize) -> Result<Vec<f64>> {
    let t_len = stsq.len();
    if tvsq.len() != t_len {
        return Err(Error::Contract("stsq and tvsq lengths differ".into()));
    }
    if t < r + 1 || t > t_len {
        return Err(Error::Contract(format!(
            "t = {t} outside the valid range [{}, {t_len}]",
            r + 1
        )));
    }
    let mut phi = Vec::with_capacity(2 * r + 1);
    phi.extend_from_slice(&stsq.values[t - r - 1..t]);
    phi.extend_from_slice(&tvsq.values[t - r - 1..t - 1]);
    Ok(phi)
}

/// Largest ratio of output difference to regressor distance over all sample
/// pairs of one trace. Pairs with identical regressors are skipped when the
/// outputs also agree and yield infinity otherwise.
pub fn lipschitz_quotient(stsq: &StsqTrace, tvsq: &TvsqTrace, r: usize) -> Result<f64> {
    let t_len = stsq.len();
    if tvsq.len() != t_len {
        return Err(Error::Contract("stsq and tvsq lengths differ".into()));
    }
    if t_len < r + 2 {
        return Err(Error::Contract(format!(
            "need at least r+2 = {} samples, got {t_len}",
            r + 2
        )));
    }
    let st = &stsq.values;
    let tv = &tvsq.values;
    let mut best = 0.0f64;
    // 0-based regressor anchors: phi for 1-based t starts at index t-r-1
    for t1 in r..t_len {
        for t2 in t1 + 1..t_len {
            let mut dist2 = 0.0;
            for d in 0..=r {
                let diff = st[t1 - r + d] - st[t2 - r + d];
                dist2 += diff * diff;
            }
            for d in 0..r {
                let diff = tv[t1 - r + d] - tv[t2 - r + d];
                dist2 += diff * diff;
            }
            let num = (tv[t1] - tv[t2]).abs();
            if dist2 == 0.0 {
                if num == 0.0 {
                    continue;
                }
                return Ok(f64::INFINITY);
            }
            best = best.max(num / dist2.sqrt());
        }
    }
    Ok(best)
}

/// Dataset-level screen: the largest per-trace quotient.
pub fn lipschitz_quotient_dataset(data: &TrainingDataset, r: usize) -> Result<f64> {
    let mut best = 0.0f64;
    for item in &data.items {
        best = best.max(lipschitz_quotient(&item.stsq, &item.tvsq, r)?);
    }
    Ok(best)
}

/// Description length `L(r) = outage * (1 + (2r+1) * ln(N(T-r)) / (N(T-r)))`,
/// natural logarithm.
pub fn description_length(outage: f64, r: usize, n_traces: usize, trace_len: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&outage) {
        return Err(Error::Contract(format!("outage {outage} outside [0, 1]")));
    }
    if trace_len <= r {
        return Err(Error::Contract(
            "effective sample count N(T-r) must be positive".into(),
        ));
    }
    let m = (n_traces * (trace_len - r)) as f64;
    if m <= 1.0 {
        return Err(Error::Contract(
            "effective sample count N(T-r) must exceed 1".into(),
        ));
    }
    Ok(outage * (1.0 + (2 * r + 1) as f64 * m.ln() / m))
}

/// Zero-pads a smaller-order parameter vector up to order `r`; the padded
/// model computes the identical input-output map.
fn pad_to_order(params: &HwParams, r: usize) -> HwParams {
    let mut b = params.b.clone();
    b.resize(r + 1, 0.0);
    let mut f = params.f.clone();
    f.resize(r, 0.0);
    HwParams {
        r,
        b,
        f,
        beta: params.beta,
        gamma: params.gamma,
    }
}

fn better(a: &TrainReport, b: &TrainReport) -> bool {
    let last = |r: &TrainReport| r.objective_history.last().map(|s| s.e_apx).unwrap_or(f64::NAN);
    (a.final_outage, last(a)) < (b.final_outage, last(b))
}

/// Trains every candidate order and picks the description-length minimizer,
/// ties broken toward the smaller order.
///
/// Candidates are scanned in increasing order. Each is trained from the
/// default initialization and, in addition, warm-started from the best
/// smaller-order solution padded with zero taps; the better of the two runs
/// enters the scan. The warm start removes the dependence of the fitted
/// outage on which local basin a fresh run happens to find, so the
/// comparison across orders reflects the marginal value of the extra taps.
pub fn select_order(
    data: &TrainingDataset,
    r_range: &[usize],
    config: &TrainConfig,
) -> Result<OrderScan> {
    if r_range.is_empty() {
        return Err(Error::Contract("candidate range is empty".into()));
    }
    let t_len = data.trace_len();
    let mut candidates = r_range.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    for &r in &candidates {
        if r == 0 || r >= t_len {
            return Err(Error::Contract(format!(
                "candidate order {r} outside the valid range [1, {t_len})"
            )));
        }
    }

    let mut lipschitz = Vec::with_capacity(candidates.len());
    let mut outage = Vec::with_capacity(candidates.len());
    let mut mdl = Vec::with_capacity(candidates.len());
    let mut warnings = Vec::new();
    let mut previous_best: Option<HwParams> = None;
    for &r in &candidates {
        lipschitz.push(lipschitz_quotient_dataset(data, r)?);
        let mut report = train(data, r, config)?;
        if let Some(prev) = &previous_best {
            let warm = train_with_start(data, pad_to_order(prev, r), config)?;
            if better(&warm, &report) {
                report = warm;
            }
        }
        if !report.stalled_stages.is_empty() {
            warnings.push(format!(
                "r={r}: descent stalled at stages {:?}",
                report.stalled_stages
            ));
        }
        outage.push(report.final_outage);
        mdl.push(description_length(report.final_outage, r, data.n_traces(), t_len)?);
        previous_best = Some(report.theta_star);
    }

    let mut selected = candidates[0];
    let mut best = mdl[0];
    for (i, &r) in candidates.iter().enumerate().skip(1) {
        if mdl[i] < best {
            best = mdl[i];
            selected = r;
        }
    }
    Ok(OrderScan {
        candidates,
        lipschitz,
        outage,
        mdl,
        selected,
        warnings,
    })
}
