//! Post-training diagnostics: root radius and memory horizon, truncated
//! impulse response and its L1 norm, bounded-output range of the full model,
//! initial-state decay experiments and nonlinearity profiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ident::spectral_radius;
use crate::model::{
    input_nonlinearity, input_slope, output_nonlinearity, output_slope, simulate, HwParams,
    InitPolicy, StsqTrace,
};

/// Default truncation tolerance for impulse responses; far below RDMOS
/// resolution.
pub const IMPULSE_TOL: f64 = 1e-9;

const IMPULSE_MAX_LEN: usize = 2_000_000;

/// Stability and memory summary of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Root radius of the feedback polynomial.
    pub rho: f64,
    /// Memory constant `-3 / ln(rho)`; 0 for FIR filters.
    pub tau: f64,
    /// Truncated impulse response `h[0..=L]`.
    pub impulse: Vec<f64>,
    pub l1_norm: f64,
    /// Lag at which the impulse response peaks.
    pub peak_lag: usize,
    /// Output range for inputs in [0, 100], sign-split bound.
    pub output_range: (f64, f64),
    /// Output range implied by the coarser `|h| * max|u|` bound.
    pub coarse_output_range: (f64, f64),
}

/// Sampled nonlinearity curves with per-point slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearityProfile {
    /// (q_st, u, du/dq) over the input grid.
    pub input: Vec<(f64, f64, f64)>,
    /// (v, q_hat, dq/dv) over the latent grid.
    pub output: Vec<(f64, f64, f64)>,
    /// Set when the input slope is non-increasing across the grid, the
    /// concave regime where low-quality intervals weigh more.
    pub input_slope_nonincreasing: bool,
}

/// Memory constant `tau = -3 / ln(rho)`: the horizon over which the initial
/// state fades to about 5%. FIR filters (`rho = 0`) forget the initial state
/// after exactly r steps, so tau is 0 by convention.
pub fn memory_constant(f: &[f64]) -> Result<f64> {
    let rho = spectral_radius(f);
    if rho >= 1.0 {
        return Err(Error::Unstable { rho, limit: 1.0 });
    }
    if rho == 0.0 {
        return Ok(0.0);
    }
    Ok(-3.0 / rho.ln())
}

/// Impulse response of the linear stage, truncated once the geometric tail
/// bound `trail_max * rho / (1 - rho)` falls below `tol`, so the discarded
/// tail contributes less than `tol` to the L1 norm.
pub fn impulse_response(b: &[f64], f: &[f64], tol: f64) -> Result<Vec<f64>> {
    if b.len() != f.len() + 1 {
        return Err(Error::Contract(
            "b must have exactly one more tap than f".into(),
        ));
    }
    if !(tol > 0.0) {
        return Err(Error::Contract("truncation tolerance must be positive".into()));
    }
    let rho = spectral_radius(f);
    if rho >= 1.0 {
        return Err(Error::Unstable { rho, limit: 1.0 });
    }
    let r = f.len();
    if rho == 0.0 && f.iter().all(|&c| c == 0.0) {
        return Ok(b.to_vec());
    }
    // trailing window long enough to bridge oscillation nulls
    let tau = -3.0 / rho.ln();
    let window = r.max(tau.ceil() as usize).max(8);
    let tail_factor = rho / (1.0 - rho);

    let mut h: Vec<f64> = Vec::new();
    let mut d = 0usize;
    loop {
        // h[d] = b_d (for d <= r) + sum_k f_k h[d-k]
        let mut value = if d <= r { b[d] } else { 0.0 };
        for (k, fk) in f.iter().enumerate() {
            if d > k {
                value += fk * h[d - k - 1];
            }
        }
        h.push(value);
        if d >= r + window {
            let trail = h[h.len() - window..]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            if trail * tail_factor < tol {
                break;
            }
        }
        d += 1;
        if d > IMPULSE_MAX_LEN {
            return Err(Error::Contract(format!(
                "impulse response did not reach tolerance {tol} within {IMPULSE_MAX_LEN} samples (rho = {rho})"
            )));
        }
    }
    Ok(h)
}

/// Bounded-output analysis for inputs in `input_range`.
///
/// The latent bounds split the impulse response by sign, which is tighter
/// than the `|h|_1 * |u|_inf` dilation; both resulting output ranges are
/// reported.
pub fn bibo_range(params: &HwParams, input_range: (f64, f64)) -> Result<BiboRange> {
    params.validate()?;
    params.check_stable(1.0)?;
    let (q_lo, q_hi) = input_range;
    if !(q_lo < q_hi) {
        return Err(Error::Contract("input range must satisfy lo < hi".into()));
    }
    let h = impulse_response(&params.b, &params.f, IMPULSE_TOL)?;
    let l1_norm: f64 = h.iter().map(|v| v.abs()).sum();

    // the sigmoid is monotone in q, so u extremes sit at the interval ends
    let u_a = input_nonlinearity(q_lo, &params.beta);
    let u_b = input_nonlinearity(q_hi, &params.beta);
    let (u_min, u_max) = if u_a <= u_b { (u_a, u_b) } else { (u_b, u_a) };

    let mut v_min = 0.0;
    let mut v_max = 0.0;
    for &hd in &h {
        if hd >= 0.0 {
            v_max += hd * u_max;
            v_min += hd * u_min;
        } else {
            v_max += hd * u_min;
            v_min += hd * u_max;
        }
    }
    let q_of = |v: f64| output_nonlinearity(v, &params.gamma);
    let (out_a, out_b) = (q_of(v_min), q_of(v_max));
    let output_range = if out_a <= out_b {
        (out_a, out_b)
    } else {
        (out_b, out_a)
    };

    let coarse_v = l1_norm * u_min.abs().max(u_max.abs());
    let (c_a, c_b) = (q_of(-coarse_v), q_of(coarse_v));
    let coarse_output_range = if c_a <= c_b { (c_a, c_b) } else { (c_b, c_a) };

    Ok(BiboRange {
        u_range: (u_min, u_max),
        v_range: (v_min, v_max),
        output_range,
        coarse_output_range,
        l1_norm,
    })
}

/// Result of [`bibo_range`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiboRange {
    pub u_range: (f64, f64),
    pub v_range: (f64, f64),
    pub output_range: (f64, f64),
    pub coarse_output_range: (f64, f64),
    pub l1_norm: f64,
}

/// Per-second absolute gap between two simulations that differ only in the
/// initialization policy.
pub fn initial_state_decay(
    params: &HwParams,
    stsq: &StsqTrace,
    init_a: InitPolicy,
    init_b: InitPolicy,
) -> Result<Vec<f64>> {
    let a = simulate(stsq, params, init_a)?;
    let b = simulate(stsq, params, init_b)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .collect())
}

/// Full stability report: spectral radius, memory constant, truncated
/// impulse response and output range for RDMOS inputs.
pub fn stability_report(params: &HwParams, tol: f64) -> Result<StabilityReport> {
    params.validate()?;
    params.check_stable(1.0)?;
    let rho = params.rho();
    let tau = memory_constant(&params.f)?;
    let impulse = impulse_response(&params.b, &params.f, tol)?;
    let l1_norm = impulse.iter().map(|v| v.abs()).sum();
    let peak_lag = impulse
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let bibo = bibo_range(params, (0.0, 100.0))?;
    Ok(StabilityReport {
        rho,
        tau,
        impulse,
        l1_norm,
        peak_lag,
        output_range: bibo.output_range,
        coarse_output_range: bibo.coarse_output_range,
    })
}

/// Samples the two nonlinearities with analytic slopes on the given grids.
pub fn nonlinearity_profile(
    params: &HwParams,
    input_grid: &[f64],
    latent_grid: &[f64],
) -> NonlinearityProfile {
    let input: Vec<(f64, f64, f64)> = input_grid
        .iter()
        .map(|&q| {
            (
                q,
                input_nonlinearity(q, &params.beta),
                input_slope(q, &params.beta),
            )
        })
        .collect();
    let output: Vec<(f64, f64, f64)> = latent_grid
        .iter()
        .map(|&v| {
            (
                v,
                output_nonlinearity(v, &params.gamma),
                output_slope(v, &params.gamma),
            )
        })
        .collect();
    let input_slope_nonincreasing = input
        .windows(2)
        .all(|w| w[1].2 <= w[0].2 + 1e-12);
    NonlinearityProfile {
        input,
        output,
        input_slope_nonincreasing,
    }
}
