//! Hammerstein-Wiener model of time-varying subjective quality: an IIR filter
//! wrapped in generalized-sigmoid input/output nonlinearities, plus forward
//! simulation of predicted TVSQ from a per-second STSQ trace.
//!
//! The latent recursion is
//!
//! ```text
//! v[t] = sum_{d=0}^{r} b_d * u[t-d] + sum_{d=1}^{r} f_d * v[t-d]
//! ```
//!
//! with `u[t]` the input nonlinearity applied to the STSQ sample and the
//! predicted quality the output nonlinearity applied to `v[t]`. All series
//! are 1-based in the documentation and 0-based in the code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ident::spectral_radius;

/// Nonlinearity parameters that approximate a straight line on [0, 100].
///
/// Used as the training starting point and in identity-composition tests;
/// the deviation from the best linear fit stays below ~1 RDMOS over the
/// usable range even though the curve saturates near the scale ends.
pub const NEAR_IDENTITY: [f64; 4] = [0.04, -2.0, 0.0, 108.5];

/// Relative margin used when clipping a quality value into the invertible
/// range of the output nonlinearity: values are pulled into
/// `[g3 + MARGIN*|g4|, g3 + (1-MARGIN)*|g4|]`.
pub const INVERT_CLIP_MARGIN: f64 = 1e-3;

/// Fitted linear output map shipped as a named preset.
pub const LINEAR_OUTPUT_PRESET: LinearOutputParams = LinearOutputParams {
    a: 0.7013,
    b_off: 49.9794,
};

/// Numerically stable logistic function.
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(z) * (1 - sigmoid(z))`, computed as a product of two stable
/// evaluations so it underflows to zero instead of cancelling.
pub(crate) fn sigmoid_slope(z: f64) -> f64 {
    sigmoid(z) * sigmoid(-z)
}

/// Full parameter vector of the Hammerstein-Wiener model.
///
/// `b` holds the r+1 feedforward taps `b_0..b_r`, `f` the r feedback taps
/// `f_1..f_r`, `beta`/`gamma` the input/output sigmoid parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HwParams {
    pub r: usize,
    pub b: Vec<f64>,
    pub f: Vec<f64>,
    pub beta: [f64; 4],
    pub gamma: [f64; 4],
}

impl HwParams {
    pub fn new(b: Vec<f64>, f: Vec<f64>, beta: [f64; 4], gamma: [f64; 4]) -> Result<Self> {
        let params = HwParams {
            r: f.len(),
            b,
            f,
            beta,
            gamma,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Contract("model order r must be >= 1".into()));
        }
        if self.b.len() != self.r + 1 {
            return Err(Error::Contract(format!(
                "b must have r+1 = {} entries, got {}",
                self.r + 1,
                self.b.len()
            )));
        }
        if self.f.len() != self.r {
            return Err(Error::Contract(format!(
                "f must have r = {} entries, got {}",
                self.r,
                self.f.len()
            )));
        }
        let all = self
            .b
            .iter()
            .chain(self.f.iter())
            .chain(self.beta.iter())
            .chain(self.gamma.iter());
        for value in all {
            if !value.is_finite() {
                return Err(Error::Contract("non-finite model parameter".into()));
            }
        }
        Ok(())
    }

    /// Root radius of the feedback polynomial `z^r - sum f_d z^(r-d)`.
    pub fn rho(&self) -> f64 {
        spectral_radius(&self.f)
    }

    /// Errors unless `rho(f) < limit`.
    pub fn check_stable(&self, limit: f64) -> Result<()> {
        let rho = self.rho();
        if rho < limit {
            Ok(())
        } else {
            Err(Error::Unstable { rho, limit })
        }
    }

    /// DC gain of the linear stage, `sum(b) / (1 - sum(f))`.
    pub fn dc_gain(&self) -> f64 {
        let num: f64 = self.b.iter().sum();
        let den: f64 = 1.0 - self.f.iter().sum::<f64>();
        num / den
    }

    /// Number of free parameters, `2r + 9`.
    pub fn dim(&self) -> usize {
        2 * self.r + 9
    }

    /// Flattens to `[b_0..b_r, f_1..f_r, beta, gamma]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(&self.b);
        out.extend_from_slice(&self.f);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.gamma);
        out
    }

    /// Inverse of [`HwParams::to_vec`] for a given order.
    pub fn from_vec(r: usize, theta: &[f64]) -> Result<Self> {
        if theta.len() != 2 * r + 9 {
            return Err(Error::Contract(format!(
                "parameter vector must have 2r+9 = {} entries, got {}",
                2 * r + 9,
                theta.len()
            )));
        }
        let b = theta[..r + 1].to_vec();
        let f = theta[r + 1..2 * r + 1].to_vec();
        let mut beta = [0.0; 4];
        beta.copy_from_slice(&theta[2 * r + 1..2 * r + 5]);
        let mut gamma = [0.0; 4];
        gamma.copy_from_slice(&theta[2 * r + 5..]);
        HwParams::new(b, f, beta, gamma)
    }
}

/// Affine replacement for the output nonlinearity, `q = a*v + b_off`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearOutputParams {
    pub a: f64,
    pub b_off: f64,
}

impl LinearOutputParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) || !self.a.is_finite() || !self.b_off.is_finite() {
            return Err(Error::Contract(
                "linear output map requires finite parameters and a > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-second short-time subjective quality series (RDMOS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsqTrace {
    pub values: Vec<f64>,
}

impl StsqTrace {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("trace must have at least one sample".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("trace contains non-finite samples".into()));
        }
        Ok(StsqTrace { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Measured time-varying subjective quality with per-sample 95% confidence
/// half-widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvsqTrace {
    pub values: Vec<f64>,
    pub ci: Vec<f64>,
}

impl TvsqTrace {
    pub fn new(values: Vec<f64>, ci: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("trace must have at least one sample".into()));
        }
        if values.len() != ci.len() {
            return Err(Error::Contract(format!(
                "tvsq values ({}) and ci ({}) lengths differ",
                values.len(),
                ci.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("trace contains non-finite samples".into()));
        }
        if ci.iter().any(|c| !c.is_finite() || *c <= 0.0) {
            return Err(Error::Contract(
                "confidence half-widths must be positive and finite".into(),
            ));
        }
        Ok(TvsqTrace { values, ci })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// How the first r latent samples are chosen before the recursion starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitPolicy {
    /// `v[1..r] = 0`.
    ZeroState,
    /// Caller-supplied latent state, e.g. inverted measured TVSQ.
    Pinned(Vec<f64>),
    /// The steady state the filter would reach under constant input `u[1]`:
    /// `u[1] * sum(b) / (1 - sum(f))`.
    HoldFirstInput,
}

/// Simulated output trace. The first `warmup = r` samples are the output
/// nonlinearity applied to the initialization state, not predictions, and
/// are excluded from every error metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedTrace {
    pub values: Vec<f64>,
    pub warmup: usize,
    pub init_policy: InitPolicy,
}

/// Input nonlinearity, `u = b3 + b4 / (1 + exp(-(b1*q + b2)))`.
pub fn input_nonlinearity(q_st: f64, beta: &[f64; 4]) -> f64 {
    beta[2] + beta[3] * sigmoid(beta[0] * q_st + beta[1])
}

/// Output nonlinearity, `q = g3 + g4 / (1 + exp(-(g1*v + g2)))`.
pub fn output_nonlinearity(v: f64, gamma: &[f64; 4]) -> f64 {
    gamma[2] + gamma[3] * sigmoid(gamma[0] * v + gamma[1])
}

/// Derivative of [`output_nonlinearity`] with respect to the latent value.
pub fn output_slope(v: f64, gamma: &[f64; 4]) -> f64 {
    gamma[0] * gamma[3] * sigmoid_slope(gamma[0] * v + gamma[1])
}

/// Derivative of [`input_nonlinearity`] with respect to the quality value.
pub fn input_slope(q_st: f64, beta: &[f64; 4]) -> f64 {
    beta[0] * beta[3] * sigmoid_slope(beta[0] * q_st + beta[1])
}

/// Open interval `(lo, hi)` on which the output nonlinearity is invertible.
pub fn output_range(gamma: &[f64; 4]) -> (f64, f64) {
    let a = gamma[2];
    let b = gamma[2] + gamma[3];
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Inverse of the output nonlinearity.
///
/// `q` must lie strictly inside the open interval between `g3` and
/// `g3 + g4`; out-of-range values produce [`Error::OutOfRange`] carrying
/// the admissible interval. Callers that cannot guarantee the range clip
/// first via [`clip_to_invertible`].
pub fn invert_output_nonlinearity(q: f64, gamma: &[f64; 4]) -> Result<f64> {
    if gamma[0] == 0.0 || gamma[3] == 0.0 {
        return Err(Error::Contract(
            "output nonlinearity is not invertible when g1 = 0 or g4 = 0".into(),
        ));
    }
    let s = (q - gamma[2]) / gamma[3];
    if !(s > 0.0 && s < 1.0) {
        let (lo, hi) = output_range(gamma);
        return Err(Error::OutOfRange { value: q, lo, hi });
    }
    Ok(((s / (1.0 - s)).ln() - gamma[1]) / gamma[0])
}

/// Clips `q` into the invertible range of the output nonlinearity with the
/// relative margin `INVERT_CLIP_MARGIN`, so a partially trained sigmoid can
/// still absorb measured values outside its current range.
pub fn clip_to_invertible(q: f64, gamma: &[f64; 4]) -> f64 {
    let s = (q - gamma[2]) / gamma[3];
    let s = s.clamp(INVERT_CLIP_MARGIN, 1.0 - INVERT_CLIP_MARGIN);
    gamma[2] + s * gamma[3]
}

/// One step of the IIR recursion.
///
/// `u_window` holds `u[t-r..t]` and `v_window` holds `v[t-r..t-1]`, both in
/// chronological order (oldest first).
pub fn filter_step(u_window: &[f64], v_window: &[f64], b: &[f64], f: &[f64]) -> Result<f64> {
    if b.len() != f.len() + 1 {
        return Err(Error::Contract(format!(
            "b has {} taps but f has {}; expected len(b) = len(f) + 1",
            b.len(),
            f.len()
        )));
    }
    if u_window.len() != b.len() || v_window.len() != f.len() {
        return Err(Error::Contract(format!(
            "window lengths ({}, {}) do not match tap counts ({}, {})",
            u_window.len(),
            v_window.len(),
            b.len(),
            f.len()
        )));
    }
    let feedforward: f64 = b.iter().zip(u_window.iter().rev()).map(|(c, u)| c * u).sum();
    let feedback: f64 = f.iter().zip(v_window.iter().rev()).map(|(c, v)| c * v).sum();
    Ok(feedforward + feedback)
}

/// Runs the latent recursion over a full input series. `v_init` supplies the
/// first `f.len()` samples.
pub(crate) fn run_filter(u: &[f64], b: &[f64], f: &[f64], v_init: &[f64]) -> Vec<f64> {
    let r = f.len();
    let mut v = Vec::with_capacity(u.len());
    v.extend_from_slice(v_init);
    for t in r..u.len() {
        let mut acc = 0.0;
        for (d, bd) in b.iter().enumerate() {
            acc += bd * u[t - d];
        }
        for (d, fd) in f.iter().enumerate() {
            acc += fd * v[t - 1 - d];
        }
        v.push(acc);
    }
    v
}

fn initial_state(policy: &InitPolicy, params: &HwParams, u_first: f64) -> Result<Vec<f64>> {
    match policy {
        InitPolicy::ZeroState => Ok(vec![0.0; params.r]),
        InitPolicy::Pinned(v_init) => {
            if v_init.len() != params.r {
                return Err(Error::Contract(format!(
                    "pinned initial state must have r = {} entries, got {}",
                    params.r,
                    v_init.len()
                )));
            }
            if v_init.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("non-finite pinned initial state".into()));
            }
            Ok(v_init.clone())
        }
        InitPolicy::HoldFirstInput => {
            let den = 1.0 - params.f.iter().sum::<f64>();
            if den.abs() < 1e-12 {
                return Err(Error::Contract(
                    "hold-first-input is undefined: filter DC gain diverges (sum f = 1)".into(),
                ));
            }
            Ok(vec![u_first * params.dc_gain(); params.r])
        }
    }
}

fn simulate_impl(
    stsq: &StsqTrace,
    params: &HwParams,
    policy: InitPolicy,
    check_stability: bool,
    output: impl Fn(f64) -> f64,
) -> Result<PredictedTrace> {
    params.validate()?;
    if check_stability {
        params.check_stable(1.0)?;
    }
    if stsq.len() < params.r + 1 {
        return Err(Error::Contract(format!(
            "trace length {} must be at least r+1 = {}",
            stsq.len(),
            params.r + 1
        )));
    }
    let u: Vec<f64> = stsq
        .values
        .iter()
        .map(|&q| input_nonlinearity(q, &params.beta))
        .collect();
    let v_init = initial_state(&policy, params, u[0])?;
    let v = run_filter(&u, &params.b, &params.f, &v_init);
    let values = v.iter().map(|&vt| output(vt)).collect();
    Ok(PredictedTrace {
        values,
        warmup: params.r,
        init_policy: policy,
    })
}

/// Predicts TVSQ from an STSQ trace. Requires a stable filter; use
/// [`simulate_allow_unstable`] for diagnostics on unstable parameters.
pub fn simulate(stsq: &StsqTrace, params: &HwParams, policy: InitPolicy) -> Result<PredictedTrace> {
    simulate_impl(stsq, params, policy, true, |v| {
        output_nonlinearity(v, &params.gamma)
    })
}

/// [`simulate`] without the stability precondition.
pub fn simulate_allow_unstable(
    stsq: &StsqTrace,
    params: &HwParams,
    policy: InitPolicy,
) -> Result<PredictedTrace> {
    simulate_impl(stsq, params, policy, false, |v| {
        output_nonlinearity(v, &params.gamma)
    })
}

/// [`simulate`] with the output nonlinearity replaced by `q = a*v + b_off`.
/// The `gamma` entries of `params` are ignored.
pub fn simulate_linear_output(
    stsq: &StsqTrace,
    params: &HwParams,
    lin: &LinearOutputParams,
    policy: InitPolicy,
) -> Result<PredictedTrace> {
    lin.validate()?;
    simulate_impl(stsq, params, policy, true, |v| lin.a * v + lin.b_off)
}
