//! Model identification: outage-rate objective, smoothed penalty, recursive
//! gradients through the IIR structure, stability-guarded backtracking
//! descent and the sharpness-continuation training loop.
//!
//! The trainable objective is
//!
//! ```text
//! E_apx(theta) = 1/(N(T-r)) * sum_n sum_{t=r+1}^{T} U_nu(qhat_n[t] - qtv_n[t], eps_n[t])
//! ```
//!
//! where `U_nu` smoothly approximates the indicator `1(|x| > 2*eps)` and the
//! first r outputs of every trace are pinned to the measured TVSQ through the
//! inverted output nonlinearity. The sum deliberately starts at t = r+1: the
//! pinned samples have zero error by construction and would otherwise dilute
//! the objective.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    clip_to_invertible, input_nonlinearity, invert_output_nonlinearity, output_nonlinearity,
    run_filter, sigmoid, sigmoid_slope, HwParams, InitPolicy, PredictedTrace, StsqTrace,
    TvsqTrace, INVERT_CLIP_MARGIN, NEAR_IDENTITY,
};

/// Line-search steps below this size count as underflow and stall the stage.
const STEP_FLOOR: f64 = 1e-12;

/// Below this trace count the per-trace work is cheaper than the fork/join
/// overhead, so objective and gradient run sequentially. Either way the
/// per-trace results are reduced in index order, so values are identical.
const PAR_MIN_TRACES: usize = 8;

fn map_traces<T, F>(items: &[TraceRecord], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &TraceRecord) -> Result<T> + Sync + Send,
{
    if items.len() >= PAR_MIN_TRACES {
        items
            .par_iter()
            .enumerate()
            .map(|(n, item)| f(n, item))
            .collect()
    } else {
        items
            .iter()
            .enumerate()
            .map(|(n, item)| f(n, item))
            .collect()
    }
}

/// One (STSQ, measured TVSQ) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stsq: StsqTrace,
    pub tvsq: TvsqTrace,
}

/// A set of equal-length traces used for training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDataset {
    pub items: Vec<TraceRecord>,
}

impl TrainingDataset {
    pub fn new(items: Vec<TraceRecord>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Contract("dataset must contain at least one trace".into()));
        }
        let len = items[0].stsq.len();
        for (n, item) in items.iter().enumerate() {
            if item.stsq.len() != len || item.tvsq.len() != len {
                return Err(Error::Contract(format!(
                    "trace {n} length differs from trace 0 ({} / {} vs {len})",
                    item.stsq.len(),
                    item.tvsq.len()
                )));
            }
        }
        Ok(TrainingDataset { items })
    }

    pub fn n_traces(&self) -> usize {
        self.items.len()
    }

    pub fn trace_len(&self) -> usize {
        self.items[0].stsq.len()
    }
}

/// Knobs of Algorithms 1-2. Defaults are the published constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Initial penalty sharpness.
    pub nu_init: f64,
    /// Multiplicative sharpness increase per outer stage.
    pub nu_factor: f64,
    /// The continuation stops once `nu >= nu_max`.
    pub nu_max: f64,
    /// Sufficient-decrease coefficient of the Armijo condition.
    pub armijo_coeff: f64,
    /// Step shrink factor of the backtracking line search.
    pub backtrack_factor: f64,
    /// A stage terminates when the per-iteration decrease falls below this.
    pub descent_tol: f64,
    /// Line-search step at the start of each descent iteration.
    pub initial_step: f64,
    /// Accepted iterates must satisfy `rho(f) < stability_margin`.
    pub stability_margin: f64,
    /// Safety cap on continuation stages.
    pub max_outer_iters: usize,
    /// Safety cap on descent iterations per stage.
    pub max_descent_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            nu_init: 0.8,
            nu_factor: 1.2,
            nu_max: 20.0,
            armijo_coeff: 0.1,
            backtrack_factor: 0.7,
            descent_tol: 1e-5,
            initial_step: 1.0,
            stability_margin: 1.0 - 1e-6,
            max_outer_iters: 64,
            max_descent_iters: 20_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.nu_init > 0.0
            && self.nu_factor > 1.0
            && self.nu_max > self.nu_init
            && self.armijo_coeff > 0.0
            && self.armijo_coeff < 1.0
            && self.backtrack_factor > 0.0
            && self.backtrack_factor < 1.0
            && self.descent_tol > 0.0
            && self.initial_step > 0.0
            && self.stability_margin > 0.0
            && self.stability_margin <= 1.0
            && self.max_outer_iters >= 1
            && self.max_descent_iters >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("invalid training configuration".into()))
        }
    }
}

/// The sharpness values visited by the continuation: `nu_init * nu_factor^k`
/// for k = 0, 1, ... while the value stays below `nu_max`.
pub fn nu_schedule(config: &TrainConfig) -> Vec<f64> {
    let mut out = Vec::new();
    let mut nu = config.nu_init;
    while nu < config.nu_max && out.len() < config.max_outer_iters {
        out.push(nu);
        nu *= config.nu_factor;
    }
    out
}

/// Per-stage summary stored in the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub nu: f64,
    pub e_apx: f64,
    pub e_true: f64,
    pub iterations: usize,
    pub stalled: bool,
}

/// Outcome of a full training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub theta_star: HwParams,
    /// True outage rate of `theta_star` on the training data.
    pub final_outage: f64,
    pub objective_history: Vec<StageRecord>,
    /// Gradient norms of every descent iteration, across all stages.
    pub gradient_norm_history: Vec<f64>,
    /// Largest root radius among all accepted line-search iterates.
    pub max_accepted_rho: f64,
    pub accepted_steps: usize,
    pub stalled_stages: Vec<usize>,
    pub wall_time_s: f64,
}

/// Smoothed indicator penalty `U_nu(x, eps)`.
///
/// Built from two logistic steps centered at `x = +-2*eps`; approaches
/// `1(|x| > 2*eps)` pointwise as `nu` grows.
pub fn penalty(x: f64, eps: f64, nu: f64) -> f64 {
    sigmoid(nu * (x - 2.0 * eps)) + (1.0 - sigmoid(nu * (x + 2.0 * eps)))
}

/// Analytic `d U_nu / d x`, verified against central differences in tests.
pub fn penalty_derivative(x: f64, eps: f64, nu: f64) -> f64 {
    nu * (sigmoid_slope(nu * (x - 2.0 * eps)) - sigmoid_slope(nu * (x + 2.0 * eps)))
}

/// Fraction of post-warm-up samples whose prediction misses the measurement
/// by more than twice the confidence half-width.
pub fn outage_rate(pred: &PredictedTrace, meas: &TvsqTrace, warmup: usize) -> Result<f64> {
    if pred.values.len() != meas.len() {
        return Err(Error::Contract(format!(
            "prediction ({}) and measurement ({}) lengths differ",
            pred.values.len(),
            meas.len()
        )));
    }
    if warmup >= meas.len() {
        return Err(Error::Contract("warm-up covers the whole trace".into()));
    }
    let violations = (warmup..meas.len())
        .filter(|&t| (pred.values[t] - meas.values[t]).abs() > 2.0 * meas.ci[t])
        .count();
    Ok(violations as f64 / (meas.len() - warmup) as f64)
}

/// Root radius of the polynomial `z^r - sum_{d=1..r} f_d z^(r-d)`, computed
/// from the eigenvalues of its companion matrix.
pub fn spectral_radius(f: &[f64]) -> f64 {
    if f.iter().any(|c| !c.is_finite()) {
        return f64::INFINITY;
    }
    if f.iter().all(|&c| c == 0.0) {
        return 0.0;
    }
    let r = f.len();
    let companion = DMatrix::from_fn(r, r, |i, j| {
        if i == 0 {
            f[j]
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    companion
        .complex_eigenvalues()
        .iter()
        .map(|e| e.norm())
        .fold(0.0, f64::max)
}

/// Latent initial state used for training: the measured TVSQ of the first r
/// samples, clipped into the invertible range and passed through the inverse
/// output nonlinearity.
pub fn pinned_initial_state(params: &HwParams, tvsq: &TvsqTrace) -> Result<Vec<f64>> {
    (0..params.r)
        .map(|j| {
            let q = clip_to_invertible(tvsq.values[j], &params.gamma);
            invert_output_nonlinearity(q, &params.gamma)
        })
        .collect()
}

/// Forward pass of one trace under pinned initialization.
struct TraceForward {
    u: Vec<f64>,
    v: Vec<f64>,
    /// Logistic coordinate of each pinned sample and whether it was clipped.
    pin: Vec<(f64, bool)>,
}

fn forward_pinned(params: &HwParams, stsq: &StsqTrace, tvsq: &TvsqTrace, n: usize) -> Result<TraceForward> {
    if params.gamma[0] == 0.0 || params.gamma[3] == 0.0 {
        return Err(Error::Contract(
            "output nonlinearity is not invertible when g1 = 0 or g4 = 0".into(),
        ));
    }
    let r = params.r;
    if stsq.len() < r + 1 {
        return Err(Error::Contract(format!(
            "trace length {} must exceed the model order {}",
            stsq.len(),
            r
        )));
    }
    let u: Vec<f64> = stsq
        .values
        .iter()
        .map(|&q| input_nonlinearity(q, &params.beta))
        .collect();
    let mut pin = Vec::with_capacity(r);
    let mut v_init = Vec::with_capacity(r);
    for j in 0..r {
        let s_raw = (tvsq.values[j] - params.gamma[2]) / params.gamma[3];
        let s = s_raw.clamp(INVERT_CLIP_MARGIN, 1.0 - INVERT_CLIP_MARGIN);
        let clipped = s != s_raw;
        let v = ((s / (1.0 - s)).ln() - params.gamma[1]) / params.gamma[0];
        if !v.is_finite() {
            return Err(Error::OutOfRange {
                value: tvsq.values[j],
                lo: crate::model::output_range(&params.gamma).0,
                hi: crate::model::output_range(&params.gamma).1,
            }
            .in_trace(n, j + 1));
        }
        pin.push((s, clipped));
        v_init.push(v);
    }
    let v = run_filter(&u, &params.b, &params.f, &v_init);
    Ok(TraceForward { u, v, pin })
}

fn trace_penalty_sum(params: &HwParams, item: &TraceRecord, nu: f64, n: usize) -> Result<f64> {
    let fw = forward_pinned(params, &item.stsq, &item.tvsq, n)?;
    let r = params.r;
    let mut sum = 0.0;
    for t in r..fw.v.len() {
        let qhat = output_nonlinearity(fw.v[t], &params.gamma);
        sum += penalty(qhat - item.tvsq.values[t], item.tvsq.ci[t], nu);
    }
    Ok(sum)
}

/// Smoothed objective `E_apx` over all traces and post-warm-up samples.
pub fn approx_objective(params: &HwParams, data: &TrainingDataset, nu: f64) -> Result<f64> {
    params.validate()?;
    params.check_stable(1.0)?;
    let r = params.r;
    let t_len = data.trace_len();
    if t_len <= r {
        return Err(Error::Contract("traces are shorter than the model order".into()));
    }
    let sums = map_traces(&data.items, |n, item| trace_penalty_sum(params, item, nu, n))?;
    let total: f64 = sums.iter().sum();
    Ok(total / (data.n_traces() as f64 * (t_len - r) as f64))
}

/// True (indicator) outage rate of `params` on a dataset, pinned init,
/// pooled over all post-warm-up samples.
pub fn dataset_outage(params: &HwParams, data: &TrainingDataset) -> Result<f64> {
    params.validate()?;
    params.check_stable(1.0)?;
    let r = params.r;
    let counts = map_traces(&data.items, |n, item| {
        let fw = forward_pinned(params, &item.stsq, &item.tvsq, n)?;
        Ok((r..fw.v.len())
            .filter(|&t| {
                let qhat = output_nonlinearity(fw.v[t], &params.gamma);
                (qhat - item.tvsq.values[t]).abs() > 2.0 * item.tvsq.ci[t]
            })
            .count())
    })?;
    let total: usize = counts.iter().sum();
    Ok(total as f64 / (data.n_traces() as f64 * (data.trace_len() - r) as f64))
}

/// Static gradient of the output nonlinearity with respect to `gamma` at a
/// latent value.
fn output_gamma_grad(v: f64, gamma: &[f64; 4]) -> [f64; 4] {
    let z = gamma[0] * v + gamma[1];
    let s = sigmoid(z);
    let sp = sigmoid_slope(z);
    [gamma[3] * v * sp, gamma[3] * sp, 1.0, s]
}

/// Gradient of the input nonlinearity with respect to `beta`.
fn input_beta_grad(q: f64, beta: &[f64; 4]) -> [f64; 4] {
    let z = beta[0] * q + beta[1];
    let s = sigmoid(z);
    let sp = sigmoid_slope(z);
    [beta[3] * q * sp, beta[3] * sp, 1.0, s]
}

/// Sensitivity of one pinned latent sample to `gamma`, by the implicit
/// function theorem on `k_gamma(v) = q_pinned`. Clipped samples track the
/// moving clip boundary, which cancels the g3/g4 dependence.
fn pin_gamma_grad(v: f64, s: f64, clipped: bool, gamma: &[f64; 4]) -> [f64; 4] {
    let d1 = -v / gamma[0];
    let d2 = -1.0 / gamma[0];
    if clipped {
        [d1, d2, 0.0, 0.0]
    } else {
        let slope = gamma[0] * gamma[3] * s * (1.0 - s);
        [d1, d2, -1.0 / slope, -s / slope]
    }
}

fn trace_gradient(
    params: &HwParams,
    item: &TraceRecord,
    nu: f64,
    n: usize,
) -> Result<Vec<f64>> {
    let fw = forward_pinned(params, &item.stsq, &item.tvsq, n)?;
    let r = params.r;
    let t_len = fw.v.len();
    let dim = params.dim();
    let (bs, fs, betas, gammas) = (0, r + 1, 2 * r + 1, 2 * r + 5);

    let du_dbeta: Vec<[f64; 4]> = item
        .stsq
        .values
        .iter()
        .map(|&q| input_beta_grad(q, &params.beta))
        .collect();

    // dv[t] starts at zero for b, f and beta; the pinned state depends on
    // gamma through the inverse output map, so the gamma block is seeded
    // with that sensitivity and propagates through the same feedback.
    // Rows live in one flat buffer with stride `dim`.
    let mut dv = vec![0.0; t_len * dim];
    for j in 0..r {
        let g = pin_gamma_grad(fw.v[j], fw.pin[j].0, fw.pin[j].1, &params.gamma);
        dv[j * dim + gammas..j * dim + gammas + 4].copy_from_slice(&g);
    }

    let mut grad = vec![0.0; dim];
    for t in r..t_len {
        let (past, row) = dv.split_at_mut(t * dim);
        let row = &mut row[..dim];
        // feedback propagation, shared by every parameter block
        for (d, fd) in params.f.iter().enumerate() {
            let prev = &past[(t - 1 - d) * dim..(t - d) * dim];
            for p in 0..dim {
                row[p] += fd * prev[p];
            }
        }
        // direct terms
        for d in 0..=r {
            row[bs + d] += fw.u[t - d];
        }
        for d in 1..=r {
            row[fs + d - 1] += fw.v[t - d];
        }
        for (d, bd) in params.b.iter().enumerate() {
            let du = &du_dbeta[t - d];
            for i in 0..4 {
                row[betas + i] += bd * du[i];
            }
        }

        let qhat = output_nonlinearity(fw.v[t], &params.gamma);
        let kp = crate::model::output_slope(fw.v[t], &params.gamma);
        let stat = output_gamma_grad(fw.v[t], &params.gamma);
        let w = penalty_derivative(qhat - item.tvsq.values[t], item.tvsq.ci[t], nu);
        let wk = w * kp;
        for p in 0..dim {
            grad[p] += wk * row[p];
        }
        for i in 0..4 {
            grad[gammas + i] += w * stat[i];
        }
    }
    Ok(grad)
}

/// Analytic gradient of [`approx_objective`], laid out as
/// `[b_0..b_r, f_1..f_r, beta_1..beta_4, gamma_1..gamma_4]`.
pub fn gradient(params: &HwParams, data: &TrainingDataset, nu: f64) -> Result<Vec<f64>> {
    params.validate()?;
    params.check_stable(1.0)?;
    let r = params.r;
    let t_len = data.trace_len();
    if t_len <= r {
        return Err(Error::Contract("traces are shorter than the model order".into()));
    }
    let per_trace = map_traces(&data.items, |n, item| trace_gradient(params, item, nu, n))?;
    let scale = 1.0 / (data.n_traces() as f64 * (t_len - r) as f64);
    let mut total = vec![0.0; params.dim()];
    for g in &per_trace {
        for (acc, gi) in total.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    for v in &mut total {
        *v *= scale;
    }
    Ok(total)
}

pub(crate) struct EngineOutcome {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub stalled: bool,
    pub gradient_norms: Vec<f64>,
    pub accepted: Vec<f64>,
}

/// Characteristic magnitude of each parameter, used to nondimensionalize the
/// descent: filter taps are O(1), sigmoid slopes O(1/RDMOS-range), sigmoid
/// centers O(1), offsets and amplitudes O(RDMOS-range). Steepest descent is
/// coordinate-dependent; stepping in these units keeps the search from being
/// dominated by the steep slope parameters.
pub(crate) fn parameter_scales(r: usize) -> Vec<f64> {
    let mut s = vec![1.0; 2 * r + 9];
    for block in [2 * r + 1, 2 * r + 5] {
        s[block] = 0.05; // slope
        s[block + 1] = 1.0; // center
        s[block + 2] = 100.0; // offset
        s[block + 3] = 100.0; // amplitude
    }
    s
}

/// Backtracking gradient descent in rescaled coordinates `x_i / scale_i`.
///
/// A step moves `x_i` by `-omega * scale_i^2 * g_i`, i.e. plain steepest
/// descent on the nondimensionalized vector; the Armijo decrease uses the
/// squared step norm in the same coordinates. `admit` decides whether a
/// candidate may be evaluated at all and returns a value to record for it
/// (the root radius, for the real objective). Candidates that are
/// inadmissible or fail the sufficient decrease test shrink the step;
/// steps below `STEP_FLOOR` stall the run.
pub(crate) fn descend_engine(
    x0: Vec<f64>,
    scales: &[f64],
    mut objective: impl FnMut(&[f64]) -> Result<f64>,
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    admit: impl Fn(&[f64]) -> Option<f64>,
    config: &TrainConfig,
) -> Result<EngineOutcome> {
    let mut x = x0;
    if scales.len() != x.len() {
        return Err(Error::Contract("scale vector length mismatch".into()));
    }
    let scale2: Vec<f64> = scales.iter().map(|s| s * s).collect();
    let mut fx = objective(&x)?;
    let mut gradient_norms = Vec::new();
    let mut accepted = Vec::new();
    let mut iterations = 0;
    let mut stalled = false;

    while iterations < config.max_descent_iters {
        let g = grad(&x)?;
        gradient_norms.push(g.iter().map(|v| v * v).sum::<f64>().sqrt());
        // squared gradient norm in scaled coordinates
        let gs2: f64 = g.iter().zip(&scale2).map(|(gi, s2)| s2 * gi * gi).sum();

        let mut omega = config.initial_step;
        let mut step = None;
        loop {
            let cand: Vec<f64> = x
                .iter()
                .zip(&g)
                .zip(&scale2)
                .map(|((xi, gi), s2)| xi - omega * s2 * gi)
                .collect();
            if let Some(record) = admit(&cand) {
                if let Ok(fc) = objective(&cand) {
                    if fc.is_finite() && fc <= fx - config.armijo_coeff * omega * gs2 {
                        step = Some((cand, fc, record));
                        break;
                    }
                }
            }
            omega *= config.backtrack_factor;
            if omega < STEP_FLOOR {
                break;
            }
        }
        iterations += 1;
        match step {
            None => {
                stalled = true;
                break;
            }
            Some((cand, fc, record)) => {
                let decrease = fx - fc;
                x = cand;
                fx = fc;
                accepted.push(record);
                if decrease < config.descent_tol {
                    break;
                }
            }
        }
    }
    Ok(EngineOutcome {
        x,
        objective: fx,
        iterations,
        stalled,
        gradient_norms,
        accepted,
    })
}

/// Result of one descent stage.
#[derive(Debug, Clone)]
pub struct DescentResult {
    pub theta: HwParams,
    pub objective: f64,
    pub iterations: usize,
    pub stalled: bool,
    pub gradient_norms: Vec<f64>,
    /// Root radii of every accepted iterate, in acceptance order.
    pub accepted_rhos: Vec<f64>,
}

/// Minimizes `E_apx` at fixed sharpness by backtracking gradient descent.
/// Every accepted iterate satisfies `rho(f) < stability_margin`; a stalled
/// line search returns the last accepted point with the `stalled` flag set.
pub fn gradient_descent(
    theta0: &HwParams,
    data: &TrainingDataset,
    nu: f64,
    config: &TrainConfig,
) -> Result<DescentResult> {
    config.validate()?;
    theta0.validate()?;
    theta0.check_stable(config.stability_margin)?;
    let r = theta0.r;
    let outcome = descend_engine(
        theta0.to_vec(),
        &parameter_scales(r),
        |x| approx_objective(&HwParams::from_vec(r, x)?, data, nu),
        |x| gradient(&HwParams::from_vec(r, x)?, data, nu),
        |x| {
            let params = HwParams::from_vec(r, x).ok()?;
            let rho = params.rho();
            (rho < config.stability_margin).then_some(rho)
        },
        config,
    )?;
    Ok(DescentResult {
        theta: HwParams::from_vec(r, &outcome.x)?,
        objective: outcome.objective,
        iterations: outcome.iterations,
        stalled: outcome.stalled,
        gradient_norms: outcome.gradient_norms,
        accepted_rhos: outcome.accepted,
    })
}

/// Stable, well-scaled starting point: near-identity nonlinearities,
/// `b = (0.3, 0, ..., 0)`, `f = 0`.
pub fn initial_params(r: usize) -> HwParams {
    let mut b = vec![0.0; r + 1];
    b[0] = 0.3;
    HwParams {
        r,
        b,
        f: vec![0.0; r],
        beta: NEAR_IDENTITY,
        gamma: NEAR_IDENTITY,
    }
}

/// Full continuation training from an explicit starting point.
pub fn train_with_start(
    data: &TrainingDataset,
    theta0: HwParams,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    theta0.validate()?;
    if data.trace_len() <= theta0.r {
        return Err(Error::Contract("traces are shorter than the model order".into()));
    }
    let start = std::time::Instant::now();
    let mut theta = theta0;
    let mut objective_history = Vec::new();
    let mut gradient_norm_history = Vec::new();
    let mut stalled_stages = Vec::new();
    let mut max_accepted_rho: f64 = 0.0;
    let mut accepted_steps = 0;

    for (stage, nu) in nu_schedule(config).into_iter().enumerate() {
        let result = gradient_descent(&theta, data, nu, config)?;
        theta = result.theta;
        if result.stalled {
            log::warn!("descent stalled at stage {stage} (nu = {nu:.4})");
            stalled_stages.push(stage);
        }
        for rho in &result.accepted_rhos {
            max_accepted_rho = max_accepted_rho.max(*rho);
        }
        accepted_steps += result.accepted_rhos.len();
        gradient_norm_history.extend(result.gradient_norms);
        objective_history.push(StageRecord {
            nu,
            e_apx: result.objective,
            e_true: dataset_outage(&theta, data)?,
            iterations: result.iterations,
            stalled: result.stalled,
        });
    }

    let final_outage = objective_history
        .last()
        .map(|s| s.e_true)
        .unwrap_or(f64::NAN);
    Ok(TrainReport {
        theta_star: theta,
        final_outage,
        objective_history,
        gradient_norm_history,
        max_accepted_rho,
        accepted_steps,
        stalled_stages,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Trains an order-r model from the default initialization.
pub fn train(data: &TrainingDataset, r: usize, config: &TrainConfig) -> Result<TrainReport> {
    if r == 0 {
        return Err(Error::Contract("model order r must be >= 1".into()));
    }
    train_with_start(data, initial_params(r), config)
}

/// Pinned-init prediction of one trace, the simulation used by training and
/// evaluation.
pub fn predict_pinned(params: &HwParams, stsq: &StsqTrace, tvsq: &TvsqTrace) -> Result<PredictedTrace> {
    let v_init = pinned_initial_state(params, tvsq)?;
    crate::model::simulate(stsq, params, InitPolicy::Pinned(v_init))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SplitMix64;
    use approx::assert_relative_eq;

    #[test]
    fn penalty_indicator_limits() {
        assert_eq!(penalty(1e9, 1.0, 0.8), 1.0);
        assert_eq!(penalty(-1e9, 1.0, 0.8), 1.0);
    }

    #[test]
    fn penalty_frozen_values() {
        assert_relative_eq!(penalty(0.0, 1.0, 1.0), 0.23840584404423515, epsilon = 1e-12);
        // at the boundary the first step sits exactly at its center
        assert!((penalty(2.0, 1.0, 20.0) - 0.5).abs() < 1e-10 + (-80.0f64).exp());
    }

    #[test]
    fn penalty_sandwich_and_symmetry() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..500 {
            let x = (rng.next_f64() - 0.5) * 40.0;
            let eps = 0.1 + rng.next_f64() * 5.0;
            let nu = 0.1 + rng.next_f64() * 25.0;
            let u = penalty(x, eps, nu);
            assert!(u > 0.0 && u < 2.0);
            assert!((u - penalty(-x, eps, nu)).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_pointwise_convergence() {
        // |U_nu - indicator| <= 2 exp(-nu * dist) away from the thresholds
        let nu = 20.0;
        for &eps in &[0.5, 1.0, 5.0] {
            for i in 0..400 {
                let x = -4.0 * eps + i as f64 * 0.02 * eps;
                let dist = ((x - 2.0 * eps).abs()).min((x + 2.0 * eps).abs());
                if dist < 0.25 {
                    continue;
                }
                let ind = if x.abs() > 2.0 * eps { 1.0 } else { 0.0 };
                assert!(
                    (penalty(x, eps, nu) - ind).abs() <= 2.0 * (-nu * dist).exp() + 1e-15,
                    "x={x} eps={eps}"
                );
            }
        }
    }

    #[test]
    fn penalty_derivative_zero_at_origin() {
        assert!(penalty_derivative(0.0, 1.0, 5.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_derivative_matches_central_differences() {
        // draws sit in the transition bands around +-2*eps where the
        // derivative is well above the finite-difference noise floor
        let mut rng = SplitMix64::new(99);
        let h = 1e-6;
        for _ in 0..1000 {
            let eps = 0.5 + rng.next_f64() * 4.5;
            let nu = 0.5 + rng.next_f64() * 9.5;
            let side = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            let spread = (4.0 / nu).min(2.0 * eps) * 0.999;
            let x = side * 2.0 * eps + (rng.next_f64() - 0.5) * spread;
            let analytic = penalty_derivative(x, eps, nu);
            let fd = (penalty(x + h, eps, nu) - penalty(x - h, eps, nu)) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs());
            assert!(
                ((analytic - fd) / denom).abs() < 1e-6,
                "x={x} eps={eps} nu={nu}: {analytic} vs {fd}"
            );
        }
    }

    #[test]
    fn penalty_derivative_vanishes_with_nu() {
        for i in 0..100 {
            let x = -10.0 + i as f64 * 0.2;
            assert!(penalty_derivative(x, 1.0, 1e-12).abs() <= 1e-12);
        }
    }

    #[test]
    fn outage_rate_examples() {
        let meas = TvsqTrace::new(vec![50.0; 12], vec![1.0; 12]).unwrap();
        let exact = PredictedTrace {
            values: vec![50.0; 12],
            warmup: 2,
            init_policy: InitPolicy::ZeroState,
        };
        assert_eq!(outage_rate(&exact, &meas, 2).unwrap(), 0.0);

        let all_off = PredictedTrace {
            values: vec![53.0; 12],
            warmup: 2,
            init_policy: InitPolicy::ZeroState,
        };
        assert_eq!(outage_rate(&all_off, &meas, 2).unwrap(), 1.0);

        // 10 counted samples, exactly 2 violating
        let mut values = vec![50.0; 12];
        values[5] = 55.0;
        values[9] = 44.0;
        let two = PredictedTrace {
            values,
            warmup: 2,
            init_policy: InitPolicy::ZeroState,
        };
        assert_eq!(outage_rate(&two, &meas, 2).unwrap(), 0.2);
    }

    #[test]
    fn spectral_radius_examples() {
        assert_eq!(spectral_radius(&[]), 0.0);
        assert_eq!(spectral_radius(&[0.0, 0.0]), 0.0);
        assert_relative_eq!(spectral_radius(&[0.5]), 0.5, epsilon = 1e-10);
        assert_relative_eq!(spectral_radius(&[0.0, 0.25]), 0.5, epsilon = 1e-10);
        assert_relative_eq!(spectral_radius(&[1.0]), 1.0, epsilon = 1e-10);
        // trailing zero keeps the root set
        assert_relative_eq!(spectral_radius(&[0.5, 0.0, 0.0]), 0.5, epsilon = 1e-10);
        assert_eq!(spectral_radius(&[f64::NAN]), f64::INFINITY);
    }

    #[test]
    fn spectral_radius_known_factorization() {
        // (z - 0.9)(z + 0.4)(z - 0.1) = z^3 - 0.6 z^2 - 0.31 z + 0.036
        // so f = (0.6, 0.31, -0.036)
        assert_relative_eq!(spectral_radius(&[0.6, 0.31, -0.036]), 0.9, epsilon = 1e-10);
    }

    fn rng_stable_f(rng: &mut SplitMix64, r: usize, mass: f64) -> Vec<f64> {
        // sum |f_d| <= mass < 1 guarantees every root stays inside the unit circle
        let raw: Vec<f64> = (0..r).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let total: f64 = raw.iter().map(|v| v.abs()).sum();
        if total == 0.0 {
            return vec![0.0; r];
        }
        raw.iter().map(|v| v * mass / total.max(mass)).collect()
    }

    fn random_params(rng: &mut SplitMix64, r: usize) -> HwParams {
        let mass = 0.5 + rng.next_f64() * 0.4;
        let f = rng_stable_f(rng, r, mass);
        // controlled DC gain keeps the output sigmoid unsaturated
        let raw_b: Vec<f64> = (0..=r).map(|_| rng.next_f64() * 0.4 - 0.05).collect();
        let gain = 0.3 + rng.next_f64() * 0.9;
        let scale = gain * (1.0 - f.iter().sum::<f64>()) / raw_b.iter().sum::<f64>().max(0.05);
        let b: Vec<f64> = raw_b.iter().map(|v| v * scale).collect();
        // wide gamma range keeps pinned inversions far from the clip margin
        let beta = [
            0.03 + rng.next_f64() * 0.03,
            -2.5 + rng.next_f64(),
            rng.next_f64() * 4.0 - 2.0,
            95.0 + rng.next_f64() * 20.0,
        ];
        let gamma = [
            0.03 + rng.next_f64() * 0.03,
            -2.5 + rng.next_f64(),
            -6.0 + rng.next_f64() * 4.0,
            105.0 + rng.next_f64() * 20.0,
        ];
        HwParams::new(b, f, beta, gamma).unwrap()
    }

    fn random_dataset(rng: &mut SplitMix64, n: usize, t_len: usize) -> TrainingDataset {
        let items = (0..n)
            .map(|_| {
                let stsq = StsqTrace::new(
                    (0..t_len).map(|_| 20.0 + rng.next_f64() * 60.0).collect(),
                )
                .unwrap();
                let tvsq = TvsqTrace::new(
                    (0..t_len).map(|_| 25.0 + rng.next_f64() * 50.0).collect(),
                    vec![2.0; t_len],
                )
                .unwrap();
                TraceRecord { stsq, tvsq }
            })
            .collect();
        TrainingDataset::new(items).unwrap()
    }

    #[test]
    fn objective_flat_penalty_is_one() {
        let mut rng = SplitMix64::new(3);
        let params = random_params(&mut rng, 2);
        let data = random_dataset(&mut rng, 2, 40);
        assert_eq!(approx_objective(&params, &data, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn objective_single_trace_consistency() {
        let mut rng = SplitMix64::new(4);
        let params = random_params(&mut rng, 2);
        let data = random_dataset(&mut rng, 1, 60);
        let obj = approx_objective(&params, &data, 2.0).unwrap();
        let fw = forward_pinned(&params, &data.items[0].stsq, &data.items[0].tvsq, 0).unwrap();
        let mut manual = 0.0;
        for t in params.r..fw.v.len() {
            let qhat = output_nonlinearity(fw.v[t], &params.gamma);
            manual += penalty(qhat - data.items[0].tvsq.values[t], 2.0, 2.0);
        }
        manual /= (data.trace_len() - params.r) as f64;
        assert_relative_eq!(obj, manual, epsilon = 1e-14);
    }

    #[test]
    fn objective_rejects_unstable() {
        let mut rng = SplitMix64::new(5);
        let data = random_dataset(&mut rng, 1, 30);
        let params =
            HwParams::new(vec![0.3, 0.0], vec![1.01], NEAR_IDENTITY, NEAR_IDENTITY).unwrap();
        assert!(matches!(
            approx_objective(&params, &data, 1.0),
            Err(Error::Unstable { .. })
        ));
    }

    fn fd_gradient(params: &HwParams, data: &TrainingDataset, nu: f64, h: f64) -> Vec<f64> {
        let theta = params.to_vec();
        (0..theta.len())
            .map(|i| {
                let mut plus = theta.clone();
                plus[i] += h;
                let mut minus = theta.clone();
                minus[i] -= h;
                let fp =
                    approx_objective(&HwParams::from_vec(params.r, &plus).unwrap(), data, nu)
                        .unwrap();
                let fm =
                    approx_objective(&HwParams::from_vec(params.r, &minus).unwrap(), data, nu)
                        .unwrap();
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    /// Data whose measured TVSQ stays close to the model output, so penalty
    /// slopes are alive and pinned samples sit far from the clip margin.
    fn coherent_dataset(rng: &mut SplitMix64, params: &HwParams, n: usize, t_len: usize) -> TrainingDataset {
        let items = (0..n)
            .map(|_| {
                let stsq = StsqTrace::new(
                    (0..t_len).map(|_| 25.0 + rng.next_f64() * 50.0).collect(),
                )
                .unwrap();
                let clean = crate::model::simulate(&stsq, params, InitPolicy::ZeroState).unwrap();
                let values: Vec<f64> = clean
                    .values
                    .iter()
                    .map(|q| q + rng.next_normal(0.0, 3.0))
                    .collect();
                let tvsq = TvsqTrace::new(values, vec![2.0; t_len]).unwrap();
                TraceRecord { stsq, tvsq }
            })
            .collect();
        TrainingDataset::new(items).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(11);
        for &r in &[1usize, 3] {
            for _ in 0..5 {
                let params = random_params(&mut rng, r);
                let data = coherent_dataset(&mut rng, &params, 2, 80);
                let analytic = gradient(&params, &data, 1.5).unwrap();
                let fd = fd_gradient(&params, &data, 1.5, 1e-6);
                let num: f64 = analytic
                    .iter()
                    .zip(&fd)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let den = analytic
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    .max(fd.iter().map(|v| v * v).sum::<f64>().sqrt());
                assert!(num / den < 1e-5, "rel err {} for r={r}", num / den);
            }
        }
    }

    #[test]
    fn gradient_fir_reduction() {
        // f = 0: the b-gradient is the penalty-weighted u-window, no recursion
        let mut rng = SplitMix64::new(13);
        let r = 3;
        let b: Vec<f64> = (0..=r).map(|_| rng.next_f64() * 0.3).collect();
        let params = HwParams::new(b, vec![0.0; r], NEAR_IDENTITY, NEAR_IDENTITY).unwrap();
        let data = coherent_dataset(&mut rng, &params, 1, 60);
        let nu = 2.0;
        let grad = gradient(&params, &data, nu).unwrap();

        let item = &data.items[0];
        let fw = forward_pinned(&params, &item.stsq, &item.tvsq, 0).unwrap();
        let scale = 1.0 / (data.trace_len() - r) as f64;
        for j in 0..=r {
            let mut direct = 0.0;
            for t in r..fw.v.len() {
                let qhat = output_nonlinearity(fw.v[t], &params.gamma);
                let w = penalty_derivative(qhat - item.tvsq.values[t], item.tvsq.ci[t], nu);
                let kp = crate::model::output_slope(fw.v[t], &params.gamma);
                direct += w * kp * fw.u[t - j];
            }
            assert_relative_eq!(grad[j], direct * scale, epsilon = 1e-12, max_relative = 1e-10);
        }
    }

    #[test]
    fn gradient_zero_error_is_stationary() {
        let mut rng = SplitMix64::new(17);
        let params = random_params(&mut rng, 2);
        let stsq = StsqTrace::new((0..100).map(|_| 25.0 + rng.next_f64() * 50.0).collect()).unwrap();
        let clean = crate::model::simulate(&stsq, &params, InitPolicy::ZeroState).unwrap();
        let tvsq = TvsqTrace::new(clean.values.clone(), vec![2.0; 100]).unwrap();
        let data = TrainingDataset::new(vec![TraceRecord { stsq, tvsq }]).unwrap();
        let grad = gradient(&params, &data, 5.0).unwrap();
        let norm: f64 = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "stationary gradient norm {norm}");
    }

    #[test]
    fn descent_quadratic_surrogate() {
        // swap the objective for a quadratic with a known minimum
        let target = [3.0, -1.5];
        let config = TrainConfig {
            descent_tol: 1e-12,
            max_descent_iters: 200,
            ..TrainConfig::default()
        };
        let outcome = descend_engine(
            vec![0.0, 0.0],
            &[1.0, 1.0],
            |x| {
                Ok(x.iter()
                    .zip(&target)
                    .map(|(xi, ti)| (xi - ti) * (xi - ti))
                    .sum())
            },
            |x| Ok(x.iter().zip(&target).map(|(xi, ti)| 2.0 * (xi - ti)).collect()),
            |_| Some(0.0),
            &config,
        )
        .unwrap();
        assert!(!outcome.stalled);
        assert!((outcome.x[0] - 3.0).abs() < 1e-4);
        assert!((outcome.x[1] + 1.5).abs() < 1e-4);
    }

    #[test]
    fn descent_stationary_start_returns_theta0() {
        let mut rng = SplitMix64::new(19);
        let params = random_params(&mut rng, 2);
        let stsq = StsqTrace::new((0..60).map(|_| 25.0 + rng.next_f64() * 50.0).collect()).unwrap();
        let clean = crate::model::simulate(&stsq, &params, InitPolicy::ZeroState).unwrap();
        let tvsq = TvsqTrace::new(clean.values.clone(), vec![2.0; 60]).unwrap();
        let data = TrainingDataset::new(vec![TraceRecord { stsq, tvsq }]).unwrap();
        let result = gradient_descent(&params, &data, 5.0, &TrainConfig::default()).unwrap();
        assert_eq!(result.iterations, 1);
        for (a, b) in result.theta.to_vec().iter().zip(params.to_vec()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn descent_accepted_iterates_stay_stable() {
        let mut rng = SplitMix64::new(23);
        let truth = random_params(&mut rng, 2);
        let data = coherent_dataset(&mut rng, &truth, 2, 80);
        let config = TrainConfig {
            max_descent_iters: 40,
            ..TrainConfig::default()
        };
        let result = gradient_descent(&initial_params(2), &data, 1.0, &config).unwrap();
        for rho in &result.accepted_rhos {
            assert!(*rho < 1.0);
        }
    }

    #[test]
    fn nu_schedule_has_18_stages() {
        let schedule = nu_schedule(&TrainConfig::default());
        assert_eq!(schedule.len(), 18);
        assert_relative_eq!(schedule[0], 0.8, epsilon = 1e-15);
        assert!(schedule[17] < 20.0 && schedule[17] * 1.2 >= 20.0);
    }

    #[test]
    fn train_is_deterministic() {
        let mut rng = SplitMix64::new(29);
        let truth = random_params(&mut rng, 1);
        let data = coherent_dataset(&mut rng, &truth, 2, 50);
        let config = TrainConfig {
            max_descent_iters: 10,
            max_outer_iters: 4,
            ..TrainConfig::default()
        };
        let a = train(&data, 1, &config).unwrap();
        let b = train(&data, 1, &config).unwrap();
        assert_eq!(a.theta_star, b.theta_star);
        assert_eq!(a.objective_history, b.objective_history);
        assert_eq!(a.gradient_norm_history, b.gradient_norm_history);
    }

    #[test]
    fn objective_monotone_within_stage() {
        let mut rng = SplitMix64::new(31);
        let truth = random_params(&mut rng, 2);
        let data = coherent_dataset(&mut rng, &truth, 2, 80);
        let config = TrainConfig {
            max_descent_iters: 30,
            ..TrainConfig::default()
        };
        // re-run the engine manually to observe accepted objective values
        let r = 2;
        let theta0 = initial_params(r);
        let nu = 0.8;
        let mut values = vec![approx_objective(&theta0, &data, nu).unwrap()];
        let mut theta = theta0;
        for _ in 0..5 {
            let result = gradient_descent(&theta, &data, nu, &TrainConfig {
                max_descent_iters: 1,
                ..config.clone()
            })
            .unwrap();
            theta = result.theta;
            values.push(result.objective);
        }
        for pair in values.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15);
        }
    }
}
