//! Thermal twin: grey-box RC-equivalent room models.
//!
//! Five lumped-circuit structures are supported, from a single air node up to
//! air + envelope + heater with a direct air-to-outside resistance. Time in the
//! ODEs is measured in hours; capacities, resistances and the heater gain are
//! in the model's own normalized units. Only the room temperature is observed,
//! which leaves one scale freedom (all C·k, all R/k, Phi·k give identical
//! trajectories), so fitted parameters are reported with `C_i = 1`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const BLOWUP_LIMIT: f64 = 200.0;
pub const R_BOUNDS: (f64, f64) = (0.05, 50.0);
pub const C_BOUNDS: (f64, f64) = (0.1, 100.0);
pub const PHI_BOUNDS: (f64, f64) = (0.0, 10.0);
/// Minimum number of aligned samples accepted by [`fit`] (one day at 15 min).
pub const MIN_FIT_SAMPLES: usize = 96;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ThermalError {
    #[error("state left the +/-{BLOWUP_LIMIT} degC envelope; parameters are unstable for this step")]
    NumericalBlowup,
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("room temperature series is constant; the fit is unidentifiable")]
    DegenerateSeries,
    #[error("series lengths differ: {0}")]
    Misaligned(String),
    #[error("invalid parameter {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    Ti,
    TiTh,
    TiTe,
    TiTeTh,
    TiTeThRia,
}

/// One adjustable parameter of the RC network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Ce,
    Ch,
    Ria,
    Rie,
    Rea,
    Rih,
    PhiH,
}

impl Param {
    fn bounds(self) -> (f64, f64) {
        match self {
            Param::Ce | Param::Ch => C_BOUNDS,
            Param::PhiH => PHI_BOUNDS,
            _ => R_BOUNDS,
        }
    }

    /// Capacities and resistances are searched in log space; the heater gain
    /// may be exactly zero so it stays linear.
    fn is_log(self) -> bool {
        self != Param::PhiH
    }
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Ti,
        ModelKind::TiTh,
        ModelKind::TiTe,
        ModelKind::TiTeTh,
        ModelKind::TiTeThRia,
    ];

    pub fn hidden_states(self) -> usize {
        match self {
            ModelKind::Ti => 1,
            ModelKind::TiTh | ModelKind::TiTe => 2,
            ModelKind::TiTeTh | ModelKind::TiTeThRia => 3,
        }
    }

    pub fn has_envelope(self) -> bool {
        matches!(self, ModelKind::TiTe | ModelKind::TiTeTh | ModelKind::TiTeThRia)
    }

    pub fn has_heater(self) -> bool {
        matches!(self, ModelKind::TiTh | ModelKind::TiTeTh | ModelKind::TiTeThRia)
    }

    /// Parameters estimated by [`fit`] (`C_i` is the fixed unit).
    pub fn free_params(self) -> &'static [Param] {
        use Param::*;
        match self {
            ModelKind::Ti => &[Ria, PhiH],
            ModelKind::TiTh => &[Ch, Ria, Rih, PhiH],
            ModelKind::TiTe => &[Ce, Rie, Rea, PhiH],
            ModelKind::TiTeTh => &[Ce, Ch, Rie, Rea, Rih, PhiH],
            ModelKind::TiTeThRia => &[Ce, Ch, Ria, Rie, Rea, Rih, PhiH],
        }
    }

    /// Number of physical parameters including `C_i`.
    pub fn param_count(self) -> usize {
        self.free_params().len() + 1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ti => "Ti",
            ModelKind::TiTh => "TiTh",
            ModelKind::TiTe => "TiTe",
            ModelKind::TiTeTh => "TiTeTh",
            ModelKind::TiTeThRia => "TiTeThRia",
        }
    }

    /// Ordering used to break MSE ties: fewer hidden states, then fewer parameters.
    fn complexity(self) -> (usize, usize, ModelKind) {
        (self.hidden_states(), self.param_count(), self)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown model kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalModelParams {
    #[serde(rename = "C_i")]
    pub c_i: f64,
    #[serde(rename = "C_e")]
    pub c_e: f64,
    #[serde(rename = "C_h")]
    pub c_h: f64,
    #[serde(rename = "R_ia")]
    pub r_ia: f64,
    #[serde(rename = "R_ie")]
    pub r_ie: f64,
    #[serde(rename = "R_ea")]
    pub r_ea: f64,
    #[serde(rename = "R_ih")]
    pub r_ih: f64,
    #[serde(rename = "Phi_h")]
    pub phi_h: f64,
    #[serde(default)]
    pub sigma: f64,
}

impl Default for ThermalModelParams {
    fn default() -> Self {
        ThermalModelParams {
            c_i: 1.0,
            c_e: 10.0,
            c_h: 0.5,
            r_ia: 5.0,
            r_ie: 2.0,
            r_ea: 5.0,
            r_ih: 1.0,
            phi_h: 2.0,
            sigma: 0.0,
        }
    }
}

impl ThermalModelParams {
    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::Ce => self.c_e,
            Param::Ch => self.c_h,
            Param::Ria => self.r_ia,
            Param::Rie => self.r_ie,
            Param::Rea => self.r_ea,
            Param::Rih => self.r_ih,
            Param::PhiH => self.phi_h,
        }
    }

    pub fn set(&mut self, p: Param, v: f64) {
        match p {
            Param::Ce => self.c_e = v,
            Param::Ch => self.c_h = v,
            Param::Ria => self.r_ia = v,
            Param::Rie => self.r_ie = v,
            Param::Rea => self.r_ea = v,
            Param::Rih => self.r_ih = v,
            Param::PhiH => self.phi_h = v,
        }
    }

    /// Checks positivity of every parameter the kind uses.
    pub fn validate(&self, kind: ModelKind) -> Result<(), ThermalError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.c_i) {
            return Err(ThermalError::InvalidParams("C_i".into()));
        }
        for p in kind.free_params() {
            let v = self.get(*p);
            let valid = if *p == Param::PhiH {
                v.is_finite() && v >= 0.0
            } else {
                ok(v)
            };
            if !valid {
                return Err(ThermalError::InvalidParams(format!("{p:?}")));
            }
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(ThermalError::InvalidParams("sigma".into()));
        }
        Ok(())
    }

    /// Same dynamics expressed with `C_i = 1`.
    pub fn normalized(&self) -> Self {
        let k = self.c_i;
        ThermalModelParams {
            c_i: 1.0,
            c_e: self.c_e / k,
            c_h: self.c_h / k,
            r_ia: self.r_ia * k,
            r_ie: self.r_ie * k,
            r_ea: self.r_ea * k,
            r_ih: self.r_ih * k,
            phi_h: self.phi_h / k,
            sigma: self.sigma,
        }
    }

    /// Largest relative deviation between the scale-free forms of two parameter
    /// sets, over the parameters `kind` uses.
    pub fn max_relative_error(&self, other: &Self, kind: ModelKind) -> f64 {
        let (a, b) = (self.normalized(), other.normalized());
        kind.free_params()
            .iter()
            .map(|p| ((a.get(*p) - b.get(*p)) / b.get(*p)).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalState {
    #[serde(rename = "T_i")]
    pub t_i: f64,
    #[serde(rename = "T_e")]
    pub t_e: f64,
    #[serde(rename = "T_h")]
    pub t_h: f64,
}

impl ThermalState {
    /// Hidden nodes start at the room temperature.
    pub fn at(t_i: f64) -> Self {
        ThermalState { t_i, t_e: t_i, t_h: t_i }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.t_i, self.t_e, self.t_h]
    }

    fn from_array(x: [f64; 3]) -> Self {
        ThermalState { t_i: x[0], t_e: x[1], t_h: x[2] }
    }

    /// The state components a kind actually models, in (T_i, T_e, T_h) order.
    pub fn features(&self, kind: ModelKind) -> Vec<f64> {
        let mut f = vec![self.t_i];
        if kind.has_envelope() {
            f.push(self.t_e);
        }
        if kind.has_heater() {
            f.push(self.t_h);
        }
        f
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExogenousInput {
    #[serde(rename = "T_a")]
    pub t_a: f64,
    /// Heating power fraction in [0, 1].
    pub a: f64,
}

/// Affine one-step map `x' = x + h (A x + B u)` with `u = (T_a, a)`.
#[derive(Debug, Clone, Copy)]
pub struct Discretized {
    a: [[f64; 3]; 3],
    b: [[f64; 2]; 3],
    h: f64,
}

impl Discretized {
    pub fn new(kind: ModelKind, p: &ThermalModelParams, dt_minutes: f64) -> Self {
        let mut a = [[0.0; 3]; 3];
        let mut b = [[0.0; 2]; 3];
        let ci = p.c_i;
        // direct air-to-ambient path
        if matches!(kind, ModelKind::Ti | ModelKind::TiTh | ModelKind::TiTeThRia) {
            a[0][0] -= 1.0 / (ci * p.r_ia);
            b[0][0] += 1.0 / (ci * p.r_ia);
        }
        if kind.has_envelope() {
            a[0][0] -= 1.0 / (ci * p.r_ie);
            a[0][1] += 1.0 / (ci * p.r_ie);
            a[1][0] += 1.0 / (p.c_e * p.r_ie);
            a[1][1] -= 1.0 / (p.c_e * p.r_ie) + 1.0 / (p.c_e * p.r_ea);
            b[1][0] += 1.0 / (p.c_e * p.r_ea);
        }
        if kind.has_heater() {
            a[0][0] -= 1.0 / (ci * p.r_ih);
            a[0][2] += 1.0 / (ci * p.r_ih);
            a[2][0] += 1.0 / (p.c_h * p.r_ih);
            a[2][2] -= 1.0 / (p.c_h * p.r_ih);
            b[2][1] += p.phi_h / p.c_h;
        } else {
            b[0][1] += p.phi_h / ci;
        }
        Discretized { a, b, h: dt_minutes / 60.0 }
    }

    #[inline]
    pub fn apply(&self, x: [f64; 3], t_a: f64, action: f64) -> [f64; 3] {
        let mut out = x;
        for (r, o) in out.iter_mut().enumerate() {
            let dx = self.a[r][0] * x[0]
                + self.a[r][1] * x[1]
                + self.a[r][2] * x[2]
                + self.b[r][0] * t_a
                + self.b[r][1] * action;
            *o += self.h * dx;
        }
        out
    }
}

/// One forward-Euler step. Process noise (`params.sigma`, on T_i only) is drawn
/// from `noise` when given; without it the step is deterministic.
pub fn step(
    kind: ModelKind,
    params: &ThermalModelParams,
    state: ThermalState,
    input: ExogenousInput,
    dt_minutes: f64,
    noise: Option<&mut dyn RngCore>,
) -> Result<ThermalState, ThermalError> {
    let d = Discretized::new(kind, params, dt_minutes);
    let mut x = d.apply(state.as_array(), input.t_a, input.a.clamp(0.0, 1.0));
    if let Some(rng) = noise {
        if params.sigma > 0.0 {
            x[0] += Normal::new(0.0, params.sigma).unwrap().sample(rng);
        }
    }
    if x.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT) {
        return Err(ThermalError::NumericalBlowup);
    }
    Ok(ThermalState::from_array(x))
}

/// Deterministic rollout; element k is the state after input k.
pub fn simulate(
    kind: ModelKind,
    params: &ThermalModelParams,
    init: ThermalState,
    inputs: &[ExogenousInput],
    dt_minutes: f64,
) -> Result<Vec<ThermalState>, ThermalError> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut s = init;
    for u in inputs {
        s = step(kind, params, s, *u, dt_minutes, None)?;
        out.push(s);
    }
    Ok(out)
}

/// Rollout with process noise drawn from a seeded generator.
pub fn simulate_noisy(
    kind: ModelKind,
    params: &ThermalModelParams,
    init: ThermalState,
    inputs: &[ExogenousInput],
    dt_minutes: f64,
    seed: u64,
) -> Result<Vec<ThermalState>, ThermalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(inputs.len());
    let mut s = init;
    for u in inputs {
        s = step(kind, params, s, *u, dt_minutes, Some(&mut rng))?;
        out.push(s);
    }
    Ok(out)
}

/// Aligned observations on a regular grid. `t_a[k]` and `action[k]` act over
/// the interval from sample k to sample k+1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservedSeries {
    pub t_i: Vec<f64>,
    pub t_a: Vec<f64>,
    pub action: Vec<f64>,
}

impl ObservedSeries {
    pub fn len(&self) -> usize {
        self.t_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_i.is_empty()
    }

    pub fn check_aligned(&self) -> Result<(), ThermalError> {
        if self.t_a.len() != self.t_i.len() || self.action.len() != self.t_i.len() {
            return Err(ThermalError::Misaligned(format!(
                "T_i {}, T_a {}, a {}",
                self.t_i.len(),
                self.t_a.len(),
                self.action.len()
            )));
        }
        Ok(())
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        ObservedSeries {
            t_i: self.t_i[range.clone()].to_vec(),
            t_a: self.t_a[range.clone()].to_vec(),
            action: self.action[range].to_vec(),
        }
    }

    pub fn from_states(states: &[ThermalState], inputs: &[ExogenousInput]) -> Self {
        ObservedSeries {
            t_i: states.iter().map(|s| s.t_i).collect(),
            t_a: inputs.iter().map(|u| u.t_a).collect(),
            action: inputs.iter().map(|u| u.a).collect(),
        }
    }
}

/// Runs the one-step-ahead predictor over `obs`: hidden nodes are propagated
/// by the model while T_i is reset to the measurement after every step.
/// Errors are collected for predicted samples with index >= `score_from`.
/// Returns `None` if the hidden states blow up.
fn one_step_errors(
    d: &Discretized,
    obs: &ObservedSeries,
    score_from: usize,
    init: Option<ThermalState>,
    mut sink: impl FnMut(usize, f64),
) -> Option<ThermalState> {
    let n = obs.len();
    let mut x = init.map_or([obs.t_i[0]; 3], |s| s.as_array());
    x[0] = obs.t_i[0];
    for k in 0..n.saturating_sub(1) {
        let next = d.apply(x, obs.t_a[k], obs.action[k]);
        if !(next[1].abs() <= BLOWUP_LIMIT && next[2].abs() <= BLOWUP_LIMIT && next[0].is_finite()) {
            return None;
        }
        if k + 1 >= score_from {
            sink(k + 1, next[0] - obs.t_i[k + 1]);
        }
        x = next;
        x[0] = obs.t_i[k + 1];
    }
    Some(ThermalState::from_array(x))
}

/// Hidden-state estimate after tracking `obs` with the one-step predictor.
pub fn track(
    kind: ModelKind,
    params: &ThermalModelParams,
    obs: &ObservedSeries,
    dt_minutes: f64,
) -> Option<ThermalState> {
    let d = Discretized::new(kind, params, dt_minutes);
    one_step_errors(&d, obs, usize::MAX, None, |_, _| {})
}

/// Mean squared one-step-ahead T_i error on `heldout`, hidden states started
/// at the first measured temperature.
pub fn evaluate_mse(
    kind: ModelKind,
    params: &ThermalModelParams,
    heldout: &ObservedSeries,
    dt_minutes: f64,
) -> f64 {
    evaluate_mse_from(kind, params, heldout, 0, dt_minutes)
}

/// Like [`evaluate_mse`] but the predictor warms up on `series[..score_from]`
/// and only errors on samples `score_from..` are scored.
pub fn evaluate_mse_from(
    kind: ModelKind,
    params: &ThermalModelParams,
    series: &ObservedSeries,
    score_from: usize,
    dt_minutes: f64,
) -> f64 {
    if series.len() < 2 {
        return 0.0;
    }
    let d = Discretized::new(kind, params, dt_minutes);
    let (mut sum, mut n) = (0.0, 0usize);
    let ok = one_step_errors(&d, series, score_from.max(1), None, |_, e| {
        sum += e * e;
        n += 1;
    });
    match (ok, n) {
        (None, _) => f64::INFINITY,
        (_, 0) => 0.0,
        _ => sum / n as f64,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FitOptions {
    pub starts: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            starts: 16,
            seed: 0,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FitResult {
    pub kind: ModelKind,
    pub params: ThermalModelParams,
    pub train_mse: f64,
    /// Training MSE of every multi-start candidate before local search.
    pub start_mses: Vec<f64>,
}

/// Maps between physical parameters and the unconstrained search vector.
struct Coords {
    kind: ModelKind,
}

impl Coords {
    fn encode(&self, p: &ThermalModelParams) -> Vec<f64> {
        self.kind
            .free_params()
            .iter()
            .map(|q| if q.is_log() { p.get(*q).ln() } else { p.get(*q) })
            .collect()
    }

    fn decode(&self, theta: &[f64]) -> ThermalModelParams {
        let mut p = ThermalModelParams {
            c_i: 1.0,
            ..Default::default()
        };
        for (q, v) in self.kind.free_params().iter().zip(theta) {
            p.set(*q, if q.is_log() { v.exp() } else { *v });
        }
        p
    }

    fn clamp(&self, theta: &mut [f64]) {
        for (q, v) in self.kind.free_params().iter().zip(theta.iter_mut()) {
            let (lo, hi) = q.bounds();
            *v = if q.is_log() {
                v.clamp(lo.ln(), hi.ln())
            } else {
                v.clamp(lo, hi)
            };
        }
    }
}

struct Objective<'a> {
    kind: ModelKind,
    obs: &'a ObservedSeries,
    dt: f64,
}

impl Objective<'_> {
    fn residuals(&self, p: &ThermalModelParams, out: &mut [f64]) -> bool {
        let d = Discretized::new(self.kind, p, self.dt);
        one_step_errors(&d, self.obs, 1, None, |k, e| out[k - 1] = e).is_some()
    }

    fn mse(&self, p: &ThermalModelParams) -> f64 {
        evaluate_mse(self.kind, p, self.obs, self.dt)
    }
}

/// Bounded Levenberg-Marquardt on the search coordinates. Only steps that
/// lower the cost are accepted, so the result is never worse than the start.
fn local_search(obj: &Objective, coords: &Coords, start: Vec<f64>, max_iters: usize) -> (Vec<f64>, f64) {
    let m = obj.obs.len() - 1;
    let n = start.len();
    let mut theta = start;
    let mut r = vec![0.0; m];
    if !obj.residuals(&coords.decode(&theta), &mut r) {
        return (theta, f64::INFINITY);
    }
    let mut cost: f64 = r.iter().map(|e| e * e).sum();
    let mut lambda = 1e-3;
    let mut jac = DMatrix::<f64>::zeros(m, n);
    let mut rp = vec![0.0; m];
    for _ in 0..max_iters {
        // forward-difference Jacobian
        for j in 0..n {
            let step = 1e-7 * theta[j].abs().max(1.0);
            let mut tp = theta.clone();
            tp[j] += step;
            if !obj.residuals(&coords.decode(&tp), &mut rp) {
                tp[j] = theta[j] - step;
                obj.residuals(&coords.decode(&tp), &mut rp);
                for i in 0..m {
                    jac[(i, j)] = (r[i] - rp[i]) / step;
                }
            } else {
                for i in 0..m {
                    jac[(i, j)] = (rp[i] - r[i]) / step;
                }
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * DVector::from_column_slice(&r);
        let mut improved = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for j in 0..n {
                a[(j, j)] += lambda * (jtj[(j, j)] + 1e-12);
            }
            let Some(delta) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let mut cand: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, d)| t + d).collect();
            coords.clamp(&mut cand);
            if obj.residuals(&coords.decode(&cand), &mut rp) {
                let c: f64 = rp.iter().map(|e| e * e).sum();
                if c < cost {
                    let rel = (cost - c) / cost.max(1e-300);
                    theta = cand;
                    std::mem::swap(&mut r, &mut rp);
                    cost = c;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = rel > 1e-14;
                    break;
                }
            }
            lambda *= 4.0;
        }
        if !improved || cost < 1e-28 {
            break;
        }
    }
    (theta, cost / m as f64)
}

fn draw_start(kind: ModelKind, rng: &mut ChaCha8Rng, obj: &Objective) -> ThermalModelParams {
    let mut last = ThermalModelParams::default();
    for _ in 0..200 {
        let mut p = ThermalModelParams {
            c_i: 1.0,
            ..Default::default()
        };
        for q in kind.free_params() {
            let (lo, hi) = q.bounds();
            let v = if q.is_log() {
                (rng.random_range(lo.ln()..hi.ln())).exp()
            } else {
                rng.random_range(lo..hi)
            };
            p.set(*q, v);
        }
        last = p;
        if obj.mse(&p).is_finite() {
            return p;
        }
    }
    last
}

/// Fits `kind` to `observed` by minimizing the one-step-ahead T_i error from
/// several random starts followed by local search. Deterministic in
/// `opts.seed`; starts run in parallel and the winner is the lowest training
/// MSE with ties broken by start index.
pub fn fit(
    kind: ModelKind,
    observed: &ObservedSeries,
    dt_minutes: f64,
    opts: &FitOptions,
) -> Result<FitResult, ThermalError> {
    observed.check_aligned()?;
    if observed.len() < MIN_FIT_SAMPLES {
        return Err(ThermalError::InsufficientData {
            needed: MIN_FIT_SAMPLES,
            got: observed.len(),
        });
    }
    let first = observed.t_i[0];
    if observed.t_i.iter().all(|v| (v - first).abs() < 1e-12) {
        return Err(ThermalError::DegenerateSeries);
    }
    let obj = Objective {
        kind,
        obs: observed,
        dt: dt_minutes,
    };
    let coords = Coords { kind };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (kind as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let starts: Vec<ThermalModelParams> = (0..opts.starts.max(1))
        .map(|_| draw_start(kind, &mut rng, &obj))
        .collect();
    let start_mses: Vec<f64> = starts.iter().map(|p| obj.mse(p)).collect();
    let results: Vec<(Vec<f64>, f64)> = starts
        .par_iter()
        .map(|p| local_search(&obj, &coords, coords.encode(p), opts.max_iters))
        .collect();
    let (best_idx, _) = results
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.1.total_cmp(&b.1).then(i.cmp(j)))
        .expect("at least one start");
    let mut params = coords.decode(&results[best_idx].0);
    let train_mse = obj.mse(&params);
    // residual scale, used when the twin drives a stochastic simulation
    params.sigma = train_mse.sqrt();
    Ok(FitResult {
        kind,
        params,
        train_mse,
        start_mses,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SelectionRow {
    pub kind: ModelKind,
    pub params: ThermalModelParams,
    pub train_mse: f64,
    pub heldout_mse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Selection {
    pub best_kind: ModelKind,
    pub table: Vec<SelectionRow>,
}

impl Selection {
    pub fn best(&self) -> &SelectionRow {
        self.table.iter().find(|r| r.kind == self.best_kind).unwrap()
    }

    pub fn row(&self, kind: ModelKind) -> Option<&SelectionRow> {
        self.table.iter().find(|r| r.kind == kind)
    }
}

pub const TIE_TOLERANCE: f64 = 1e-9;

/// Fits every kind on the first `split` samples and scores each on the rest
/// (predictor warmed up over the training part). The best kind has the lowest
/// held-out MSE; near-ties go to the simpler structure.
pub fn select_model(
    observed: &ObservedSeries,
    dt_minutes: f64,
    split: usize,
    opts: &FitOptions,
) -> Result<Selection, ThermalError> {
    observed.check_aligned()?;
    if split >= observed.len() {
        return Err(ThermalError::InsufficientData {
            needed: split + 2,
            got: observed.len(),
        });
    }
    let train = observed.slice(0..split);
    let mut table = Vec::with_capacity(ModelKind::ALL.len());
    for kind in ModelKind::ALL {
        let fit = fit(kind, &train, dt_minutes, opts)?;
        let heldout_mse = evaluate_mse_from(kind, &fit.params, observed, split, dt_minutes);
        table.push(SelectionRow {
            kind,
            params: fit.params,
            train_mse: fit.train_mse,
            heldout_mse,
        });
    }
    let min = table
        .iter()
        .map(|r| r.heldout_mse)
        .fold(f64::INFINITY, f64::min);
    let best_kind = table
        .iter()
        .filter(|r| r.heldout_mse <= min + TIE_TOLERANCE)
        .min_by_key(|r| r.kind.complexity())
        .map(|r| r.kind)
        .expect("non-empty table");
    Ok(Selection { best_kind, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ti_params() -> ThermalModelParams {
        ThermalModelParams {
            c_i: 1.0,
            r_ia: 1.0,
            phi_h: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let s = step(
            ModelKind::Ti,
            &ti_params(),
            ThermalState::at(12.0),
            ExogenousInput { t_a: 12.0, a: 0.0 },
            15.0,
            None,
        )
        .unwrap();
        assert_eq!(s.t_i, 12.0);
    }

    #[test]
    fn one_euler_step_by_hand() {
        // dt / (C_i R_ia) = 0.1 with time in hours -> 6 minutes
        let s0 = ThermalState::at(18.0);
        let off = step(ModelKind::Ti, &ti_params(), s0, ExogenousInput { t_a: 8.0, a: 0.0 }, 6.0, None).unwrap();
        assert!((off.t_i - 17.0).abs() < 1e-12);
        let on = step(ModelKind::Ti, &ti_params(), s0, ExogenousInput { t_a: 8.0, a: 1.0 }, 6.0, None).unwrap();
        assert!((on.t_i - 17.1).abs() < 1e-12);
    }

    #[test]
    fn blowup_detected() {
        let p = ThermalModelParams {
            r_ia: 0.05,
            c_i: 0.1,
            ..ti_params()
        };
        let inputs = vec![ExogenousInput { t_a: 0.0, a: 0.0 }; 50];
        assert_eq!(
            simulate(ModelKind::Ti, &p, ThermalState::at(20.0), &inputs, 15.0),
            Err(ThermalError::NumericalBlowup)
        );
    }

    #[test]
    fn simulate_shapes() {
        let p = ThermalModelParams::default();
        for kind in ModelKind::ALL {
            assert!(simulate(kind, &p, ThermalState::at(15.0), &[], 15.0).unwrap().is_empty());
            let eq = vec![ExogenousInput { t_a: 15.0, a: 0.0 }; 20];
            let traj = simulate(kind, &p, ThermalState::at(15.0), &eq, 15.0).unwrap();
            assert!(traj.iter().all(|s| (s.t_i - 15.0).abs() < 1e-12));
        }
        let cold = vec![ExogenousInput { t_a: 5.0, a: 0.0 }; 96];
        let traj = simulate(ModelKind::Ti, &p, ThermalState::at(20.0), &cold, 15.0).unwrap();
        let mut prev = 20.0;
        for s in traj {
            assert!(s.t_i < prev);
            prev = s.t_i;
        }
    }

    #[test]
    fn perfect_model_scores_zero() {
        let p = ThermalModelParams::default();
        let inputs: Vec<_> = (0..200)
            .map(|k| ExogenousInput { t_a: 8.0 + (k as f64 / 10.0).sin(), a: ((k / 7) % 2) as f64 })
            .collect();
        for kind in ModelKind::ALL {
            let init = ThermalState::at(17.0);
            let mut states = vec![init];
            states.extend(simulate(kind, &p, init, &inputs[..199], 15.0).unwrap());
            let obs = ObservedSeries::from_states(&states, &inputs);
            assert!(evaluate_mse(kind, &p, &obs, 15.0) < 1e-24, "{kind}");
        }
    }

    #[test]
    fn constant_predictor_mse() {
        // Phi_h = 0 and R_ia at the largest representable value approximate a
        // predictor that repeats the last sample: error = first difference.
        let p = ThermalModelParams {
            r_ia: 1e12,
            phi_h: 0.0,
            ..ti_params()
        };
        let obs = ObservedSeries {
            t_i: vec![18.0, 19.0, 17.0],
            t_a: vec![5.0; 3],
            action: vec![0.0; 3],
        };
        let expected = (1.0f64.powi(2) + 2.0f64.powi(2)) / 2.0;
        assert!((evaluate_mse(ModelKind::Ti, &p, &obs, 15.0) - expected).abs() < 1e-9);
    }

    #[test]
    fn fit_input_errors() {
        let short = ObservedSeries {
            t_i: vec![18.0; 10],
            t_a: vec![5.0; 10],
            action: vec![0.0; 10],
        };
        assert!(matches!(
            fit(ModelKind::Ti, &short, 15.0, &FitOptions::default()),
            Err(ThermalError::InsufficientData { .. })
        ));
        let flat = ObservedSeries {
            t_i: vec![18.0; 200],
            t_a: vec![5.0; 200],
            action: vec![0.0; 200],
        };
        assert_eq!(
            fit(ModelKind::Ti, &flat, 15.0, &FitOptions::default()).unwrap_err(),
            ThermalError::DegenerateSeries
        );
        let bad = ObservedSeries {
            t_i: vec![18.0; 200],
            t_a: vec![5.0; 199],
            action: vec![0.0; 200],
        };
        assert!(matches!(
            fit(ModelKind::Ti, &bad, 15.0, &FitOptions::default()),
            Err(ThermalError::Misaligned(_))
        ));
    }

    #[test]
    fn normalization_preserves_dynamics() {
        let p = ThermalModelParams {
            c_i: 2.5,
            ..Default::default()
        };
        let inputs: Vec<_> = (0..100)
            .map(|k| ExogenousInput { t_a: 6.0, a: (k % 3) as f64 / 2.0 })
            .collect();
        for kind in ModelKind::ALL {
            let a = simulate(kind, &p, ThermalState::at(16.0), &inputs, 15.0).unwrap();
            let b = simulate(kind, &p.normalized(), ThermalState::at(16.0), &inputs, 15.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x.t_i - y.t_i).abs() < 1e-9);
            }
        }
    }

    fn arb_kind() -> impl Strategy<Value = ModelKind> {
        prop::sample::select(ModelKind::ALL.to_vec())
    }

    fn arb_params() -> impl Strategy<Value = ThermalModelParams> {
        (0.5f64..5.0, 1.0f64..30.0, 0.2f64..3.0, 0.5f64..20.0, 0.5f64..10.0, 1.0f64..20.0, 0.2f64..5.0, 0.0f64..8.0)
            .prop_map(|(c_i, c_e, c_h, r_ia, r_ie, r_ea, r_ih, phi_h)| ThermalModelParams {
                c_i, c_e, c_h, r_ia, r_ie, r_ea, r_ih, phi_h, sigma: 0.0,
            })
    }

    fn arb_state() -> impl Strategy<Value = ThermalState> {
        (-10.0f64..30.0, -10.0f64..30.0, -10.0f64..60.0).prop_map(|(t_i, t_e, t_h)| ThermalState { t_i, t_e, t_h })
    }

    proptest! {
        #[test]
        fn step_is_affine_in_state(
            kind in arb_kind(), p in arb_params(), s1 in arb_state(), s2 in arb_state(),
            alpha in 0.0f64..1.0, t_a in -5.0f64..15.0, a in 0.0f64..1.0,
        ) {
            let u = ExogenousInput { t_a, a };
            let mix = |x: f64, y: f64| alpha * x + (1.0 - alpha) * y;
            let sm = ThermalState { t_i: mix(s1.t_i, s2.t_i), t_e: mix(s1.t_e, s2.t_e), t_h: mix(s1.t_h, s2.t_h) };
            let lhs = step(kind, &p, sm, u, 15.0, None).unwrap();
            let r1 = step(kind, &p, s1, u, 15.0, None).unwrap();
            let r2 = step(kind, &p, s2, u, 15.0, None).unwrap();
            prop_assert!((lhs.t_i - mix(r1.t_i, r2.t_i)).abs() < 1e-9);
            prop_assert!((lhs.t_e - mix(r1.t_e, r2.t_e)).abs() < 1e-9);
            prop_assert!((lhs.t_h - mix(r1.t_h, r2.t_h)).abs() < 1e-9);
        }

        #[test]
        fn more_heat_never_cools(kind in arb_kind(), p in arb_params(), s in arb_state(), t_a in -5.0f64..15.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = (a.min(b), a.max(b));
            let x = step(kind, &p, s, ExogenousInput { t_a, a: lo }, 15.0, None).unwrap();
            let y = step(kind, &p, s, ExogenousInput { t_a, a: hi }, 15.0, None).unwrap();
            prop_assert!(y.t_i >= x.t_i);
        }

        #[test]
        fn mse_is_nonnegative(kind in arb_kind(), p in arb_params(), temps in prop::collection::vec(10.0f64..25.0, 2..40)) {
            let n = temps.len();
            let obs = ObservedSeries { t_i: temps, t_a: vec![5.0; n], action: vec![0.5; n] };
            prop_assert!(evaluate_mse(kind, &p, &obs, 15.0) >= 0.0);
        }
    }
}
