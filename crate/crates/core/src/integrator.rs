//! Explicit one-step integrators for autonomous systems `y′ = F(y)` on flat
//! real vectors.
//!
//! Three steppers share one driver:
//!
//! * Dormand–Prince 5(4) with PI step control,
//! * classic fourth-order Runge–Kutta at a fixed step (reference mode),
//! * an adaptive exponential Runge–Kutta method (Hochbruck–Ostermann) for
//!   systems that expose a constant diagonal linear part `Λ`, with the error
//!   estimated by step doubling. With `Λ = 0` it is a fourth-order RK method.
//!
//! The exponential stepper treats the linear part exactly, so stiff
//! relaxation along the diagonal does not limit the step size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, y: &[f64], dy: &mut [f64]);
    /// Constant diagonal linear part used by [`Method::ExponentialRk4`].
    fn linear_diagonal(&self, lam: &mut [f64]) {
        lam.fill(0.0);
    }
    /// Applied to every accepted state (for example to enforce constraints).
    fn project(&self, _y: &mut [f64]) {}
}

/// Wraps a closure as an [`OdeSystem`].
pub struct FnSystem<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64])> FnSystem<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64])> OdeSystem for FnSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        (self.f)(y, dy)
    }
}

/// Reparametrization `dx/dτ = g(y)`: integrates `dy/dτ = g(y) F(y)` with the
/// original independent variable `x` appended as the last component.
pub struct TimeChange<'a, S, G> {
    inner: &'a S,
    speed: G,
}

impl<'a, S: OdeSystem, G: Fn(&[f64]) -> f64> TimeChange<'a, S, G> {
    pub fn new(inner: &'a S, speed: G) -> Self {
        Self { inner, speed }
    }
}

impl<S: OdeSystem, G: Fn(&[f64]) -> f64> OdeSystem for TimeChange<'_, S, G> {
    fn dim(&self) -> usize {
        self.inner.dim() + 1
    }
    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let m = self.inner.dim();
        let g = (self.speed)(&y[..m]);
        self.inner.rhs(&y[..m], &mut dy[..m]);
        for v in &mut dy[..m] {
            *v *= g;
        }
        dy[m] = g;
    }
    fn project(&self, y: &mut [f64]) {
        let m = self.inner.dim();
        self.inner.project(&mut y[..m]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Method {
    DormandPrince54,
    ClassicRk4 { step: f64 },
    ExponentialRk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub min_step: f64,
    pub max_steps: usize,
    pub method: Method,
    pub initial_step: Option<f64>,
    /// Per-component overrides of `abs_tol` as `(index, value)`.
    #[serde(default)]
    pub abs_tol_overrides: Vec<(usize, f64)>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-14,
            max_step: f64::INFINITY,
            min_step: 1e-14,
            max_steps: 2_000_000,
            method: Method::DormandPrince54,
            initial_step: None,
            abs_tol_overrides: Vec::new(),
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let tol_ok = |v: f64| v > 1e-15 && v < 1e-2;
        if !tol_ok(self.rel_tol) {
            return Err(Error::Config(format!(
                "rel_tol = {:e} outside (1e-15, 1e-2)",
                self.rel_tol
            )));
        }
        if !(self.abs_tol > 0.0 && self.abs_tol < 1e-2) {
            return Err(Error::Config(format!(
                "abs_tol = {:e} outside (0, 1e-2)",
                self.abs_tol
            )));
        }
        if !(self.min_step > 0.0 && self.min_step < self.max_step) {
            return Err(Error::Config(format!(
                "need 0 < min_step < max_step, got {:e} and {:e}",
                self.min_step, self.max_step
            )));
        }
        if let Method::ClassicRk4 { step } = self.method {
            if !(step.is_finite() && step > 0.0) {
                return Err(Error::Config(format!("fixed step {step} must be positive")));
            }
        }
        if self.abs_tol_overrides.iter().any(|&(_, v)| !(v > 0.0)) {
            return Err(Error::Config("abs_tol overrides must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    ComponentFloor,
    ComponentNegative,
    SHorizon,
    THorizon,
    Blowup,
    Stall,
    MaxSteps,
    Converged,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::ComponentFloor => "component-floor",
            EventKind::ComponentNegative => "component-negative",
            EventKind::SHorizon => "s-horizon",
            EventKind::THorizon => "t-horizon",
            EventKind::Blowup => "blowup",
            EventKind::Stall => "stall",
            EventKind::MaxSteps => "max-steps",
            EventKind::Converged => "converged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub index: Option<usize>,
    /// Component value (or independent variable for horizons) at the trigger.
    pub value: f64,
    pub x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trigger {
    /// Fires when the component drops below the level, having been above it.
    Below(f64),
    /// Fires when the component becomes negative, having been nonnegative.
    Negative,
    /// Fires when the component rises above the level, having been below it.
    Above(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopCondition {
    pub index: usize,
    pub trigger: Trigger,
    pub kind: EventKind,
}

impl StopCondition {
    pub fn floor(index: usize, level: f64) -> Self {
        Self {
            index,
            trigger: Trigger::Below(level),
            kind: EventKind::ComponentFloor,
        }
    }
    pub fn negative(index: usize) -> Self {
        Self {
            index,
            trigger: Trigger::Negative,
            kind: EventKind::ComponentNegative,
        }
    }
    pub fn ceiling(index: usize, level: f64, kind: EventKind) -> Self {
        Self {
            index,
            trigger: Trigger::Above(level),
            kind,
        }
    }

    fn armed(&self, v: f64) -> bool {
        match self.trigger {
            Trigger::Below(level) => v > level,
            Trigger::Negative => v >= 0.0,
            Trigger::Above(level) => v < level,
        }
    }

    /// Signed distance to the trigger level, positive while armed.
    fn gap(&self, v: f64) -> f64 {
        match self.trigger {
            Trigger::Below(level) => v - level,
            Trigger::Negative => v,
            Trigger::Above(level) => level - v,
        }
    }
}

/// Sampling and termination controls beyond the horizon.
#[derive(Default)]
pub struct Controls<'a> {
    pub stops: Vec<StopCondition>,
    /// Increasing output points; steps are shortened to land on them.
    pub grid: Vec<f64>,
    /// Keep every `stride`-th accepted step (0 keeps only grid points and ends).
    pub stride: usize,
    pub converged: Option<&'a dyn Fn(f64, &[f64]) -> bool>,
}

impl<'a> Controls<'a> {
    pub fn every_step() -> Self {
        Self {
            stride: 1,
            ..Self::default()
        }
    }
    pub fn with_stop(mut self, stop: StopCondition) -> Self {
        self.stops.push(stop);
        self
    }
    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.grid = grid;
        self
    }
    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
    pub fn with_converged(mut self, f: &'a dyn Fn(f64, &[f64]) -> bool) -> Self {
        self.converged = Some(f);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: f64,
    pub y: Vec<f64>,
    pub on_grid: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub samples: Vec<Sample>,
    pub event: Event,
    pub stats: Stats,
}

impl Solution {
    pub fn last(&self) -> &Sample {
        self.samples.last().expect("solution always has the initial sample")
    }
}

// Dormand–Prince 5(4) tableau.
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// Fifth-order weights minus fourth-order weights.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

struct Workspace {
    k: Vec<Vec<f64>>,
    tmp: Vec<f64>,
    lam: Vec<f64>,
    half: Vec<f64>,
    big: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            k: vec![vec![0.0; n]; 7],
            tmp: vec![0.0; n],
            lam: vec![0.0; n],
            half: vec![0.0; n],
            big: vec![0.0; n],
        }
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One Dormand–Prince step. `k[0]` must hold `F(y)`; on return `k[6]` holds
/// `F(y_new)` (first-same-as-last). Writes the error vector into `err`.
fn dp_step<S: OdeSystem>(sys: &S, y: &[f64], h: f64, ws: &mut Workspace, out: &mut [f64], err: &mut [f64]) {
    let n = y.len();
    for s in 1..7 {
        for j in 0..n {
            let mut acc = 0.0;
            for (m, a) in DP_A[s][..s].iter().enumerate() {
                acc += a * ws.k[m][j];
            }
            ws.tmp[j] = y[j] + h * acc;
        }
        sys.rhs(&ws.tmp, &mut ws.k[s]);
    }
    // Stage 7 evaluates at the fifth-order solution.
    out.copy_from_slice(&ws.tmp);
    for j in 0..n {
        let mut e = 0.0;
        for (m, w) in DP_E.iter().enumerate() {
            e += w * ws.k[m][j];
        }
        err[j] = h * e;
    }
}

fn rk4_step<S: OdeSystem>(sys: &S, y: &[f64], f0: &[f64], h: f64, ws: &mut Workspace, out: &mut [f64]) {
    let n = y.len();
    let (k, tmp) = (&mut ws.k, &mut ws.tmp);
    for j in 0..n {
        tmp[j] = y[j] + 0.5 * h * f0[j];
    }
    sys.rhs(tmp, &mut k[1]);
    for j in 0..n {
        tmp[j] = y[j] + 0.5 * h * k[1][j];
    }
    sys.rhs(tmp, &mut k[2]);
    for j in 0..n {
        tmp[j] = y[j] + h * k[2][j];
    }
    sys.rhs(tmp, &mut k[3]);
    for j in 0..n {
        out[j] = y[j] + h / 6.0 * (f0[j] + 2.0 * k[1][j] + 2.0 * k[2][j] + k[3][j]);
    }
}

/// `φ₁, φ₂, φ₃` at `z`.
pub fn phi123(z: f64) -> (f64, f64, f64) {
    if z.abs() < 0.5 {
        // φₖ(z) = Σ zʲ/(j+k)!
        let mut p = [0.0; 3];
        for (k, pk) in p.iter_mut().enumerate() {
            let mut term = 1.0;
            for m in 1..=(k + 1) {
                term /= m as f64;
            }
            let mut sum = 0.0;
            for j in 0..20 {
                sum += term;
                term *= z / (j + k + 2) as f64;
            }
            *pk = sum;
        }
        (p[0], p[1], p[2])
    } else {
        let ez = z.exp();
        let p1 = (ez - 1.0) / z;
        let p2 = (p1 - 1.0) / z;
        let p3 = (p2 - 0.5) / z;
        (p1, p2, p3)
    }
}

/// Hochbruck–Ostermann exponential RK4 step for `y′ = Λy + N(y)` with
/// `N = F − Λy`; five stages, fourth order also in the stiff limit.
/// `f0` must hold `F(y)`. Uses `k[1..=4]` for stage derivatives.
fn etd_step<S: OdeSystem>(sys: &S, y: &[f64], f0: &[f64], h: f64, lam: &[f64], k: &mut [Vec<f64>], tmp: &mut [f64], out: &mut [f64]) -> usize {
    let n = y.len();
    // Coefficients depend only on hλ; Λ usually has few distinct entries.
    let mut distinct: Vec<(f64, EtdCoef)> = Vec::new();
    let mut coef = Vec::with_capacity(n);
    for &l in lam {
        match distinct.iter().find(|(v, _)| *v == l) {
            Some((_, c)) => coef.push(c.clone()),
            None => {
                let c = EtdCoef::new(h * l);
                distinct.push((l, c.clone()));
                coef.push(c);
            }
        }
    }
    let mut nl = vec![vec![0.0; n]; 5];
    for j in 0..n {
        nl[0][j] = f0[j] - lam[j] * y[j];
    }
    for stage in 1..5 {
        for j in 0..n {
            let c = &coef[j];
            let v = match stage {
                1 => c.eh * y[j] + h * c.a21 * nl[0][j],
                2 => c.eh * y[j] + h * (c.a31 * nl[0][j] + c.a32 * nl[1][j]),
                3 => c.e * y[j] + h * (c.a41 * nl[0][j] + c.a42 * (nl[1][j] + nl[2][j])),
                _ => c.eh * y[j] + h * (c.a51 * nl[0][j] + c.a52 * (nl[1][j] + nl[2][j]) + c.a54 * nl[3][j]),
            };
            tmp[j] = v;
        }
        sys.rhs(tmp, &mut k[stage]);
        for j in 0..n {
            nl[stage][j] = k[stage][j] - lam[j] * tmp[j];
        }
    }
    for j in 0..n {
        let c = &coef[j];
        out[j] = c.e * y[j] + h * (c.b1 * nl[0][j] + c.b4 * nl[3][j] + c.b5 * nl[4][j]);
    }
    4
}

#[derive(Clone)]
struct EtdCoef {
    eh: f64,
    e: f64,
    a21: f64,
    a31: f64,
    a32: f64,
    a41: f64,
    a42: f64,
    a51: f64,
    a52: f64,
    a54: f64,
    b1: f64,
    b4: f64,
    b5: f64,
}

impl EtdCoef {
    fn new(z: f64) -> Self {
        let (p1h, p2h, p3h) = phi123(0.5 * z);
        let (p1, p2, p3) = phi123(z);
        let a52 = 0.5 * p2h - p3 + 0.25 * p2 - 0.5 * p3h;
        let a54 = 0.25 * p2h - a52;
        Self {
            eh: (0.5 * z).exp(),
            e: z.exp(),
            a21: 0.5 * p1h,
            a31: 0.5 * p1h - p2h,
            a32: p2h,
            a41: p1 - 2.0 * p2,
            a42: p2,
            a51: 0.5 * p1h - 2.0 * a52 - a54,
            a52,
            a54,
            b1: p1 - 3.0 * p2 + 4.0 * p3,
            b4: -p2 + 4.0 * p3,
            b5: 4.0 * p2 - 8.0 * p3,
        }
    }
}

fn error_norm(err: &[f64], y: &[f64], y_new: &[f64], abs_tol: &[f64], cfg: &IntegratorConfig) -> f64 {
    let mut m: f64 = 0.0;
    for j in 0..err.len() {
        let sc = abs_tol[j] + cfg.rel_tol * y[j].abs().max(y_new[j].abs());
        m = m.max((err[j] / sc).abs());
    }
    m
}

struct Pi {
    order: f64,
    alpha: f64,
    beta: f64,
    prev_err: f64,
}

impl Pi {
    fn new(order: f64) -> Self {
        Self {
            order,
            alpha: 0.7 / (order + 1.0),
            beta: 0.4 / (order + 1.0),
            prev_err: 1e-4,
        }
    }

    fn accept(&mut self, err: f64, after_reject: bool) -> f64 {
        let e = err.max(1e-10);
        let mut fac = SAFETY * e.powf(-self.alpha) * self.prev_err.powf(self.beta);
        fac = fac.clamp(MIN_FACTOR, MAX_FACTOR);
        if after_reject {
            fac = fac.min(1.0);
        }
        self.prev_err = e;
        fac
    }

    fn reject(&self, err: f64) -> f64 {
        if err.is_finite() {
            (SAFETY * err.powf(-1.0 / (self.order + 1.0))).clamp(MIN_FACTOR, 1.0)
        } else {
            MIN_FACTOR
        }
    }
}

struct Stepper<'s, S> {
    sys: &'s S,
    cfg: IntegratorConfig,
    abs_tol: Vec<f64>,
    ws: Workspace,
    stats: Stats,
}

impl<S: OdeSystem> Stepper<'_, S> {
    /// Advance exactly by `h` without error control (used for fixed steps and
    /// for event localization). `f0 = F(y)`.
    fn plain_step(&mut self, y: &[f64], f0: &[f64], h: f64, out: &mut [f64]) {
        match self.cfg.method {
            Method::DormandPrince54 => {
                let n = y.len();
                self.ws.k[0].copy_from_slice(f0);
                let mut err = vec![0.0; n];
                dp_step(self.sys, y, h, &mut self.ws, out, &mut err);
                self.stats.rhs_evals += 6;
            }
            Method::ClassicRk4 { .. } => {
                rk4_step(self.sys, y, f0, h, &mut self.ws, out);
                self.stats.rhs_evals += 3;
            }
            Method::ExponentialRk4 => {
                let lam = self.ws.lam.clone();
                let Workspace { k, tmp, .. } = &mut self.ws;
                self.stats.rhs_evals += etd_step(self.sys, y, f0, h, &lam, k, tmp, out);
            }
        }
    }

    /// Attempt one controlled step; returns the error norm (0 for fixed-step).
    fn trial(&mut self, y: &[f64], f0: &[f64], h: f64, out: &mut [f64]) -> f64 {
        let n = y.len();
        match self.cfg.method {
            Method::ClassicRk4 { .. } => {
                self.plain_step(y, f0, h, out);
                if all_finite(out) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Method::DormandPrince54 => {
                self.ws.k[0].copy_from_slice(f0);
                let mut err = vec![0.0; n];
                dp_step(self.sys, y, h, &mut self.ws, out, &mut err);
                self.stats.rhs_evals += 6;
                if !all_finite(out) || !all_finite(&err) {
                    return f64::INFINITY;
                }
                error_norm(&err, y, out, &self.abs_tol, &self.cfg)
            }
            Method::ExponentialRk4 => {
                let lam = self.ws.lam.clone();
                let mut big = std::mem::take(&mut self.ws.big);
                let mut half = std::mem::take(&mut self.ws.half);
                let mut fh = vec![0.0; n];
                {
                    let Workspace { k, tmp, .. } = &mut self.ws;
                    self.stats.rhs_evals += etd_step(self.sys, y, f0, h, &lam, k, tmp, &mut big);
                    self.stats.rhs_evals += etd_step(self.sys, y, f0, 0.5 * h, &lam, k, tmp, &mut half);
                }
                let ok = all_finite(&half);
                if ok {
                    self.sys.rhs(&half, &mut fh);
                    self.stats.rhs_evals += 1;
                }
                let ok = ok && all_finite(&fh);
                if ok {
                    let Workspace { k, tmp, .. } = &mut self.ws;
                    self.stats.rhs_evals += etd_step(self.sys, &half, &fh, 0.5 * h, &lam, k, tmp, out);
                }
                let result = if ok && all_finite(out) && all_finite(&big) {
                    let err: Vec<f64> = out.iter().zip(&big).map(|(a, b)| (a - b) / 15.0).collect();
                    error_norm(&err, y, out, &self.abs_tol, &self.cfg)
                } else {
                    f64::INFINITY
                };
                self.ws.big = big;
                self.ws.half = half;
                result
            }
        }
    }
}

/// Integrate from `(x0, y0)` towards `x_end` (which may be infinite when
/// another stop condition terminates the run).
pub fn integrate<S: OdeSystem>(
    sys: &S,
    x0: f64,
    y0: &[f64],
    x_end: f64,
    cfg: &IntegratorConfig,
    controls: &Controls<'_>,
) -> Result<Solution> {
    cfg.validate()?;
    let n = sys.dim();
    if y0.len() != n {
        return Err(Error::Config(format!(
            "initial state has {} components, system has {n}",
            y0.len()
        )));
    }
    if !all_finite(y0) {
        return Err(Error::NonFiniteState { component: "y0" });
    }
    if !(x_end > x0) {
        return Err(Error::Config(format!("horizon {x_end} must exceed start {x0}")));
    }
    if controls.grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("output grid must be strictly increasing".into()));
    }
    for st in &controls.stops {
        if st.index >= n {
            return Err(Error::Config(format!("stop index {} out of range", st.index)));
        }
    }

    let mut abs_tol = vec![cfg.abs_tol; n];
    for &(i, v) in &cfg.abs_tol_overrides {
        if i >= n {
            return Err(Error::Config(format!("abs_tol override index {i} out of range")));
        }
        abs_tol[i] = v;
    }
    let mut stepper = Stepper {
        sys,
        cfg: cfg.clone(),
        abs_tol,
        ws: Workspace::new(n),
        stats: Stats::default(),
    };
    sys.linear_diagonal(&mut stepper.ws.lam);
    // Both controlled methods advance with a fourth-order error estimate.
    let mut pi = Pi::new(4.0);

    let mut x = x0;
    let mut y = y0.to_vec();
    sys.project(&mut y);
    let mut f0 = vec![0.0; n];
    sys.rhs(&y, &mut f0);
    stepper.stats.rhs_evals += 1;

    let mut grid_pos = controls.grid.partition_point(|&g| g < x0);
    let mut samples = vec![Sample {
        x,
        y: y.clone(),
        on_grid: grid_pos < controls.grid.len() && controls.grid[grid_pos] == x0,
    }];
    if samples[0].on_grid {
        grid_pos += 1;
    }
    if !all_finite(&f0) {
        return Ok(Solution {
            samples,
            event: Event {
                kind: EventKind::Blowup,
                index: None,
                value: f64::NAN,
                x,
            },
            stats: stepper.stats,
        });
    }

    let mut armed: Vec<bool> = controls.stops.iter().map(|s| s.armed(y[s.index])).collect();
    let fixed = matches!(cfg.method, Method::ClassicRk4 { .. });
    let mut h = match cfg.method {
        Method::ClassicRk4 { step } => step,
        _ => cfg
            .initial_step
            .unwrap_or_else(|| initial_step(sys, &y, &f0, cfg, &mut stepper.stats)),
    }
    .min(cfg.max_step);
    let mut y_new = vec![0.0; n];
    let mut f_new = vec![0.0; n];
    let mut after_reject = false;

    let finish = |samples: Vec<Sample>, kind, index, value, x, stats| -> Result<Solution> {
        Ok(Solution {
            samples,
            event: Event { kind, index, value, x },
            stats,
        })
    };

    loop {
        if stepper.stats.accepted >= cfg.max_steps {
            let last = samples.last().unwrap();
            if last.x != x {
                samples.push(Sample { x, y: y.clone(), on_grid: false });
            }
            return finish(samples, EventKind::MaxSteps, None, x, x, stepper.stats);
        }
        // Clamp the step to the next grid point or the horizon.
        let mut target_grid = false;
        let mut h_try = h;
        let mut at_end = false;
        if grid_pos < controls.grid.len() && x + h_try >= controls.grid[grid_pos] {
            h_try = controls.grid[grid_pos] - x;
            target_grid = true;
        }
        if x + h_try >= x_end {
            h_try = x_end - x;
            at_end = true;
            target_grid = grid_pos < controls.grid.len() && controls.grid[grid_pos] == x_end;
        }

        let err = stepper.trial(&y, &f0, h_try, &mut y_new);
        if !(err <= 1.0) {
            stepper.stats.rejected += 1;
            if fixed {
                let last = samples.last().unwrap();
                if last.x != x {
                    samples.push(Sample { x, y: y.clone(), on_grid: false });
                }
                return finish(samples, EventKind::Blowup, None, f64::NAN, x, stepper.stats);
            }
            h = h_try * pi.reject(err);
            after_reject = true;
            if h < cfg.min_step {
                let kind = if err.is_finite() { EventKind::Stall } else { EventKind::Blowup };
                let last = samples.last().unwrap();
                if last.x != x {
                    samples.push(Sample { x, y: y.clone(), on_grid: false });
                }
                return finish(samples, kind, None, h, x, stepper.stats);
            }
            continue;
        }

        sys.project(&mut y_new);
        sys.rhs(&y_new, &mut f_new);
        stepper.stats.rhs_evals += 1;
        let x_new = if at_end {
            x_end
        } else if target_grid {
            controls.grid[grid_pos]
        } else {
            x + h_try
        };
        if !all_finite(&f_new) {
            if fixed || h_try * MIN_FACTOR < cfg.min_step {
                samples.push(Sample { x: x_new, y: y_new.clone(), on_grid: false });
                return finish(samples, EventKind::Blowup, None, f64::NAN, x_new, stepper.stats);
            }
            stepper.stats.rejected += 1;
            h = h_try * MIN_FACTOR;
            after_reject = true;
            continue;
        }

        // Stop conditions crossed during this step.
        let mut fired: Option<usize> = None;
        for (m, st) in controls.stops.iter().enumerate() {
            if armed[m] && !st.armed(y_new[st.index]) {
                fired = match fired {
                    Some(prev) if first_crossing(&controls.stops, &y, &y_new, prev, m) => Some(prev),
                    _ => Some(m),
                };
            }
        }
        if let Some(m) = fired {
            let st = controls.stops[m];
            let (xe, ye) = localize(&mut stepper, &y, &f0, x, h_try, &st);
            samples.push(Sample { x: xe, y: ye.clone(), on_grid: false });
            stepper.stats.accepted += 1;
            return finish(samples, st.kind, Some(st.index), ye[st.index], xe, stepper.stats);
        }
        for (m, st) in controls.stops.iter().enumerate() {
            if !armed[m] && st.armed(y_new[st.index]) {
                armed[m] = true;
            }
        }

        stepper.stats.accepted += 1;
        x = x_new;
        std::mem::swap(&mut y, &mut y_new);
        std::mem::swap(&mut f0, &mut f_new);

        let keep = target_grid
            || at_end
            || (controls.stride > 0 && stepper.stats.accepted % controls.stride == 0);
        if keep {
            samples.push(Sample { x, y: y.clone(), on_grid: target_grid });
        }
        if target_grid {
            grid_pos += 1;
        }
        if at_end {
            return finish(samples, EventKind::SHorizon, None, x, x, stepper.stats);
        }
        if let Some(conv) = controls.converged {
            if conv(x, &y) {
                if !keep {
                    samples.push(Sample { x, y: y.clone(), on_grid: false });
                }
                return finish(samples, EventKind::Converged, None, x, x, stepper.stats);
            }
        }

        if !fixed {
            let fac = pi.accept(err, after_reject);
            after_reject = false;
            // A step shortened for the grid does not shrink the next one.
            let base = if target_grid { h.max(h_try) } else { h_try };
            h = (base * fac).min(cfg.max_step);
        }
    }
}

/// Decides which of two stops fired first by their fractional crossing point
/// under linear interpolation. Returns true when `a` precedes `b`.
fn first_crossing(stops: &[StopCondition], y: &[f64], y_new: &[f64], a: usize, b: usize) -> bool {
    let frac = |m: usize| {
        let st = &stops[m];
        let g0 = st.gap(y[st.index]);
        let g1 = st.gap(y_new[st.index]);
        g0 / (g0 - g1)
    };
    frac(a) <= frac(b)
}

/// Bisect the step length on `[0, h]` until the stop is bracketed tightly.
fn localize<S: OdeSystem>(
    stepper: &mut Stepper<'_, S>,
    y: &[f64],
    f0: &[f64],
    x: f64,
    h: f64,
    st: &StopCondition,
) -> (f64, Vec<f64>) {
    let n = y.len();
    let mut lo = 0.0;
    let mut hi = h;
    let mut y_hi = vec![0.0; n];
    stepper.plain_step(y, f0, hi, &mut y_hi);
    stepper.sys.project(&mut y_hi);
    let mut probe = vec![0.0; n];
    for _ in 0..60 {
        if hi - lo <= 1e-13 * (x.abs() + h) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        stepper.plain_step(y, f0, mid, &mut probe);
        stepper.sys.project(&mut probe);
        if st.armed(probe[st.index]) {
            lo = mid;
        } else {
            hi = mid;
            y_hi.copy_from_slice(&probe);
        }
    }
    (x + hi, y_hi)
}

/// Hairer's starting step heuristic.
fn initial_step<S: OdeSystem>(sys: &S, y: &[f64], f0: &[f64], cfg: &IntegratorConfig, stats: &mut Stats) -> f64 {
    let n = y.len();
    let sc: Vec<f64> = y.iter().map(|v| cfg.abs_tol + cfg.rel_tol * v.abs()).collect();
    let norm = |v: &[f64]| {
        (v.iter().zip(&sc).map(|(a, s)| (a / s) * (a / s)).sum::<f64>() / n as f64).sqrt()
    };
    let d0 = norm(y);
    let d1 = norm(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let mut f1 = vec![0.0; n];
    sys.rhs(&y1, &mut f1);
    stats.rhs_evals += 1;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).max(cfg.min_step * 10.0)
}
