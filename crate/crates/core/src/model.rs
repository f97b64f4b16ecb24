//! Multiple warped product soliton equations in arc-length time `t` and in
//! the desingularized variable `s` (with `d/ds = 𝓛 d/dt`).
//!
//! The metric is `dt² + Σ fᵢ(t)² gᵢ` where `g₁` is the unit round sphere
//! `S^{d₁}` and `gᵢ` (i ≥ 2) are Einstein with `Ric = μᵢ gᵢ`. In the
//! s-coordinates
//!
//! ```text
//! 𝓛 = 1 / (−u̇ + tr L),   Xᵢ = 𝓛 ḟᵢ / fᵢ,   Yᵢ = 𝓛 / fᵢ
//! ```
//!
//! the soliton equations become a smooth polynomial flow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Factor dimensions, Einstein constants and the expander constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    d: Vec<u32>,
    mu: Vec<f64>,
    eps: f64,
    n: u32,
}

impl ProblemSpec {
    pub fn new(d: Vec<u32>, mu: Vec<f64>, eps: f64) -> Result<Self> {
        if d.len() < 2 {
            return Err(Error::InvalidProblem(format!(
                "need at least two factors, got {}",
                d.len()
            )));
        }
        if mu.len() != d.len() {
            return Err(Error::InvalidProblem(format!(
                "d has {} entries but mu has {}",
                d.len(),
                mu.len()
            )));
        }
        if let Some(i) = d.iter().position(|&di| di == 0) {
            return Err(Error::InvalidProblem(format!("d{} must be positive", i + 1)));
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::InvalidProblem(format!("eps = {eps} must be positive")));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidProblem("mu must be finite".into()));
        }
        let sphere = f64::from(d[0]) - 1.0;
        if mu[0] != sphere {
            return Err(Error::InvalidProblem(format!(
                "mu1 = {} must equal d1 - 1 = {sphere} (unit round sphere)",
                mu[0]
            )));
        }
        let n = d.iter().sum();
        Ok(Self { d, mu, eps, n })
    }

    /// Round sphere `S^{d₁}` followed by Ricci-flat factors of the given dimensions.
    pub fn sphere_with_flat_factors(d1: u32, flat: &[u32], eps: f64) -> Result<Self> {
        let mut d = vec![d1];
        d.extend_from_slice(flat);
        let mut mu = vec![f64::from(d1) - 1.0];
        mu.extend(std::iter::repeat(0.0).take(flat.len()));
        Self::new(d, mu, eps)
    }

    pub fn r(&self) -> usize {
        self.d.len()
    }

    pub fn d(&self) -> &[u32] {
        &self.d
    }

    pub fn di(&self, i: usize) -> f64 {
        f64::from(self.d[i])
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn half_eps(&self) -> f64 {
        0.5 * self.eps
    }

    /// Hypersurface dimension `n = Σ dᵢ`.
    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn nf(&self) -> f64 {
        f64::from(self.n)
    }

    pub fn layout(&self) -> Layout {
        Layout { r: self.r() }
    }

    /// `d₁ ≥ 2` and `μᵢ ≥ 0`: the setting in which trajectories are asymptotically conical.
    pub fn require_conical(&self) -> Result<()> {
        if self.d[0] < 2 {
            return Err(Error::Precondition(format!(
                "asymptotic analysis needs d1 >= 2, got {}",
                self.d[0]
            )));
        }
        if let Some(i) = self.mu.iter().position(|&m| m < 0.0) {
            return Err(Error::Precondition(format!(
                "asymptotic analysis needs mu{} >= 0, got {}",
                i + 1,
                self.mu[i]
            )));
        }
        Ok(())
    }

    /// All factors after the sphere are Ricci flat.
    pub fn has_flat_links(&self) -> bool {
        self.mu[1..].iter().all(|&m| m == 0.0)
    }

    pub fn require_flat_links(&self) -> Result<()> {
        self.require_conical()?;
        if !self.has_flat_links() {
            return Err(Error::Precondition(
                "cone realization needs mu_i = 0 for i >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Singular-orbit data `(f̄₂, …, f̄ᵣ, C)` parameterizing one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedParams {
    pub fbar: Vec<f64>,
    pub c: f64,
}

impl SeedParams {
    pub fn new(fbar: Vec<f64>, c: f64) -> Self {
        Self { fbar, c }
    }

    /// `F̄ᵢ = μᵢ / f̄ᵢ² + ε/2` for `i = 2..=r` (index 0 of the result is factor 2).
    pub fn fbar_curvatures(&self, spec: &ProblemSpec) -> Vec<f64> {
        self.fbar
            .iter()
            .zip(&spec.mu()[1..])
            .map(|(&f, &m)| m / (f * f) + spec.half_eps())
            .collect()
    }
}

/// Soliton data in arc-length time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TState {
    pub t: f64,
    pub f: Vec<f64>,
    pub fdot: Vec<f64>,
    pub u: f64,
    pub udot: f64,
}

impl TState {
    pub fn mean_curvature(&self, spec: &ProblemSpec) -> f64 {
        (0..spec.r())
            .map(|i| spec.di(i) * self.fdot[i] / self.f[i])
            .sum()
    }

    fn check_domain(&self) -> Result<()> {
        for (i, &fi) in self.f.iter().enumerate() {
            if !(fi > 0.0) {
                return Err(Error::Domain { index: i + 1, value: fi });
            }
        }
        Ok(())
    }
}

/// Desingularized state `(𝓛, X, Y, t, u, w)`.
///
/// `t` and `u` ride along passively (`t′ = 𝓛`, `u′ = S₂`). `w = 1 + εu𝓛²`
/// is a second, well-scaled copy of the potential: `u` grows like `−εt²/4`
/// while `w` stays bounded, so the conservation law can be monitored at
/// relative precision all the way to small `𝓛`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SState {
    pub l: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub t: f64,
    pub u: f64,
    pub w: f64,
}

/// Flat vector layout `(𝓛, X₁..Xᵣ, Y₁..Yᵣ, t, u, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub r: usize,
}

impl Layout {
    pub const L: usize = 0;

    pub fn dim(&self) -> usize {
        2 * self.r + 4
    }
    pub fn x(&self, i: usize) -> usize {
        1 + i
    }
    pub fn y(&self, i: usize) -> usize {
        1 + self.r + i
    }
    pub fn t(&self) -> usize {
        1 + 2 * self.r
    }
    pub fn u(&self) -> usize {
        2 + 2 * self.r
    }
    pub fn w(&self) -> usize {
        3 + 2 * self.r
    }
}

impl SState {
    pub fn from_flat(layout: Layout, v: &[f64]) -> Self {
        let r = layout.r;
        Self {
            l: v[Layout::L],
            x: v[1..1 + r].to_vec(),
            y: v[1 + r..1 + 2 * r].to_vec(),
            t: v[layout.t()],
            u: v[layout.u()],
            w: v[layout.w()],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.x.len() + 4);
        v.push(self.l);
        v.extend_from_slice(&self.x);
        v.extend_from_slice(&self.y);
        v.push(self.t);
        v.push(self.u);
        v.push(self.w);
        v
    }

    fn check_finite(&self) -> Result<()> {
        let bad = |v: f64| !v.is_finite();
        if bad(self.l) {
            return Err(Error::NonFiniteState { component: "L" });
        }
        if self.x.iter().copied().any(bad) {
            return Err(Error::NonFiniteState { component: "X" });
        }
        if self.y.iter().copied().any(bad) {
            return Err(Error::NonFiniteState { component: "Y" });
        }
        if bad(self.t) {
            return Err(Error::NonFiniteState { component: "t" });
        }
        if bad(self.u) {
            return Err(Error::NonFiniteState { component: "u" });
        }
        if bad(self.w) {
            return Err(Error::NonFiniteState { component: "w" });
        }
        Ok(())
    }
}

#[inline]
fn weighted_x_sums(spec: &ProblemSpec, x: &[f64]) -> (f64, f64) {
    let mut lin = 0.0;
    let mut sq = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        let di = spec.di(i);
        lin += di * xi;
        sq += di * xi * xi;
    }
    (lin, sq)
}

/// Right-hand side of the s-system on the flat layout.
pub fn rhs_s_flat(spec: &ProblemSpec, v: &[f64], dv: &mut [f64]) {
    let layout = spec.layout();
    let r = layout.r;
    let he = spec.half_eps();
    let l = v[Layout::L];
    let x = &v[1..1 + r];
    let y = &v[1 + r..1 + 2 * r];
    let w = v[layout.w()];
    let (sum_x, sum_x2) = weighted_x_sums(spec, x);
    let pot = he * l * l;
    let a = sum_x2 - pot;

    dv[Layout::L] = l * a;
    for i in 0..r {
        dv[layout.x(i)] = x[i] * (a - 1.0) + spec.mu()[i] * y[i] * y[i] + pot;
        dv[layout.y(i)] = y[i] * (a - x[i]);
    }
    dv[layout.t()] = l;
    dv[layout.u()] = sum_x - 1.0;
    dv[layout.w()] = spec.eps() * l * l * sum_x - 2.0 * sum_x2 + 2.0 * w * a;
}

/// Velocity of the s-flow, returned in the shape of a state.
pub fn rhs_s(spec: &ProblemSpec, state: &SState) -> Result<SState> {
    state.check_finite()?;
    check_shape(spec, state)?;
    let v = state.to_flat();
    let mut dv = vec![0.0; v.len()];
    rhs_s_flat(spec, &v, &mut dv);
    Ok(SState::from_flat(spec.layout(), &dv))
}

fn check_shape(spec: &ProblemSpec, state: &SState) -> Result<()> {
    if state.x.len() != spec.r() || state.y.len() != spec.r() {
        return Err(Error::InvalidProblem(format!(
            "state has {} X and {} Y entries for r = {}",
            state.x.len(),
            state.y.len(),
            spec.r()
        )));
    }
    Ok(())
}

/// Time derivative of `(f, ḟ, u, u̇)` for the second-order t-system with
/// conservation constant `c`.
pub fn rhs_t(spec: &ProblemSpec, c: f64, state: &TState) -> Result<TState> {
    state.check_domain()?;
    let h = -state.udot + state.mean_curvature(spec);
    let he = spec.half_eps();
    let fddot = (0..spec.r())
        .map(|i| {
            let fi = state.f[i];
            let k = state.fdot[i] / fi;
            // d/dt(ḟ/f) = -H ḟ/f + μ/f² + ε/2
            fi * (k * k - h * k + spec.mu()[i] / (fi * fi) + he)
        })
        .collect();
    let uddot = c + spec.eps() * state.u - h * state.udot;
    Ok(TState {
        t: 1.0,
        f: state.fdot.clone(),
        fdot: fddot,
        u: state.udot,
        udot: uddot,
    })
}

pub fn t_to_s(spec: &ProblemSpec, state: &TState) -> Result<SState> {
    state.check_domain()?;
    let denom = -state.udot + state.mean_curvature(spec);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::Conversion { denominator: denom });
    }
    let l = 1.0 / denom;
    let x = (0..spec.r()).map(|i| l * state.fdot[i] / state.f[i]).collect();
    let y = state.f.iter().map(|&fi| l / fi).collect();
    Ok(SState {
        l,
        x,
        y,
        t: state.t,
        u: state.u,
        w: 1.0 + spec.eps() * state.u * l * l,
    })
}

/// Inverse of [`t_to_s`]: `fᵢ = 𝓛/Yᵢ`, `ḟᵢ/fᵢ = Xᵢ/𝓛`, `u̇ = S₂/𝓛`.
pub fn s_to_t(spec: &ProblemSpec, state: &SState) -> Result<TState> {
    state.check_finite()?;
    if !(state.l > 0.0) {
        return Err(Error::Conversion { denominator: state.l });
    }
    let f: Vec<f64> = state.y.iter().map(|&yi| state.l / yi).collect();
    let fdot = f
        .iter()
        .zip(&state.x)
        .map(|(&fi, &xi)| fi * xi / state.l)
        .collect();
    let (sum_x, _) = weighted_x_sums(spec, &state.x);
    Ok(TState {
        t: state.t,
        f,
        fdot,
        u: state.u,
        udot: (sum_x - 1.0) / state.l,
    })
}

/// `S₁ = Σ dᵢXᵢ² + Σ dᵢμᵢYᵢ² + (n−1)(ε/2)𝓛² − 1`.
pub fn s1(spec: &ProblemSpec, l: f64, x: &[f64], y: &[f64]) -> f64 {
    s1_plus_one(spec, l, x, y) - 1.0
}

/// `S₁ + 1`, a sum of terms without cancellation when `μᵢ ≥ 0`.
pub fn s1_plus_one(spec: &ProblemSpec, l: f64, x: &[f64], y: &[f64]) -> f64 {
    let (_, sum_x2) = weighted_x_sums(spec, x);
    let sum_muy2: f64 = (0..spec.r())
        .map(|i| spec.di(i) * spec.mu()[i] * y[i] * y[i])
        .sum();
    sum_x2 + sum_muy2 + (spec.nf() - 1.0) * spec.half_eps() * l * l
}

/// `S₂ = Σ dᵢXᵢ − 1`.
pub fn s2(spec: &ProblemSpec, x: &[f64]) -> f64 {
    weighted_x_sums(spec, x).0 - 1.0
}

/// Renormalized scalar curvature `𝓡 = R𝓛²`, evaluated as
/// `2ΣdᵢXᵢ − ΣdᵢXᵢ² − (ΣdᵢXᵢ)² − Σdᵢμᵢ Yᵢ² − nε𝓛²`.
///
/// The first and last terms are paired per factor so that the expression
/// stays accurate near the origin, where `Xᵢ ≈ (ε/2)𝓛²`.
pub fn rcal(spec: &ProblemSpec, l: f64, x: &[f64], y: &[f64]) -> f64 {
    let he = spec.half_eps();
    let pot = he * l * l;
    let mut paired = 0.0;
    let mut sq = 0.0;
    let mut lin = 0.0;
    let mut muy = 0.0;
    for i in 0..spec.r() {
        let di = spec.di(i);
        paired += di * (x[i] - pot);
        sq += di * x[i] * x[i];
        lin += di * x[i];
        muy += di * spec.mu()[i] * y[i] * y[i];
    }
    2.0 * paired - sq - lin * lin - muy
}

/// `Z = ((d₁−1)Y₁² + (ε/2)𝓛²) / X₁`, defined for `X₁ > 0`.
pub fn z_quantity(spec: &ProblemSpec, l: f64, x: &[f64], y: &[f64]) -> Option<f64> {
    (x[0] > 0.0).then(|| ((spec.di(0) - 1.0) * y[0] * y[0] + spec.half_eps() * l * l) / x[0])
}

/// Scalar curvature from the warped product formula
/// `R = −tr r − tr L² + (tr L)² − 2(u̇ tr L + nε/2)`.
pub fn scalar_curvature_t(spec: &ProblemSpec, state: &TState) -> Result<f64> {
    state.check_domain()?;
    let mut tr_r = 0.0;
    let mut tr_l2 = 0.0;
    let mut tr_l = 0.0;
    for i in 0..spec.r() {
        let di = spec.di(i);
        let k = state.fdot[i] / state.f[i];
        tr_r += di * spec.mu()[i] / (state.f[i] * state.f[i]);
        tr_l2 += di * k * k;
        tr_l += di * k;
    }
    Ok(-tr_r - tr_l2 + tr_l * tr_l - 2.0 * (state.udot * tr_l + spec.nf() * spec.half_eps()))
}

/// Hamilton's conservation law in t-form:
/// `tr L² + tr r + (n−1)ε/2 − (−u̇ + tr L)² − (C + εu)`.
pub fn conservation_residual_t(spec: &ProblemSpec, c: f64, state: &TState) -> Result<f64> {
    state.check_domain()?;
    let mut tr_r = 0.0;
    let mut tr_l2 = 0.0;
    for i in 0..spec.r() {
        let di = spec.di(i);
        let k = state.fdot[i] / state.f[i];
        tr_r += di * spec.mu()[i] / (state.f[i] * state.f[i]);
        tr_l2 += di * k * k;
    }
    let h = -state.udot + state.mean_curvature(spec);
    Ok(tr_l2 + tr_r + (spec.nf() - 1.0) * spec.half_eps() - h * h - c - spec.eps() * state.u)
}

/// Derived scalars at one s-state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub s1: f64,
    pub s2: f64,
    pub rcal: f64,
    pub z: Option<f64>,
    /// `|S₁ − (C + εu)𝓛²|`, evaluated through `w` as `|S₁ + 1 − C𝓛² − w|`.
    pub conservation_residual: f64,
    /// The residual divided by `𝓛²`; `None` at `𝓛 = 0`.
    pub conservation_relative: Option<f64>,
    /// `X₁ > Xᵢ` for all `i ≥ 2`.
    pub x1_above_xi: bool,
    /// `X₁ > Σ dⱼXⱼ²`.
    pub x1_above_sum_sq: bool,
    /// `X₁ > (ε/2)𝓛²`.
    pub x1_above_potential: bool,
}

pub fn diagnostics(spec: &ProblemSpec, c: f64, state: &SState) -> Result<Diagnostics> {
    state.check_finite()?;
    check_shape(spec, state)?;
    Ok(diagnostics_unchecked(spec, c, state))
}

pub(crate) fn diagnostics_unchecked(spec: &ProblemSpec, c: f64, state: &SState) -> Diagnostics {
    let (l, x, y) = (state.l, &state.x[..], &state.y[..]);
    let s1p = s1_plus_one(spec, l, x, y);
    let s1 = s1p - 1.0;
    let s2 = s2(spec, x);
    let l2 = l * l;
    // S₁ − (C + εu)𝓛² = (S₁ + 1) − C𝓛² − w
    let resid = s1p - state.w - c * l2;
    let relative = (l > 0.0).then(|| ((s1p - state.w) / l2 - c).abs());
    let (_, sum_x2) = weighted_x_sums(spec, x);
    Diagnostics {
        s1,
        s2,
        rcal: rcal(spec, l, x, y),
        z: z_quantity(spec, l, x, y),
        conservation_residual: resid.abs(),
        conservation_relative: relative,
        x1_above_xi: x[1..].iter().all(|&xi| x[0] > xi),
        x1_above_sum_sq: x[0] > sum_x2,
        x1_above_potential: x[0] > spec.half_eps() * l2,
    }
}

/// Residuals of the derivative identities for `S₁`, `S₂`, `𝓡` and `Yᵢ/𝓛`,
/// each comparing a chain-rule derivative along [`rhs_s`] with its closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityResiduals {
    pub s1: f64,
    pub s2: f64,
    pub rcal: f64,
    /// Relative to `1 + |Yᵢ/𝓛|`. Skipped (`None`) when `𝓛 = 0`.
    pub y_over_l: Option<Vec<f64>>,
}

impl IdentityResiduals {
    pub fn max(&self) -> f64 {
        let mut m = self.s1.max(self.s2).max(self.rcal);
        if let Some(v) = &self.y_over_l {
            m = v.iter().fold(m, |a, &b| a.max(b));
        }
        m
    }
}

pub fn derivative_identities_check(spec: &ProblemSpec, state: &SState) -> Result<IdentityResiduals> {
    let dv = rhs_s(spec, state)?;
    let (l, x, y) = (state.l, &state.x[..], &state.y[..]);
    let he = spec.half_eps();
    let n = spec.nf();
    let (_, sum_x2) = weighted_x_sums(spec, x);
    let a = sum_x2 - he * l * l;
    let s1v = s1(spec, l, x, y);
    let s2v = s2(spec, x);
    let rc = rcal(spec, l, x, y);

    // ∇S₁ · v
    let mut ds1 = (n - 1.0) * spec.eps() * l * dv.l;
    let mut ds2 = 0.0;
    for i in 0..spec.r() {
        let di = spec.di(i);
        ds1 += 2.0 * di * x[i] * dv.x[i] + 2.0 * di * spec.mu()[i] * y[i] * dv.y[i];
        ds2 += di * dv.x[i];
    }
    // 𝓡 = −(S₁ + S₂² + (n+1)(ε/2)𝓛²)
    let drc = -(ds1 + 2.0 * s2v * ds2 + (n + 1.0) * spec.eps() * l * dv.l);

    let res_s1 = (ds1 - 2.0 * (a * s1v + he * l * l * s2v)).abs();
    let res_s2 = (ds2 - (s1v + (a - 1.0) * s2v)).abs();
    let res_rc = (drc - 2.0 * (a * rc + (s2v - s1v - he * l * l) * s2v)).abs();
    let y_over_l = (l != 0.0).then(|| {
        (0..spec.r())
            .map(|i| {
                let q = y[i] / l;
                let dq = dv.y[i] / l - y[i] * dv.l / (l * l);
                (dq + q * x[i]).abs() / (1.0 + q.abs())
            })
            .collect()
    });
    Ok(IdentityResiduals {
        s1: res_s1,
        s2: res_s2,
        rcal: res_rc,
        y_over_l,
    })
}

/// Stationary point `𝓛 = 0, X₁ = Y₁ = 1/d₁`, all other components zero.
pub fn singular_orbit_fixed_point(spec: &ProblemSpec) -> SState {
    let r = spec.r();
    let mut x = vec![0.0; r];
    let mut y = vec![0.0; r];
    x[0] = 1.0 / spec.di(0);
    y[0] = 1.0 / spec.di(0);
    SState {
        l: 0.0,
        x,
        y,
        t: 0.0,
        u: 0.0,
        w: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r3s1() -> ProblemSpec {
        ProblemSpec::new(vec![2, 1], vec![1.0, 0.0], 1.0).unwrap()
    }

    fn sample_state() -> SState {
        SState {
            l: 0.1,
            x: vec![0.3, 0.1],
            y: vec![0.4, 0.2],
            t: 1.0,
            u: -0.5,
            w: 1.0 - 0.5 * 0.01,
        }
    }

    /// Second, independently written evaluation of the s-system.
    fn rhs_by_hand(l: f64, x1: f64, x2: f64, y1: f64, y2: f64) -> [f64; 5] {
        let q = 2.0 * x1 * x1 + x2 * x2 - 0.5 * l * l;
        [
            l * q,
            x1 * (q - 1.0) + y1 * y1 + 0.5 * l * l,
            x2 * (q - 1.0) + 0.5 * l * l,
            y1 * (q - x1),
            y2 * (q - x2),
        ]
    }

    #[test]
    fn spec_validation() {
        assert!(ProblemSpec::new(vec![2], vec![1.0], 1.0).is_err());
        assert!(ProblemSpec::new(vec![2, 1], vec![0.5, 0.0], 1.0).is_err());
        assert!(ProblemSpec::new(vec![2, 1], vec![1.0, 0.0], 0.0).is_err());
        assert!(ProblemSpec::new(vec![2, 0], vec![1.0, 0.0], 1.0).is_err());
        let s = r3s1();
        assert_eq!(s.n(), 3);
        assert_eq!(s.n(), s.d().iter().sum::<u32>());
        assert!(s.require_flat_links().is_ok());
        let s1 = ProblemSpec::new(vec![1, 2], vec![0.0, 1.0], 1.0).unwrap();
        assert!(s1.require_conical().is_err());
    }

    #[test]
    fn rhs_vanishes_at_singular_orbit() {
        let spec = r3s1();
        let dv = rhs_s(&spec, &singular_orbit_fixed_point(&spec)).unwrap();
        assert_eq!(dv.l, 0.0);
        assert!(dv.x.iter().chain(&dv.y).all(|&v| v == 0.0));
        assert_eq!(dv.t, 0.0);
        assert_eq!(dv.u, 0.0);
    }

    #[test]
    fn rhs_at_origin() {
        let spec = ProblemSpec::new(vec![3, 2, 1], vec![2.0, 1.5, 0.0], 2.0).unwrap();
        let st = SState {
            l: 0.0,
            x: vec![0.0; 3],
            y: vec![0.0; 3],
            t: 0.0,
            u: 0.0,
            w: 1.0,
        };
        let dv = rhs_s(&spec, &st).unwrap();
        assert_eq!(dv.l, 0.0);
        assert!(dv.x.iter().chain(&dv.y).all(|&v| v == 0.0));
        assert_eq!(dv.u, -1.0);
    }

    #[test]
    fn rhs_matches_hand_values() {
        let spec = r3s1();
        let dv = rhs_s(&spec, &sample_state()).unwrap();
        let want = [0.0185, -0.0795, -0.0765, -0.046, 0.017];
        let got = [dv.l, dv.x[0], dv.x[1], dv.y[0], dv.y[1]];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{g} vs {w}");
        }
        let by_hand = rhs_by_hand(0.1, 0.3, 0.1, 0.4, 0.2);
        for (g, w) in got.iter().zip(by_hand) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn rhs_rejects_non_finite() {
        let spec = r3s1();
        let mut st = sample_state();
        st.x[1] = f64::NAN;
        assert_eq!(
            rhs_s(&spec, &st),
            Err(Error::NonFiniteState { component: "X" })
        );
    }

    #[test]
    fn diagnostics_hand_values() {
        let spec = r3s1();
        let d = diagnostics(&spec, -1.0, &sample_state()).unwrap();
        assert!((d.s1 + 0.48).abs() < 1e-15);
        assert!((d.s2 + 0.3).abs() < 1e-15);
        assert!((d.rcal - 0.37).abs() < 1e-15);
        assert!((d.z.unwrap() - 0.55).abs() < 1e-15);
        assert!(d.x1_above_xi && d.x1_above_sum_sq && d.x1_above_potential);
    }

    #[test]
    fn diagnostics_fixed_point_and_origin() {
        let spec = r3s1();
        let d = diagnostics(&spec, 0.0, &singular_orbit_fixed_point(&spec)).unwrap();
        assert!(d.s1.abs() < 1e-16 && d.s2.abs() < 1e-16 && d.rcal.abs() < 1e-16);
        assert!(d.conservation_relative.is_none());
        let origin = SState {
            l: 0.0,
            x: vec![0.0; 2],
            y: vec![0.0; 2],
            t: 0.0,
            u: 0.0,
            w: 1.0,
        };
        let d = diagnostics(&spec, 0.0, &origin).unwrap();
        assert_eq!((d.s1, d.s2, d.rcal), (-1.0, -1.0, 0.0));
        assert_eq!(d.z, None);
    }

    #[test]
    fn rhs_t_singular_orbit_values() {
        // Close to t = 0 the series data reproduce ü(0) = C/(d₁+1) and
        // (d₁+1) f̈₂(0) = μ₂/f̄₂ + (ε/2) f̄₂.
        let spec = r3s1();
        let c = -3.0;
        let t = 1e-5;
        let st = TState {
            t,
            f: vec![t, 1.0 + t * t / 12.0],
            fdot: vec![1.0, t / 6.0],
            u: c * t * t / 6.0,
            udot: c * t / 3.0,
        };
        let dv = rhs_t(&spec, c, &st).unwrap();
        assert!((dv.udot + 1.0).abs() < 1e-6);
        assert!((dv.fdot[1] - 1.0 / 6.0).abs() < 1e-6);
    }

    #[test]
    fn rhs_t_flat_factor_at_rest() {
        let spec = ProblemSpec::new(vec![2, 3], vec![1.0, 0.0], 0.7).unwrap();
        let st = TState {
            t: 2.0,
            f: vec![1.3, 0.4],
            fdot: vec![0.9, 0.0],
            u: -0.4,
            udot: -0.8,
        };
        let dv = rhs_t(&spec, -1.0, &st).unwrap();
        assert!((dv.fdot[1] / st.f[1] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn rhs_t_domain_error() {
        let spec = r3s1();
        let st = TState {
            t: 1.0,
            f: vec![1.0, 0.0],
            fdot: vec![1.0, 0.0],
            u: 0.0,
            udot: 0.0,
        };
        assert_eq!(
            rhs_t(&spec, -1.0, &st),
            Err(Error::Domain { index: 2, value: 0.0 })
        );
    }

    #[test]
    fn t_to_s_examples() {
        let spec = r3s1();
        let st = TState {
            t: 1.0,
            f: vec![1.0, 1.0],
            fdot: vec![1.0, 0.0],
            u: 0.0,
            udot: 0.0,
        };
        let s = t_to_s(&spec, &st).unwrap();
        assert_eq!(s.l, 0.5);
        assert_eq!(s.x, vec![0.5, 0.0]);
        assert_eq!(s.y, vec![0.5, 0.5]);

        let st2 = TState {
            fdot: vec![0.5, 0.0],
            udot: -1.0,
            ..st.clone()
        };
        assert_eq!(t_to_s(&spec, &st2).unwrap().l, 0.5);

        let st3 = TState {
            fdot: vec![0.5, 0.0],
            udot: 1.0,
            ..st
        };
        assert!(matches!(
            t_to_s(&spec, &st3),
            Err(Error::Conversion { .. })
        ));
    }

    #[test]
    fn scalar_curvature_two_routes_agree() {
        // R from the warped product formula against 𝓡/𝓛² from the s-variables.
        let spec = ProblemSpec::new(vec![2, 1, 3], vec![1.0, 0.0, 2.0], 1.3).unwrap();
        let st = TState {
            t: 0.7,
            f: vec![0.6, 1.1, 0.9],
            fdot: vec![0.8, 0.2, 0.3],
            u: -0.3,
            udot: -0.6,
        };
        let r_t = scalar_curvature_t(&spec, &st).unwrap();
        let s = t_to_s(&spec, &st).unwrap();
        let r_s = rcal(&spec, s.l, &s.x, &s.y) / (s.l * s.l);
        assert!((r_t - r_s).abs() < 1e-12 * r_t.abs().max(1.0));
    }
}
