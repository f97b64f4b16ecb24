//! Series initial data just off the singular orbit `t = 0`.
//!
//! The smooth closing conditions are `f₁(0) = 0, ḟ₁(0) = 1`, `fᵢ(0) = f̄ᵢ,
//! ḟᵢ(0) = 0` for `i ≥ 2`, and `u(0) = u̇(0) = 0`, `ü(0) = C/(d₁+1)`. The even
//! and odd parities are forced by smoothness, so the ansatz
//!
//! ```text
//! f₁ = t (1 + a t² + b t⁴),   fᵢ = f̄ᵢ (1 + pᵢ t² + qᵢ t⁴),   u = c t² + e t⁴
//! ```
//!
//! is matched order by order against the t-system.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{conservation_residual_t, t_to_s, ProblemSpec, SState, SeedParams, TState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedRegime {
    Regular,
    Einstein,
    Rejected(String),
}

/// Classify seed data: `C < 0` gives a regular trajectory, `C = 0` an
/// Einstein one; `C > 0` or `F̄ᵢ ≤ 0` are outside the treated regime.
pub fn validate_seed_regime(spec: &ProblemSpec, params: &SeedParams) -> SeedRegime {
    if params.fbar.len() + 1 != spec.r() {
        return SeedRegime::Rejected(format!(
            "expected {} values of fbar, got {}",
            spec.r() - 1,
            params.fbar.len()
        ));
    }
    if let Some(i) = params.fbar.iter().position(|&f| !(f.is_finite() && f > 0.0)) {
        return SeedRegime::Rejected(format!(
            "fbar{} = {} must be positive",
            i + 2,
            params.fbar[i]
        ));
    }
    for (i, big_f) in params.fbar_curvatures(spec).into_iter().enumerate() {
        if !(big_f > 0.0) {
            return SeedRegime::Rejected(format!(
                "F{} = mu{}/fbar{}^2 + eps/2 = {big_f} must be positive",
                i + 2,
                i + 2,
                i + 2
            ));
        }
    }
    if !params.c.is_finite() {
        return SeedRegime::Rejected("C must be finite".into());
    }
    if params.c > 0.0 {
        return SeedRegime::Rejected(format!(
            "C = {} > 0 contradicts the scalar curvature bound R + (n+1)eps/2 > 0",
            params.c
        ));
    }
    if params.c == 0.0 {
        SeedRegime::Einstein
    } else {
        SeedRegime::Regular
    }
}

/// Taylor coefficients of the seed series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesCoefficients {
    pub a: f64,
    pub b: f64,
    /// `pᵢ`, `qᵢ` for `i = 2..=r`.
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub c: f64,
    pub e: f64,
}

pub fn series_coefficients(spec: &ProblemSpec, params: &SeedParams) -> SeriesCoefficients {
    let d1 = spec.di(0);
    let mu1 = spec.mu()[0];
    let he = spec.half_eps();
    let rest = 1..spec.r();

    let alpha: Vec<f64> = params
        .fbar_curvatures(spec)
        .into_iter()
        .map(|bf| bf / (d1 + 1.0))
        .collect();
    let p: Vec<f64> = alpha.iter().map(|al| 0.5 * al).collect();
    let c = params.c / (2.0 * (d1 + 1.0));
    let a_rest: f64 = rest
        .clone()
        .map(|i| spec.di(i) * alpha[i - 1])
        .sum::<f64>()
        - 2.0 * c;
    let a = (he - a_rest) / (6.0 * d1);
    // t-coefficient of the mean curvature H = d₁/t + A t + O(t³)
    let big_a = 2.0 * d1 * a + a_rest;
    let e = c * (spec.eps() - 2.0 * big_a) / (4.0 * (d1 + 3.0));
    let beta: Vec<f64> = rest
        .clone()
        .map(|i| {
            let fb = params.fbar[i - 1];
            let m = spec.mu()[i] / (fb * fb);
            -alpha[i - 1] * (big_a + m) / (d1 + 3.0)
        })
        .collect();
    let sum_dbeta: f64 = rest.map(|i| spec.di(i) * beta[i - 1]).sum();
    let beta1 =
        (-2.0 * a * big_a - sum_dbeta + 4.0 * e + 2.0 * mu1 * a * a) / (3.0 + 2.0 * d1 + 0.5 * mu1);
    let b = (beta1 + 2.0 * a * a) / 4.0;
    let q = beta
        .iter()
        .zip(&p)
        .map(|(be, pi)| (be + 2.0 * pi * pi) / 4.0)
        .collect();
    SeriesCoefficients { a, b, p, q, c, e }
}

/// Series truncation order: 2 keeps `a, pᵢ, c`; 4 adds `b, qᵢ, e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeedOrder {
    Two,
    Four,
}

impl SeedOrder {
    pub fn as_int(self) -> u32 {
        match self {
            SeedOrder::Two => 2,
            SeedOrder::Four => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOptions {
    pub order: SeedOrder,
    /// Refuse seeds whose estimated error is above this bound.
    pub max_error: Option<f64>,
}

impl Default for SeedOptions {
    fn default() -> Self {
        Self {
            order: SeedOrder::Four,
            max_error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub t0: f64,
    pub tstate: TState,
    pub sstate: SState,
    pub order: u32,
    /// Estimated conservation-law residual of the seed, including the
    /// round-off floor of evaluating it.
    pub est_error: f64,
}

/// Length below which the series is accurate: the smallest of `1`, the
/// `f̄ᵢ`, `1/√ε`, `1/√|C|` and `1/√F̄ᵢ`.
pub fn natural_length(spec: &ProblemSpec, params: &SeedParams) -> f64 {
    let mut s = 1.0_f64;
    for &f in &params.fbar {
        s = s.min(f);
    }
    s = s.min(1.0 / spec.eps().sqrt());
    if params.c != 0.0 {
        s = s.min(1.0 / params.c.abs().sqrt());
    }
    for bf in params.fbar_curvatures(spec) {
        if bf > 0.0 {
            s = s.min(1.0 / bf.sqrt());
        }
    }
    s
}

/// Chosen so that truncation (about t0⁴ at order four) and round-off
/// amplified off the smooth family (about ε_mach/t0²) are both negligible.
pub fn default_t0(spec: &ProblemSpec, params: &SeedParams) -> f64 {
    8e-3 * natural_length(spec, params)
}

fn series_state(spec: &ProblemSpec, params: &SeedParams, k: &SeriesCoefficients, t: f64, order: SeedOrder) -> TState {
    let four = matches!(order, SeedOrder::Four);
    let t2 = t * t;
    let (b, e) = if four { (k.b, k.e) } else { (0.0, 0.0) };
    let mut f = Vec::with_capacity(spec.r());
    let mut fdot = Vec::with_capacity(spec.r());
    f.push(t * (1.0 + k.a * t2 + b * t2 * t2));
    fdot.push(1.0 + 3.0 * k.a * t2 + 5.0 * b * t2 * t2);
    for i in 1..spec.r() {
        let fb = params.fbar[i - 1];
        let (p, q) = (k.p[i - 1], if four { k.q[i - 1] } else { 0.0 });
        f.push(fb * (1.0 + p * t2 + q * t2 * t2));
        fdot.push(fb * (2.0 * p * t + 4.0 * q * t2 * t));
    }
    TState {
        t,
        f,
        fdot,
        u: k.c * t2 + e * t2 * t2,
        udot: 2.0 * k.c * t + 4.0 * e * t2 * t,
    }
}

/// Seed with the default options (order 4, no error bound).
pub fn taylor_seed(spec: &ProblemSpec, params: &SeedParams, t0: f64) -> Result<SeedResult> {
    taylor_seed_with(spec, params, t0, &SeedOptions::default())
}

pub fn taylor_seed_with(
    spec: &ProblemSpec,
    params: &SeedParams,
    t0: f64,
    opts: &SeedOptions,
) -> Result<SeedResult> {
    if let SeedRegime::Rejected(why) = validate_seed_regime(spec, params) {
        return Err(Error::InvalidSeed(why));
    }
    if !(t0.is_finite() && t0 > 0.0) {
        return Err(Error::InvalidSeed(format!("t0 = {t0} must be positive")));
    }
    let k = series_coefficients(spec, params);
    let tstate = series_state(spec, params, &k, t0, opts.order);

    // Both truncations leave a residual of size O(t0⁴) in the conservation
    // law; their difference measures it. Evaluated at a reference time where
    // round-off is negligible and scaled down, since near t = 0 the residual
    // is a difference of O(1/t²) terms.
    let t_ref = 0.1 * natural_length(spec, params);
    let w_ref = |order| conservation_residual_t(spec, params.c, &series_state(spec, params, &k, t_ref, order));
    let w_diff = (w_ref(SeedOrder::Two)? - w_ref(SeedOrder::Four)?).abs();
    let truncation = w_diff * (t0 / t_ref).powi(4);
    let h = -tstate.udot + tstate.mean_curvature(spec);
    let roundoff = 8.0 * f64::EPSILON * h * h;
    let est_error = truncation.max(roundoff);

    if let Some(max_err) = opts.max_error {
        if truncation > max_err {
            return Err(Error::SeedTooCoarse {
                t0,
                requested: max_err,
                suggested: 0.9 * t0 * (max_err / truncation).powf(0.25),
            });
        }
    }
    let sstate = t_to_s(spec, &tstate)?;
    Ok(SeedResult {
        t0,
        tstate,
        sstate,
        order: opts.order.as_int(),
        est_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::rhs_t;

    fn r3s1() -> ProblemSpec {
        ProblemSpec::new(vec![2, 1], vec![1.0, 0.0], 1.0).unwrap()
    }

    #[test]
    fn regime_classification() {
        let spec = r3s1();
        assert_eq!(
            validate_seed_regime(&spec, &SeedParams::new(vec![1.0], -1.0)),
            SeedRegime::Regular
        );
        assert_eq!(
            validate_seed_regime(&spec, &SeedParams::new(vec![1.0], 0.0)),
            SeedRegime::Einstein
        );
        assert!(matches!(
            validate_seed_regime(&spec, &SeedParams::new(vec![1.0], 0.5)),
            SeedRegime::Rejected(_)
        ));
        let neg = ProblemSpec::new(vec![2, 1], vec![1.0, -1.0], 1.0).unwrap();
        assert_eq!(
            validate_seed_regime(&neg, &SeedParams::new(vec![2.0], -1.0)),
            SeedRegime::Regular
        );
        assert!(matches!(
            validate_seed_regime(&neg, &SeedParams::new(vec![1.0], -1.0)),
            SeedRegime::Rejected(_)
        ));
    }

    #[test]
    fn seed_values_order_two() {
        let spec = r3s1();
        let params = SeedParams::new(vec![1.0], -3.0);
        let opts = SeedOptions {
            order: SeedOrder::Two,
            max_error: None,
        };
        let s = taylor_seed_with(&spec, &params, 1e-3, &opts).unwrap();
        assert!((s.tstate.u + 5e-7).abs() < 1e-20);
        assert!((s.tstate.f[1] - (1.0 + 0.5 / 6.0 * 1e-6)).abs() < 1e-16);
        let s4 = taylor_seed(&spec, &params, 1e-3).unwrap();
        assert!((s4.tstate.u / -5e-7 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn einstein_seed_has_zero_potential() {
        let spec = r3s1();
        let s = taylor_seed(&spec, &SeedParams::new(vec![1.0], 0.0), 1e-3).unwrap();
        assert_eq!(s.tstate.u, 0.0);
        assert_eq!(s.tstate.udot, 0.0);
    }

    #[test]
    fn seed_near_fixed_point() {
        let spec = ProblemSpec::new(vec![3, 2], vec![2.0, 0.5], 1.0).unwrap();
        let params = SeedParams::new(vec![0.7], -2.0);
        for &t0 in &[1e-2, 5e-3] {
            let s = taylor_seed(&spec, &params, t0).unwrap();
            let st = &s.sstate;
            assert!(st.l > 0.0 && st.x.iter().chain(&st.y).all(|&v| v > 0.0));
            assert!((st.x[0] - 1.0 / 3.0).abs() < 10.0 * t0 * t0);
            assert!((st.y[0] - 1.0 / 3.0).abs() < 10.0 * t0 * t0);
        }
    }

    /// The series solves the t-system: f̈ from the series against f̈ from
    /// the equations, with the mismatch shrinking at the truncation rate.
    #[test]
    fn series_solves_equations() {
        let spec = ProblemSpec::new(vec![2, 1, 3], vec![1.0, 0.0, 1.5], 0.8).unwrap();
        let params = SeedParams::new(vec![1.2, 0.9], -1.7);
        let k = series_coefficients(&spec, &params);
        let mismatch = |t: f64| {
            let st = series_state(&spec, &params, &k, t, SeedOrder::Four);
            let dv = rhs_t(&spec, params.c, &st).unwrap();
            let t2 = t * t;
            let mut m: f64 = 0.0;
            let f1dd = 6.0 * k.a * t + 20.0 * k.b * t2 * t;
            m = m.max((dv.fdot[0] - f1dd).abs());
            for i in 1..spec.r() {
                let fb = params.fbar[i - 1];
                let fdd = fb * (2.0 * k.p[i - 1] + 12.0 * k.q[i - 1] * t2);
                m = m.max((dv.fdot[i] - fdd).abs());
            }
            let udd = 2.0 * k.c + 12.0 * k.e * t2;
            m.max((dv.udot - udd).abs())
        };
        let (m1, m2) = (mismatch(0.02), mismatch(0.01));
        // residual of an order-4 series is O(t⁴) in the second derivatives
        assert!(m1 / m2 > 12.0, "ratio {}", m1 / m2);
    }

    #[test]
    fn conservation_at_seed() {
        let spec = r3s1();
        let params = SeedParams::new(vec![1.0], -1.0);
        for order in [SeedOrder::Two, SeedOrder::Four] {
            let opts = SeedOptions { order, max_error: None };
            let s = taylor_seed_with(&spec, &params, 1e-2, &opts).unwrap();
            let w = conservation_residual_t(&spec, params.c, &s.tstate).unwrap();
            assert!(w.abs() <= 10.0 * s.est_error, "{w} vs {}", s.est_error);
        }
        let w_at = |t0: f64, order| {
            let opts = SeedOptions { order, max_error: None };
            let s = taylor_seed_with(&spec, &params, t0, &opts).unwrap();
            conservation_residual_t(&spec, params.c, &s.tstate).unwrap().abs()
        };
        for order in [SeedOrder::Two, SeedOrder::Four] {
            let ratio = w_at(0.08, order) / w_at(0.04, order);
            assert!((ratio - 16.0).abs() < 1.0, "{order:?} ratio {ratio}");
        }
    }

    #[test]
    fn refuses_coarse_seed() {
        let spec = r3s1();
        let params = SeedParams::new(vec![1.0], -1.0);
        let opts = SeedOptions {
            order: SeedOrder::Two,
            max_error: Some(1e-12),
        };
        match taylor_seed_with(&spec, &params, 1e-1, &opts) {
            Err(Error::SeedTooCoarse { suggested, .. }) => {
                assert!(suggested < 1e-1);
                let again = SeedOptions {
                    max_error: Some(1e-12),
                    ..opts
                };
                assert!(taylor_seed_with(&spec, &params, suggested, &again).is_ok());
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn rejects_invalid() {
        let spec = r3s1();
        assert!(taylor_seed(&spec, &SeedParams::new(vec![1.0], 1.0), 1e-3).is_err());
        assert!(taylor_seed(&spec, &SeedParams::new(vec![1.0], -1.0), 0.0).is_err());
        assert!(taylor_seed(&spec, &SeedParams::new(vec![], -1.0), 1e-3).is_err());
    }
}
