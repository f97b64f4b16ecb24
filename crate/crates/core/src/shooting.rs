//! Inverse problem: seed parameters whose trajectory has a prescribed
//! asymptotic cone. `σ₁` is matched by bisection in `C`, the Ricci-flat
//! factors by rescaling `f̄ᵢ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{cone_scal_coeff, extract_sigma, run_trajectory, AsymptoticReport, RunConfig, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::model::{ProblemSpec, SeedParams};
use crate::subsystem;

/// Target cone `dt² + Σ (σᵢ⁻¹ t)² gᵢ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub sigma: Vec<f64>,
    pub cone_scal_coeff: f64,
    pub d: Vec<u32>,
    pub mu: Vec<f64>,
}

impl ConeSpec {
    pub fn new(spec: &ProblemSpec, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != spec.r() {
            return Err(Error::InvalidProblem(format!(
                "cone needs {} radii, got {}",
                spec.r(),
                sigma.len()
            )));
        }
        if sigma.iter().any(|&s| s == 0.0) {
            return Err(Error::InvalidProblem(
                "sigma = 0 describes an Einstein trajectory, which has no cone to realize".into(),
            ));
        }
        if let Some((i, s)) = sigma.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidProblem(format!("sigma{} = {s} must be positive", i + 1)));
        }
        Ok(Self {
            cone_scal_coeff: cone_scal_coeff(spec, &sigma),
            sigma,
            d: spec.d().to_vec(),
            mu: spec.mu().to_vec(),
        })
    }

    /// Scalar curvature of the cone at radius `t`.
    pub fn scalar_curvature(&self, t: f64) -> f64 {
        self.cone_scal_coeff / (t * t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Expand,
    Bisect,
    Verify,
}

/// One trajectory evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketEntry {
    pub c: f64,
    pub sigma1: f64,
    pub uncertainty: f64,
    pub low_confidence: bool,
    pub phase: Phase,
    /// Some sample has `Y₁/X₁` above the target with `1 − X₁ − Z > 0`.
    pub trapped_above: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShootStatus {
    Converged,
    BracketNotFound,
    BudgetExhausted,
    VerificationFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShootResult {
    pub params: SeedParams,
    /// Extraction from the final verification run.
    pub achieved: Option<AsymptoticReport>,
    pub history: Vec<BracketEntry>,
    /// `cᵢ` for `i = 2..=r`.
    pub rescale: Vec<f64>,
    /// Trajectory evaluations, verification runs included.
    pub iterations: usize,
    pub status: ShootStatus,
    pub notes: Vec<String>,
}

impl ShootResult {
    pub fn converged(&self) -> bool {
        self.status == ShootStatus::Converged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShootConfig {
    /// Configuration for bracket and bisection evaluations.
    pub search: RunConfig,
    /// Configuration for the final verification run.
    pub verify: RunConfig,
    /// Relative tolerance on the achieved radii.
    pub tol: f64,
    pub max_evals: usize,
    /// Search range `−c_max·ε ≤ C ≤ −c_min·ε`.
    pub c_min: f64,
    pub c_max: f64,
}

impl Default for ShootConfig {
    fn default() -> Self {
        let mut search = RunConfig::default();
        search.floor = 1e-4;
        search.integrator.rel_tol = 1e-10;
        Self {
            search,
            verify: RunConfig::default(),
            tol: 1e-4,
            max_evals: 60,
            c_min: 1e-8,
            c_max: 1e8,
        }
    }
}

/// `σ₁` at the given `C` with its fit uncertainty and confidence flag.
pub fn sigma1_of_c(spec: &ProblemSpec, fbar: &[f64], c: f64, cfg: &RunConfig) -> Result<(f64, f64, bool)> {
    let (_, rep) = evaluate(spec, fbar, c, cfg)?;
    Ok((rep.sigma[0], rep.sigma_ci[0], rep.low_confidence))
}

fn evaluate(spec: &ProblemSpec, fbar: &[f64], c: f64, cfg: &RunConfig) -> Result<(TrajectoryRecord, AsymptoticReport)> {
    let rec = run_trajectory(spec, &SeedParams::new(fbar.to_vec(), c), cfg)?;
    let rep = extract_sigma(&rec)?;
    Ok((rec, rep))
}

/// First sample at which `Y₁/X₁ > σ̄` and `1 − X₁ − Z > 0`; from there on
/// `Y₁/X₁` cannot drop below `σ̄`. Needs `σ̄ > √((n−1)/(d₁−1))`.
pub fn trap_certificate(record: &TrajectoryRecord, sigma_bar: f64) -> Option<usize> {
    let spec = &record.spec;
    let d1 = spec.di(0);
    if d1 <= 1.0 || sigma_bar * sigma_bar <= (spec.nf() - 1.0) / (d1 - 1.0) {
        return None;
    }
    record.samples.iter().position(|s| {
        let (x1, y1) = (s.state.x[0], s.state.y[0]);
        match s.diag.z {
            Some(z) => x1 > 0.0 && y1 / x1 > sigma_bar && 1.0 - x1 - z > 0.0,
            None => false,
        }
    })
}

fn entry(spec: &ProblemSpec, fbar: &[f64], c: f64, target: f64, cfg: &RunConfig, phase: Phase) -> BracketEntry {
    match evaluate(spec, fbar, c, cfg) {
        Ok((rec, rep)) => BracketEntry {
            c,
            sigma1: rep.sigma[0],
            uncertainty: rep.sigma_ci[0],
            low_confidence: rep.low_confidence,
            phase,
            trapped_above: trap_certificate(&rec, target).is_some(),
            error: None,
        },
        Err(e) => BracketEntry {
            c,
            sigma1: f64::NAN,
            uncertainty: f64::NAN,
            low_confidence: true,
            phase,
            trapped_above: false,
            error: Some(e.to_string()),
        },
    }
}

/// Bracket expansion (×4 from `C = −εn`) then bisection in `θ = ln(−C/ε)`.
pub fn solve_for_sigma1(spec: &ProblemSpec, fbar: &[f64], target: f64, cfg: &ShootConfig) -> Result<ShootResult> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Precondition(format!("target sigma1 must be positive, got {target}")));
    }
    spec.require_conical()?;
    let eps = spec.eps();
    let c_of = |theta: f64| -eps * theta.exp();
    let (th_lo, th_hi) = (cfg.c_min.ln(), cfg.c_max.ln());
    let mut history = Vec::new();
    let mut notes = Vec::new();
    let fail = |history: Vec<BracketEntry>, notes: Vec<String>, status| ShootResult {
        params: SeedParams::new(fbar.to_vec(), f64::NAN),
        achieved: None,
        iterations: history.len(),
        history,
        rescale: Vec::new(),
        status,
        notes,
    };

    let d1 = spec.di(0);
    if d1 > 1.0 && target * target > (spec.nf() - 1.0) / (d1 - 1.0) {
        if let Ok(sub) = subsystem::unstable_trajectory(spec.d()[0], subsystem::DEFAULT_OFFSET) {
            let peak = sub.samples.iter().map(|p| p.y / p.x).fold(0.0, f64::max);
            notes.push(format!("limit flow reaches Y/X = {peak:.3e} (target {target:e})"));
        }
    }

    // Expansion. `lo` is the θ side with σ₁ below the target.
    let mut theta = spec.nf().ln();
    let first = entry(spec, fbar, c_of(theta), target, &cfg.search, Phase::Expand);
    if first.error.is_some() {
        let msg = first.error.clone().unwrap();
        history.push(first);
        notes.push(format!("initial evaluation failed: {msg}"));
        return Ok(fail(history, notes, ShootStatus::BracketNotFound));
    }
    let below = first.sigma1 < target;
    let mut prev = (theta, first.sigma1);
    history.push(first);
    let step = 4f64.ln();
    let (mut lo, mut hi);
    loop {
        if history.len() >= cfg.max_evals {
            return Ok(fail(history, notes, ShootStatus::BudgetExhausted));
        }
        theta += if below { step } else { -step };
        if theta > th_hi + 1e-12 || theta < th_lo - 1e-12 {
            notes.push("no bracket within the search range".into());
            return Ok(fail(history, notes, ShootStatus::BracketNotFound));
        }
        let e = entry(spec, fbar, c_of(theta), target, &cfg.search, Phase::Expand);
        let s = e.sigma1;
        let err = e.error.clone();
        history.push(e);
        if let Some(msg) = err {
            notes.push(format!("evaluation at C = {:e} failed: {msg}", c_of(theta)));
            return Ok(fail(history, notes, ShootStatus::BracketNotFound));
        }
        if (s < target) != below {
            if below {
                (lo, hi) = ((prev.0, prev.1), (theta, s));
            } else {
                (lo, hi) = ((theta, s), (prev.0, prev.1));
            }
            break;
        }
        prev = (theta, s);
    }

    // Bisection; both endpoints keep their side of the target.
    let mut best = if (lo.1 - target).abs() < (hi.1 - target).abs() { lo } else { hi };
    while (best.1 - target).abs() > 0.1 * cfg.tol * target {
        if history.len() >= cfg.max_evals {
            notes.push(format!("budget exhausted with |sigma1 - target| = {:e}", (best.1 - target).abs()));
            return Ok(fail(history, notes, ShootStatus::BudgetExhausted));
        }
        let mid = 0.5 * (lo.0 + hi.0);
        let e = entry(spec, fbar, c_of(mid), target, &cfg.search, Phase::Bisect);
        let s = e.sigma1;
        let err = e.error.clone();
        history.push(e);
        if let Some(msg) = err {
            notes.push(format!("bisection evaluation at C = {:e} failed: {msg}", c_of(mid)));
            return Ok(fail(history, notes, ShootStatus::BracketNotFound));
        }
        if s < target {
            lo = (mid, s);
        } else {
            hi = (mid, s);
        }
        if !(lo.1 < target && hi.1 >= target) {
            notes.push("bracket lost its straddle".into());
        }
        if (s - target).abs() < (best.1 - target).abs() {
            best = (mid, s);
        }
    }

    let params = SeedParams::new(fbar.to_vec(), c_of(best.0));
    verify(spec, params, Vec::new(), target_vec(spec, target, None), history, notes, cfg)
}

fn target_vec(spec: &ProblemSpec, sigma1: f64, rest: Option<&[f64]>) -> Vec<Option<f64>> {
    let mut v = vec![None; spec.r()];
    v[0] = Some(sigma1);
    if let Some(rest) = rest {
        for (k, &s) in rest.iter().enumerate() {
            v[k + 1] = Some(s);
        }
    }
    v
}

fn verify(
    spec: &ProblemSpec,
    params: SeedParams,
    rescale: Vec<f64>,
    targets: Vec<Option<f64>>,
    mut history: Vec<BracketEntry>,
    mut notes: Vec<String>,
    cfg: &ShootConfig,
) -> Result<ShootResult> {
    let (rec, rep) = evaluate(spec, &params.fbar, params.c, &cfg.verify)?;
    history.push(BracketEntry {
        c: params.c,
        sigma1: rep.sigma[0],
        uncertainty: rep.sigma_ci[0],
        low_confidence: rep.low_confidence,
        phase: Phase::Verify,
        trapped_above: targets[0].is_some_and(|t| trap_certificate(&rec, t).is_some()),
        error: None,
    });
    let mut ok = true;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let rel = (rep.sigma[i] - t).abs() / t;
            if rel > cfg.tol {
                ok = false;
                notes.push(format!("sigma{} = {} misses target {t} by {rel:e}", i + 1, rep.sigma[i]));
            }
        }
    }
    Ok(ShootResult {
        params,
        achieved: Some(rep),
        iterations: history.len(),
        history,
        rescale,
        status: if ok { ShootStatus::Converged } else { ShootStatus::VerificationFailed },
        notes,
    })
}

/// Matches `σᵢ`, `i ≥ 2`, by `f̄ᵢ ↦ f̄ᵢ/cᵢ` with `cᵢ = target/achieved`.
pub fn rescale_for_ricci_flat(spec: &ProblemSpec, base: &ShootResult, targets: &[f64], cfg: &ShootConfig) -> Result<ShootResult> {
    spec.require_flat_links()?;
    let achieved = base
        .achieved
        .as_ref()
        .ok_or_else(|| Error::Precondition("base result has no verified extraction".into()))?;
    if targets.len() != spec.r() - 1 {
        return Err(Error::InvalidProblem(format!(
            "expected {} targets for the flat factors, got {}",
            spec.r() - 1,
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Precondition(format!("target radius {t} must be positive")));
    }
    let rescale: Vec<f64> = targets
        .iter()
        .zip(&achieved.sigma[1..])
        .map(|(t, a)| t / a)
        .collect();
    let fbar: Vec<f64> = base.params.fbar.iter().zip(&rescale).map(|(f, c)| f / c).collect();
    let mut history = base.history.clone();
    let mut notes = base.notes.clone();
    let sigma1 = achieved.sigma[0];
    let params = SeedParams::new(fbar.clone(), base.params.c);
    let mut res = verify(spec, params, rescale.clone(), target_vec(spec, sigma1, Some(targets)), std::mem::take(&mut history), std::mem::take(&mut notes), cfg)?;
    if let Some(rep) = &res.achieved {
        let drift = (rep.sigma[0] - sigma1).abs() / sigma1;
        res.notes.push(format!("sigma1 drift under rescaling {drift:e}"));
        if drift > cfg.tol {
            // Re-bracket with the rescaled radii.
            let mut again = solve_for_sigma1(spec, &fbar, sigma1, cfg)?;
            again.rescale = rescale;
            again.history = [res.history, again.history].concat();
            again.iterations = again.history.len();
            return Ok(again);
        }
    }
    Ok(res)
}

/// Full cone realization: `σ₁` by shooting with `f̄ᵢ = 1`, then rescaling.
pub fn realize_cone(spec: &ProblemSpec, cone: &ConeSpec, cfg: &ShootConfig) -> Result<ShootResult> {
    if spec.d()[0] < 2 {
        return Err(Error::Precondition("cone realization needs d1 >= 2".into()));
    }
    spec.require_flat_links()?;
    if cone.sigma.len() != spec.r() || cone.sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Precondition("cone radii must be positive, one per factor".into()));
    }
    let fbar = vec![1.0; spec.r() - 1];
    let base = solve_for_sigma1(spec, &fbar, cone.sigma[0], cfg)?;
    if !base.converged() {
        return Ok(base);
    }
    rescale_for_ricci_flat(spec, &base, &cone.sigma[1..], cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub c: f64,
    pub sigma: Vec<f64>,
    pub sigma_ci: Vec<f64>,
    pub scal_limit: Option<f64>,
    pub cone_scal_coeff: Option<f64>,
    pub flags: Vec<String>,
    pub error: Option<String>,
}

/// `n` points log-spaced from `c_from` to `c_to`, both negative.
pub fn log_grid(c_from: f64, c_to: f64, n: usize) -> Vec<f64> {
    let (a, b) = ((-c_from).ln(), (-c_to).ln());
    (0..n)
        .map(|k| {
            let f = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
            -(a + f * (b - a)).exp()
        })
        .collect()
}

/// One row per grid value, in grid order; failures are recorded per row.
pub fn sweep(spec: &ProblemSpec, fbar: &[f64], grid: &[f64], cfg: &RunConfig, workers: usize) -> Result<Vec<SweepRow>> {
    if let Some(c) = grid.iter().find(|c| !(**c < 0.0)) {
        return Err(Error::Precondition(format!("sweep values must be negative, got {c}")));
    }
    let row = |&c: &f64| match run_trajectory(spec, &SeedParams::new(fbar.to_vec(), c), cfg)
        .and_then(|rec| extract_sigma(&rec).map(|rep| (rec, rep)))
    {
        Ok((rec, rep)) => {
            let mut flags: Vec<String> = rec.flags.iter().map(|f| f.kind.as_str().to_string()).collect();
            if rep.low_confidence {
                flags.push("low-confidence".into());
            }
            SweepRow {
                c,
                sigma: rep.sigma.clone(),
                sigma_ci: rep.sigma_ci.clone(),
                scal_limit: rep.scal_limit.as_ref().map(|f| f.value),
                cone_scal_coeff: Some(rep.cone_scal_coeff),
                flags,
                error: None,
            }
        }
        Err(e) => SweepRow {
            c,
            sigma: Vec::new(),
            sigma_ci: Vec::new(),
            scal_limit: None,
            cone_scal_coeff: None,
            flags: Vec::new(),
            error: Some(e.to_string()),
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(|| grid.par_iter().map(row).collect()))
}
