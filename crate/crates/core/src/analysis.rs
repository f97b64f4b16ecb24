//! Full trajectories from the singular orbit, invariant monitoring along the
//! flow, and extraction of the asymptotic cone data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{
    integrate, Controls, Event, EventKind, IntegratorConfig, Method, OdeSystem, Stats, StopCondition,
};
use crate::model::{
    diagnostics_unchecked, rhs_s_flat, Diagnostics, Layout, ProblemSpec, SState, SeedParams,
};
use crate::seeding::{default_t0, taylor_seed_with, validate_seed_regime, SeedOptions, SeedRegime, SeedResult};

/// The s-system as an [`OdeSystem`]. The `−Xᵢ` relaxation is exposed as the
/// diagonal linear part for the exponential integrator. In Einstein mode each
/// accepted state is projected back onto `S₁ = S₂ = 0`.
pub struct SFlow<'a> {
    spec: &'a ProblemSpec,
    einstein: bool,
}

impl<'a> SFlow<'a> {
    pub fn new(spec: &'a ProblemSpec) -> Self {
        Self { spec, einstein: false }
    }

    pub fn einstein(spec: &'a ProblemSpec) -> Self {
        Self { spec, einstein: true }
    }
}

impl OdeSystem for SFlow<'_> {
    fn dim(&self) -> usize {
        self.spec.layout().dim()
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        rhs_s_flat(self.spec, y, dy);
    }

    fn linear_diagonal(&self, lam: &mut [f64]) {
        lam.fill(0.0);
        let layout = self.spec.layout();
        for i in 0..layout.r {
            lam[layout.x(i)] = -1.0;
        }
    }

    fn project(&self, y: &mut [f64]) {
        if !self.einstein {
            return;
        }
        let spec = self.spec;
        let layout = spec.layout();
        let r = layout.r;
        let s2: f64 = (0..r).map(|i| spec.di(i) * y[layout.x(i)]).sum::<f64>() - 1.0;
        for i in 0..r {
            y[layout.x(i)] -= s2 / spec.nf();
        }
        let l2 = {
            let mut q = 1.0;
            for i in 0..r {
                let (x, yy) = (y[layout.x(i)], y[layout.y(i)]);
                q -= spec.di(i) * (x * x + spec.mu()[i] * yy * yy);
            }
            q / ((spec.nf() - 1.0) * spec.half_eps())
        };
        if l2 > 0.0 {
            y[Layout::L] = l2.sqrt();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Regular,
    Einstein,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::Regular => "regular",
            Classification::Einstein => "einstein",
        }
    }
}

const U_ABS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub integrator: IntegratorConfig,
    /// Terminal 𝓛 level for regular runs.
    pub floor: f64,
    /// Seed time; `None` uses [`default_t0`].
    pub t0: Option<f64>,
    pub seed: SeedOptions,
    pub s_horizon: f64,
    pub t_horizon: Option<f64>,
    /// Conservation monitor: `|S₁ − (C+εu)𝓛²| ≤ ctol (1+|C|) 𝓛²`.
    pub ctol: f64,
    /// Einstein runs stop once every `|Xᵢ − 1/n|` is below this.
    pub einstein_tol: f64,
    /// Relative slack in the monotonicity monitor for `Yᵢ/𝓛`.
    pub monotone_slack: f64,
    pub stride: usize,
    /// Output points in `s`, sampled exactly.
    pub grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            integrator: IntegratorConfig {
                rel_tol: 1e-12,
                abs_tol: 1e-300,
                max_step: f64::INFINITY,
                min_step: 1e-12,
                max_steps: 1_000_000,
                method: Method::ExponentialRk4,
                initial_step: Some(1e-4),
                abs_tol_overrides: Vec::new(),
            },
            floor: 1e-6,
            t0: None,
            seed: SeedOptions::default(),
            s_horizon: f64::INFINITY,
            t_horizon: None,
            ctol: 1e-6,
            einstein_tol: 1e-8,
            monotone_slack: 1e-10,
            stride: 1,
            grid: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSample {
    pub s: f64,
    pub state: SState,
    pub diag: Diagnostics,
    pub on_grid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlagKind {
    Conservation,
    S1Sign,
    S2Sign,
    YOverLIncrease,
    ClassificationFlip,
    Termination,
    LowConfidence,
}

impl FlagKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FlagKind::Conservation => "conservation",
            FlagKind::S1Sign => "s1-sign",
            FlagKind::S2Sign => "s2-sign",
            FlagKind::YOverLIncrease => "y-over-l-increase",
            FlagKind::ClassificationFlip => "classification-flip",
            FlagKind::Termination => "termination",
            FlagKind::LowConfidence => "low-confidence",
        }
    }
}

/// One monitored invariant that failed; reported at its first and worst sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub kind: FlagKind,
    pub first_sample: usize,
    pub count: usize,
    pub worst: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub spec: ProblemSpec,
    pub params: SeedParams,
    pub seed: SeedResult,
    pub samples: Vec<RecordSample>,
    pub event: Event,
    pub classification: Classification,
    pub flags: Vec<Flag>,
    pub stats: Stats,
    /// Largest `|S₁ − (C+εu)𝓛²| / 𝓛²` over the samples.
    pub max_conservation: f64,
}

impl TrajectoryRecord {
    pub fn last(&self) -> &RecordSample {
        self.samples.last().expect("record has samples")
    }

    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }
}

pub fn run_trajectory(spec: &ProblemSpec, params: &SeedParams, cfg: &RunConfig) -> Result<TrajectoryRecord> {
    let classification = match validate_seed_regime(spec, params) {
        SeedRegime::Regular => Classification::Regular,
        SeedRegime::Einstein => Classification::Einstein,
        SeedRegime::Rejected(why) => return Err(Error::InvalidSeed(why)),
    };
    if !(cfg.floor > 0.0) {
        return Err(Error::Config(format!("floor {} must be positive", cfg.floor)));
    }
    let t0 = cfg.t0.unwrap_or_else(|| default_t0(spec, params));
    let seed = taylor_seed_with(spec, params, t0, &cfg.seed)?;
    let layout = spec.layout();
    let einstein = classification == Classification::Einstein;
    let flow = if einstein { SFlow::einstein(spec) } else { SFlow::new(spec) };

    let mut controls = Controls::default()
        .with_stride(cfg.stride)
        .with_grid(cfg.grid.clone());
    if !einstein {
        controls = controls.with_stop(StopCondition::floor(Layout::L, cfg.floor));
    }
    if let Some(th) = cfg.t_horizon {
        controls = controls.with_stop(StopCondition::ceiling(layout.t(), th, EventKind::THorizon));
    }
    let target = 1.0 / spec.nf();
    let tol = cfg.einstein_tol;
    let converged = move |_s: f64, y: &[f64]| (0..layout.r).all(|i| (y[layout.x(i)] - target).abs() < tol);
    if einstein {
        controls = controls.with_converged(&converged);
    }

    // u starts at zero and, for C = 0, stays there; relative control alone
    // would chase round-off in it.
    let mut icfg = cfg.integrator.clone();
    if !icfg.abs_tol_overrides.iter().any(|&(i, _)| i == layout.u()) {
        icfg.abs_tol_overrides.push((layout.u(), U_ABS_TOL));
    }
    let sol = integrate(&flow, 0.0, &seed.sstate.to_flat(), cfg.s_horizon, &icfg, &controls)?;

    let samples: Vec<RecordSample> = sol
        .samples
        .iter()
        .map(|smp| {
            let state = SState::from_flat(layout, &smp.y);
            let diag = diagnostics_unchecked(spec, params.c, &state);
            RecordSample {
                s: smp.x,
                state,
                diag,
                on_grid: smp.on_grid,
            }
        })
        .collect();

    let mut record = TrajectoryRecord {
        spec: spec.clone(),
        params: params.clone(),
        seed,
        samples,
        event: sol.event,
        classification,
        flags: Vec::new(),
        stats: sol.stats,
        max_conservation: 0.0,
    };
    monitor(&mut record, cfg);
    Ok(record)
}

struct FlagAcc {
    kind: FlagKind,
    first: Option<usize>,
    count: usize,
    worst: f64,
}

impl FlagAcc {
    fn new(kind: FlagKind) -> Self {
        Self {
            kind,
            first: None,
            count: 0,
            worst: 0.0,
        }
    }

    fn hit(&mut self, k: usize, v: f64) {
        self.first.get_or_insert(k);
        self.count += 1;
        if v.abs() > self.worst.abs() {
            self.worst = v;
        }
    }

    fn finish(self, what: &str, out: &mut Vec<Flag>) {
        if let Some(first) = self.first {
            out.push(Flag {
                kind: self.kind,
                first_sample: first,
                count: self.count,
                worst: self.worst,
                message: format!("{what}: {} samples, first at #{first}, worst {:e}", self.count, self.worst),
            });
        }
    }
}

fn monitor(record: &mut TrajectoryRecord, cfg: &RunConfig) {
    let c = record.params.c;
    let bound = cfg.ctol * (1.0 + c.abs());
    let regular = record.classification == Classification::Regular;
    let r = record.spec.r();

    let mut cons = FlagAcc::new(FlagKind::Conservation);
    let mut s1 = FlagAcc::new(FlagKind::S1Sign);
    let mut s2 = FlagAcc::new(FlagKind::S2Sign);
    let mut mono = FlagAcc::new(FlagKind::YOverLIncrease);
    let mut flip = FlagAcc::new(FlagKind::ClassificationFlip);
    let mut max_cons: f64 = 0.0;
    let first_sign = record.samples.get(1).map(|s| s.diag.s1 < 0.0);

    for (k, smp) in record.samples.iter().enumerate() {
        if let Some(rel) = smp.diag.conservation_relative {
            max_cons = max_cons.max(rel);
            if rel > bound {
                cons.hit(k, rel);
            }
        }
        if regular {
            if !(smp.diag.s1 < 0.0) {
                s1.hit(k, smp.diag.s1);
            }
            if !(smp.diag.s2 < 0.0) {
                s2.hit(k, smp.diag.s2);
            }
            if k > 0 {
                if let Some(neg) = first_sign {
                    if (smp.diag.s1 < 0.0) != neg {
                        flip.hit(k, smp.diag.s1);
                    }
                }
                let prev = &record.samples[k - 1].state;
                for i in 0..r {
                    let q0 = prev.y[i] / prev.l;
                    let q1 = smp.state.y[i] / smp.state.l;
                    if q1 > q0 * (1.0 + cfg.monotone_slack) {
                        mono.hit(k, q1 / q0 - 1.0);
                    }
                }
            }
        }
    }
    record.max_conservation = max_cons;
    let mut flags = Vec::new();
    cons.finish("conservation residual above tolerance", &mut flags);
    s1.finish("S1 not negative", &mut flags);
    s2.finish("S2 not negative", &mut flags);
    mono.finish("Y/L increased", &mut flags);
    flip.finish("sign of S1 changed", &mut flags);

    let expected = if regular {
        EventKind::ComponentFloor
    } else {
        EventKind::Converged
    };
    if record.event.kind != expected {
        flags.push(Flag {
            kind: FlagKind::Termination,
            first_sample: record.samples.len() - 1,
            count: 1,
            worst: record.event.x,
            message: format!(
                "run ended with {} instead of {}",
                record.event.kind.as_str(),
                expected.as_str()
            ),
        });
    }
    record.flags = flags;
}


/// Least-squares polynomial fit `y ≈ Σ cₖ xᵏ`, `k ≤ deg`, by normal
/// equations on a rescaled abscissa. Returns coefficients in the original
/// variable and the RMS residual.
pub fn polyfit(xs: &[f64], ys: &[f64], deg: usize) -> Option<(Vec<f64>, f64)> {
    let m = deg + 1;
    if xs.len() < m || xs.len() != ys.len() {
        return None;
    }
    let scale = xs.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    if !(scale > 0.0) {
        return None;
    }
    let mut a = vec![vec![0.0; m + 1]; m];
    for (&x, &y) in xs.iter().zip(ys) {
        let u = x / scale;
        let mut pw = vec![1.0; m];
        for k in 1..m {
            pw[k] = pw[k - 1] * u;
        }
        for i in 0..m {
            for j in 0..m {
                a[i][j] += pw[i] * pw[j];
            }
            a[i][m] += pw[i] * y;
        }
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        a.swap(col, piv);
        if a[col][col].abs() < 1e-300 {
            return None;
        }
        for row in col + 1..m {
            let f = a[row][col] / a[col][col];
            for k in col..=m {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut c = vec![0.0; m];
    for row in (0..m).rev() {
        let mut acc = a[row][m];
        for k in row + 1..m {
            acc -= a[row][k] * c[k];
        }
        c[row] = acc / a[row][row];
    }
    let mut ss = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let u = x / scale;
        let mut v = 0.0;
        for k in (0..m).rev() {
            v = v * u + c[k];
        }
        ss += (y - v) * (y - v);
    }
    let rms = (ss / xs.len() as f64).sqrt();
    for (k, ck) in c.iter_mut().enumerate() {
        *ck /= scale.powi(k as i32);
    }
    Some((c, rms))
}

/// Limit of a sampled quantity extrapolated by a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitFit {
    pub value: f64,
    pub uncertainty: f64,
    pub residual_rms: f64,
    pub points: usize,
    /// Abscissa range used, in the fit variable.
    pub window: (f64, f64),
}

impl LimitFit {
    pub fn relative_uncertainty(&self) -> f64 {
        self.uncertainty / self.value.abs()
    }
}

/// σᵢ from the tail of `Yᵢ/Xᵢ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub value: f64,
    pub uncertainty: f64,
    /// Last sampled `Yᵢ/Xᵢ`.
    pub raw: f64,
    /// `a` from `Yᵢ/Xᵢ ≈ a exp(b/t²)` over the last decade of `t`.
    pub fit: f64,
    /// Two-point extrapolation assuming `Yᵢ/Xᵢ = σ + k/t²`.
    pub richardson: f64,
    pub residual_rms: f64,
    /// `Xᵢ/Yᵢ` grows without bound (Einstein trajectories); σᵢ is then 0.
    pub divergent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub sigma: Vec<f64>,
    pub sigma_ci: Vec<f64>,
    pub sigma_detail: Vec<SigmaEstimate>,
    /// Limits of `(Xᵢ − (ε/2)𝓛²)/𝓛⁴`; empty for Einstein records.
    pub refined: Vec<LimitFit>,
    /// `(ε/2)²(μᵢσᵢ² + 1)` from the extracted σᵢ.
    pub refined_predicted: Vec<f64>,
    /// Limit of `R/𝓛² = 𝓡/𝓛⁴`.
    pub scal_limit: Option<LimitFit>,
    /// `Σ dᵢμᵢσᵢ² − n(n−1)`.
    pub cone_scal_coeff: f64,
    /// Limit of `(Z − 1)/X₁`, expected to be −1.
    pub z_check: Option<LimitFit>,
    pub low_confidence: bool,
    pub notes: Vec<String>,
}

impl AsymptoticReport {
    pub fn scal_predicted(&self, spec: &ProblemSpec) -> f64 {
        spec.half_eps() * spec.half_eps() * self.cone_scal_coeff
    }
}

/// Fit windows and confidence thresholds for [`extract_sigma_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    /// Upper end of the widest window for the refined and scalar-curvature
    /// fits, in the scale-free variable `√(ε/2) 𝓛`.
    pub window_top: f64,
    /// Number of one-decade windows tried, each a factor `√10` below the
    /// previous; the fit with the smallest uncertainty is kept.
    pub window_steps: usize,
    /// Relative σ uncertainty above which the report is low-confidence.
    pub max_sigma_rel_uncertainty: f64,
    /// Relative uncertainty of the window fits above which the report is
    /// low-confidence.
    pub max_limit_rel_uncertainty: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            window_top: 1e-2 * std::f64::consts::FRAC_1_SQRT_2,
            window_steps: 7,
            max_sigma_rel_uncertainty: 1e-6,
            max_limit_rel_uncertainty: 1e-4,
        }
    }
}

pub fn extract_sigma(record: &TrajectoryRecord) -> Result<AsymptoticReport> {
    extract_sigma_with(record, &ExtractConfig::default())
}

pub fn cone_scal_coeff(spec: &ProblemSpec, sigma: &[f64]) -> f64 {
    let n = spec.nf();
    let s: f64 = (0..spec.r())
        .map(|i| spec.di(i) * spec.mu()[i] * sigma[i] * sigma[i])
        .sum();
    s - n * (n - 1.0)
}

fn sigma_from_tail(samples: &[RecordSample], i: usize) -> Option<SigmaEstimate> {
    let last = samples.last()?;
    let t_end = last.state.t;
    let tail: Vec<&RecordSample> = samples
        .iter()
        .filter(|s| s.state.t >= 0.1 * t_end && s.state.x[i] > 0.0 && s.state.y[i] > 0.0)
        .collect();
    if tail.len() < 3 {
        return None;
    }
    let ratio = |s: &RecordSample| s.state.y[i] / s.state.x[i];
    let raw = ratio(last);
    let xs: Vec<f64> = tail.iter().map(|s| 1.0 / (s.state.t * s.state.t)).collect();
    let ys: Vec<f64> = tail.iter().map(|s| ratio(s).ln()).collect();
    let (c, rms) = polyfit(&xs, &ys, 1)?;
    let fit = c[0].exp();
    // Richardson between the end and the sample nearest t_end/2.
    let half = tail
        .iter()
        .min_by(|a, b| (a.state.t - 0.5 * t_end).abs().total_cmp(&(b.state.t - 0.5 * t_end).abs()))?;
    let (t1, v1) = (t_end, raw);
    let (t2, v2) = (half.state.t, ratio(half));
    let richardson = if t1 > t2 {
        (t1 * t1 * v1 - t2 * t2 * v2) / (t1 * t1 - t2 * t2)
    } else {
        raw
    };
    let spread = (raw - fit).abs().max((fit - richardson).abs()).max((raw - richardson).abs());
    Some(SigmaEstimate {
        value: fit,
        uncertainty: spread + rms * fit,
        raw,
        fit,
        richardson,
        residual_rms: rms,
        divergent: false,
    })
}

/// Fit `q(𝓛) ≈ q∞ + a𝓛² (+ b𝓛⁴)` on one window; the uncertainty is twice the
/// spread between the two model orders plus the residual.
fn fit_window(pts: &[(f64, f64, f64)], window: (f64, f64)) -> Option<LimitFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts
        .iter()
        .filter(|p| p.0 >= window.0 && p.0 <= window.1)
        .map(|p| (p.1, p.2))
        .unzip();
    if xs.len() < 6 {
        return None;
    }
    let (c1, _) = polyfit(&xs, &ys, 1)?;
    let (c2, rms2) = polyfit(&xs, &ys, 2)?;
    Some(LimitFit {
        value: c2[0],
        uncertainty: 2.0 * (c2[0] - c1[0]).abs() + rms2,
        residual_rms: rms2,
        points: xs.len(),
        window,
    })
}

/// Tries the window ladder of `cfg` on the decaying tail (𝓛 is also small
/// just after the seed) and keeps the least uncertain fit.
fn window_limit<F: Fn(&RecordSample) -> f64>(
    samples: &[RecordSample],
    spec: &ProblemSpec,
    cfg: &ExtractConfig,
    q: F,
) -> Option<LimitFit> {
    let k = spec.half_eps().sqrt();
    let peak = samples
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.state.l.total_cmp(&b.1.state.l))
        .map_or(0, |(k, _)| k);
    let pts: Vec<(f64, f64, f64)> = samples[peak..]
        .iter()
        .map(|s| (k * s.state.l, s.state.l * s.state.l, q(s)))
        .filter(|p| p.2.is_finite())
        .collect();
    let mut best: Option<LimitFit> = None;
    let mut hi = cfg.window_top;
    for _ in 0..cfg.window_steps {
        if let Some(f) = fit_window(&pts, (0.1 * hi, hi)) {
            if best.as_ref().map_or(true, |b| f.uncertainty < b.uncertainty) {
                best = Some(f);
            }
        }
        hi /= 10f64.sqrt();
    }
    best
}

pub fn extract_sigma_with(record: &TrajectoryRecord, cfg: &ExtractConfig) -> Result<AsymptoticReport> {
    let spec = &record.spec;
    let r = spec.r();
    let mut notes = Vec::new();

    if record.classification == Classification::Einstein {
        let last = record.last();
        let detail: Vec<SigmaEstimate> = (0..r)
            .map(|i| SigmaEstimate {
                value: 0.0,
                uncertainty: 0.0,
                raw: last.state.y[i] / last.state.x[i],
                fit: 0.0,
                richardson: 0.0,
                residual_rms: 0.0,
                divergent: true,
            })
            .collect();
        notes.push("Einstein trajectory: X/Y diverges, sigma reported as 0".into());
        return Ok(AsymptoticReport {
            sigma: vec![0.0; r],
            sigma_ci: vec![0.0; r],
            sigma_detail: detail,
            refined: Vec::new(),
            refined_predicted: Vec::new(),
            scal_limit: None,
            cone_scal_coeff: cone_scal_coeff(spec, &vec![0.0; r]),
            z_check: None,
            low_confidence: false,
            notes,
        });
    }
    spec.require_conical()?;
    if record.event.kind != EventKind::ComponentFloor {
        return Err(Error::Precondition(format!(
            "sigma extraction needs a run to the L-floor, this one ended with {}",
            record.event.kind.as_str()
        )));
    }

    let mut low = false;
    let mut detail = Vec::with_capacity(r);
    for i in 0..r {
        match sigma_from_tail(&record.samples, i) {
            Some(est) => {
                if !(est.value > 0.0 && est.value.is_finite())
                    || est.uncertainty > cfg.max_sigma_rel_uncertainty * est.value
                {
                    low = true;
                    notes.push(format!(
                        "sigma{} = {:e} has relative uncertainty {:e}",
                        i + 1,
                        est.value,
                        est.uncertainty / est.value
                    ));
                }
                detail.push(est);
            }
            None => {
                return Err(Error::Precondition(format!(
                    "not enough tail samples to fit sigma{}",
                    i + 1
                )))
            }
        }
    }
    let sigma: Vec<f64> = detail.iter().map(|d| d.value).collect();
    let sigma_ci: Vec<f64> = detail.iter().map(|d| d.uncertainty).collect();
    let he = spec.half_eps();

    let mut refined = Vec::with_capacity(r);
    for i in 0..r {
        let fit = window_limit(&record.samples, spec, cfg, |s| {
            let l2 = s.state.l * s.state.l;
            (s.state.x[i] - he * l2) / (l2 * l2)
        });
        match fit {
            Some(f) => refined.push(f),
            None => {
                low = true;
                notes.push(format!("refined limit {}: too few samples in the fit window", i + 1));
            }
        }
    }
    let refined_predicted = (0..r)
        .map(|i| he * he * (spec.mu()[i] * sigma[i] * sigma[i] + 1.0))
        .collect();
    let scal_limit = window_limit(&record.samples, spec, cfg, |s| {
        let l2 = s.state.l * s.state.l;
        s.diag.rcal / (l2 * l2)
    });
    let z_check = window_limit(&record.samples, spec, cfg, |s| match s.diag.z {
        Some(z) => (z - 1.0) / s.state.x[0],
        None => f64::NAN,
    });
    for (name, f) in [("scalar curvature", &scal_limit), ("Z", &z_check)] {
        match f {
            Some(f) if f.relative_uncertainty() > cfg.max_limit_rel_uncertainty => {
                low = true;
                notes.push(format!("{name} limit has relative uncertainty {:e}", f.relative_uncertainty()));
            }
            None => {
                low = true;
                notes.push(format!("{name} limit: too few samples in the fit window"));
            }
            _ => {}
        }
    }
    for (i, f) in refined.iter().enumerate() {
        if f.relative_uncertainty() > cfg.max_limit_rel_uncertainty {
            low = true;
            notes.push(format!(
                "refined limit {} has relative uncertainty {:e}",
                i + 1,
                f.relative_uncertainty()
            ));
        }
    }

    Ok(AsymptoticReport {
        cone_scal_coeff: cone_scal_coeff(spec, &sigma),
        sigma,
        sigma_ci,
        sigma_detail: detail,
        refined,
        refined_predicted,
        scal_limit,
        z_check,
        low_confidence: low,
        notes,
    })
}

/// `R(0⁺)` from the samples just after the seed: fit `R = 𝓡/𝓛²` against `t²`.
pub fn scalar_curvature_at_origin(record: &TrajectoryRecord) -> Option<LimitFit> {
    let t0 = record.seed.t0;
    let pts: Vec<(f64, f64)> = record
        .samples
        .iter()
        .filter(|s| s.state.t <= 30.0 * t0 && s.state.l > 0.0)
        .map(|s| (s.state.t * s.state.t, s.diag.rcal / (s.state.l * s.state.l)))
        .collect();
    if pts.len() < 6 {
        return None;
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (c1, _) = polyfit(&xs, &ys, 1)?;
    let (c2, rms) = polyfit(&xs, &ys, 2)?;
    Some(LimitFit {
        value: c2[0],
        uncertainty: (c2[0] - c1[0]).abs() + rms,
        residual_rms: rms,
        points: pts.len(),
        window: (xs[0].sqrt(), xs[xs.len() - 1].sqrt()),
    })
}

/// Terminal checks of `(ε/2)𝓛t → 1`, `Xᵢ/𝓛² → ε/2` and `Yᵢ/𝓛 → 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpanderCheck {
    pub lt_deviation: f64,
    /// `|Xᵢ/𝓛² − ε/2| · 2/ε` at the last sample.
    pub x_deviation: Vec<f64>,
    pub y_over_l_seed: Vec<f64>,
    pub y_over_l_final: Vec<f64>,
    pub y_over_l_monotone: bool,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn expander_asymptotics_check(record: &TrajectoryRecord, tolerance: f64) -> Result<ExpanderCheck> {
    if record.classification != Classification::Regular {
        return Err(Error::Precondition("expander asymptotics need a regular record".into()));
    }
    let spec = &record.spec;
    let he = spec.half_eps();
    let first = &record.samples[0].state;
    let last = &record.last().state;
    let l2 = last.l * last.l;
    let lt_deviation = (he * last.l * last.t - 1.0).abs();
    let x_deviation: Vec<f64> = last.x.iter().map(|&x| (x / l2 - he).abs() / he).collect();
    let y_over_l_seed: Vec<f64> = first.y.iter().map(|&y| y / first.l).collect();
    let y_over_l_final: Vec<f64> = last.y.iter().map(|&y| y / last.l).collect();
    let y_over_l_monotone = !record.flags.iter().any(|f| f.kind == FlagKind::YOverLIncrease);
    let pass = lt_deviation < tolerance
        && x_deviation.iter().all(|&d| d < tolerance)
        && y_over_l_seed
            .iter()
            .zip(&y_over_l_final)
            .all(|(a, b)| *b * 10.0 <= *a)
        && y_over_l_monotone;
    Ok(ExpanderCheck {
        lt_deviation,
        x_deviation,
        y_over_l_seed,
        y_over_l_final,
        y_over_l_monotone,
        tolerance,
        pass,
    })
}

/// Per-sample trace of `X₁ > Xᵢ`, `X₁ > Σ dⱼXⱼ²`, `X₁ > (ε/2)𝓛²`, and of the
/// signs `u < 0`, `u̇ < 0` for regular records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreservedReport {
    /// `None` unless `μᵢ = 0` for all `i ≥ 2`.
    pub trace: Option<Vec<[bool; 3]>>,
    pub first_violation: [Option<usize>; 3],
    /// First sample after the seed with `u ≥ 0` or `u̇ ≥ 0` (regular records).
    pub sign_violation: Option<usize>,
    pub all_hold: bool,
}

pub fn preserved_inequalities_monitor(record: &TrajectoryRecord) -> PreservedReport {
    let spec = &record.spec;
    let mut first_violation = [None; 3];
    let trace = spec.has_flat_links().then(|| {
        record
            .samples
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let flags = [s.diag.x1_above_xi, s.diag.x1_above_sum_sq, s.diag.x1_above_potential];
                for j in 0..3 {
                    if !flags[j] && first_violation[j].is_none() {
                        first_violation[j] = Some(k);
                    }
                }
                flags
            })
            .collect::<Vec<_>>()
    });
    let sign_violation = if record.classification == Classification::Regular {
        record.samples.iter().position(|s| {
            // u̇ = S₂/𝓛
            let udot = s.diag.s2 / s.state.l;
            s.state.t > 0.0 && !(s.state.u < 0.0 && udot < 0.0)
        })
    } else {
        None
    };
    let all_hold = first_violation.iter().all(|v| v.is_none()) && sign_violation.is_none();
    PreservedReport {
        trace,
        first_violation,
        sign_violation,
        all_hold,
    }
}

/// Result of integrating `f′ = −c₁(s) f + c₂(s)` to a long horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub expected: f64,
    pub achieved: f64,
    pub error: f64,
}

/// Checks that `f′ = −c₁f + c₂` tends to `c₂*/c₁*` when `cₖ(s) → cₖ*`.
pub fn comparison_lemma_harness<C1, C2>(c1: C1, c2: C2, c1_star: f64, c2_star: f64, f0: f64) -> Result<LemmaCheck>
where
    C1: Fn(f64) -> f64,
    C2: Fn(f64) -> f64,
{
    if !(c1_star > 0.0 && c2_star > 0.0) {
        return Err(Error::Precondition("limits c1*, c2* must be positive".into()));
    }
    let sys = crate::integrator::FnSystem::new(2, |y: &[f64], dy: &mut [f64]| {
        let s = y[1];
        dy[0] = -c1(s) * y[0] + c2(s);
        dy[1] = 1.0;
    });
    let cfg = IntegratorConfig {
        rel_tol: 1e-12,
        abs_tol: 1e-14,
        ..IntegratorConfig::default()
    };
    // Double the horizon until the value settles; the approach can be
    // algebraic when cₖ converge slowly.
    let mut s = 0.0;
    let mut y = vec![f0, 0.0];
    let mut horizon = 60.0 / c1_star;
    let mut prev = f64::NAN;
    while horizon < 1e8 / c1_star {
        let sol = integrate(&sys, s, &y, horizon, &cfg, &Controls::default())?;
        y = sol.last().y.clone();
        s = horizon;
        if (y[0] - prev).abs() <= 1e-13 * (1.0 + y[0].abs()) {
            break;
        }
        prev = y[0];
        horizon *= 2.0;
    }
    let achieved = y[0];
    let expected = c2_star / c1_star;
    Ok(LemmaCheck {
        expected,
        achieved,
        error: (achieved - expected).abs(),
    })
}

/// A state near the origin with `Xᵢ` on the leading-order centre manifold
/// `Xᵢ = μᵢYᵢ² + (ε/2)𝓛²`.
pub fn centre_manifold_state(spec: &ProblemSpec, l: f64, y: &[f64]) -> SState {
    let he = spec.half_eps();
    let x = y.iter().zip(spec.mu()).map(|(&yi, &m)| m * yi * yi + he * l * l).collect();
    SState {
        l,
        x,
        y: y.to_vec(),
        t: 0.0,
        u: 0.0,
        w: 1.0,
    }
}

/// Forward run from a small state tracking `V = Σ Yᵢ² + (ε/2)𝓛²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttractionReport {
    pub v_initial: f64,
    pub v_final: f64,
    pub norm_initial: f64,
    pub norm_final: f64,
    pub samples: usize,
    /// First sample at which `V` failed to decrease.
    pub first_increase: Option<usize>,
    pub pass: bool,
}

fn lyapunov(spec: &ProblemSpec, v: &[f64]) -> f64 {
    let layout = spec.layout();
    let l = v[Layout::L];
    (0..layout.r).map(|i| v[layout.y(i)].powi(2)).sum::<f64>() + spec.half_eps() * l * l
}

fn lxy_norm(spec: &ProblemSpec, v: &[f64]) -> f64 {
    let layout = spec.layout();
    (0..=2 * layout.r).map(|k| v[k] * v[k]).sum::<f64>().sqrt()
}

/// Integrates to `s = horizon`; passes when `V` strictly decreases at every
/// sample and the `(𝓛, X, Y)` norm drops by at least a factor of ten.
pub fn origin_attraction_check(spec: &ProblemSpec, state0: &SState, horizon: f64) -> Result<AttractionReport> {
    if spec.mu().iter().any(|&m| m < 0.0) {
        return Err(Error::Precondition("origin attraction needs all mu >= 0".into()));
    }
    let y0 = state0.to_flat();
    let cfg = RunConfig::default().integrator;
    let sol = integrate(&SFlow::new(spec), 0.0, &y0, horizon, &cfg, &Controls::every_step())?;
    let v: Vec<f64> = sol.samples.iter().map(|s| lyapunov(spec, &s.y)).collect();
    let first_increase = v.windows(2).position(|w| !(w[1] < w[0])).map(|k| k + 1);
    let norm_initial = lxy_norm(spec, &y0);
    let norm_final = lxy_norm(spec, &sol.last().y);
    Ok(AttractionReport {
        v_initial: v[0],
        v_final: *v.last().unwrap(),
        norm_initial,
        norm_final,
        samples: v.len(),
        first_increase,
        pass: first_increase.is_none() && norm_final * 10.0 <= norm_initial,
    })
}
