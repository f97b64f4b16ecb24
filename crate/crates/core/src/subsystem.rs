//! The planar flow on `𝓛 = 0` with all factors but the sphere frozen:
//! `X′ = X(dX² − 1) + (d−1)Y²`, `Y′ = XY(dX − 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{integrate, Controls, EventKind, FnSystem, IntegratorConfig, StopCondition};

pub fn rhs_sub(d: u32, x: f64, y: f64) -> (f64, f64) {
    let d = d as f64;
    (x * (d * x * x - 1.0) + (d - 1.0) * y * y, x * y * (d * x - 1.0))
}

pub fn jacobian_sub(d: u32, x: f64, y: f64) -> [[f64; 2]; 2] {
    let d = d as f64;
    [
        [3.0 * d * x * x - 1.0, 2.0 * (d - 1.0) * y],
        [y * (2.0 * d * x - 1.0), x * (d * x - 1.0)],
    ]
}

/// `2dX − d(d+1)X² − (d−1)dY²`.
pub fn rcal_sub(d: u32, x: f64, y: f64) -> f64 {
    let d = d as f64;
    2.0 * d * x - d * (d + 1.0) * x * x - (d - 1.0) * d * y * y
}

/// Eigen-data of the saddle at `(1/d, 1/d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Saddle {
    pub point: (f64, f64),
    pub unstable: f64,
    pub stable: f64,
    /// Unit unstable eigenvector pointing into the box.
    pub inward: (f64, f64),
}

/// Closed form: trace `3/d − 1`, determinant `−2(d−1)/d²`.
pub fn saddle(d: u32) -> Result<Saddle> {
    if d < 2 {
        return Err(Error::InvalidProblem(format!("subsystem needs d >= 2, got {d}")));
    }
    let df = d as f64;
    let tr = 3.0 / df - 1.0;
    let det = -2.0 * (df - 1.0) / (df * df);
    let disc = (tr * tr - 4.0 * det).sqrt();
    let unstable = 0.5 * (tr + disc);
    // Product of roots is det; avoids cancellation in tr − disc.
    let stable = det / unstable;
    // Second row of J − λ: (1/d) vx − λ vy = 0.
    let (vx, vy) = (unstable, 1.0 / df);
    let n = vx.hypot(vy);
    Ok(Saddle {
        point: (1.0 / df, 1.0 / df),
        unstable,
        stable,
        inward: (-vx / n, -vy / n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubSample {
    pub s: f64,
    pub x: f64,
    pub y: f64,
}

impl SubSample {
    /// `X/Y²`
    pub fn ratio(&self) -> f64 {
        self.x / (self.y * self.y)
    }

    /// `(X/Y² − (d−1))/Y²`
    pub fn correction(&self, d: u32) -> f64 {
        (self.ratio() - (d as f64 - 1.0)) / (self.y * self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTrajectory {
    pub d: u32,
    pub offset: f64,
    pub samples: Vec<SubSample>,
    /// `X/Y²` and its correction at the terminal sample, where `X` first
    /// drops to `x_stop`.
    pub ratio_end: f64,
    pub correction_end: f64,
    /// Extrapolations of the same quantities to `Y → 0` from a fit in `Y²`.
    pub ratio_limit: f64,
    pub correction_limit: f64,
    /// `Rcal_sub > 0` on every sample of the last decade in `s`.
    pub rcal_positive_tail: bool,
    pub monotone: bool,
}

pub const X_STOP: f64 = 1e-4;
pub const DEFAULT_OFFSET: f64 = 1e-8;

fn sub_config() -> IntegratorConfig {
    IntegratorConfig {
        rel_tol: 1e-13,
        abs_tol: 1e-300,
        max_steps: 2_000_000,
        ..IntegratorConfig::default()
    }
}

/// The trajectory leaving the saddle into `0 < X, Y < 1/d`, seeded at
/// distance `offset` along the inward unstable eigenvector and followed
/// until `X` drops to [`X_STOP`].
pub fn unstable_trajectory(d: u32, offset: f64) -> Result<SubTrajectory> {
    let sd = saddle(d)?;
    let df = d as f64;
    if !(offset > 0.0 && offset <= 1e-2 / df) {
        return Err(Error::Precondition(format!(
            "offset must lie in (0, {:e}], got {offset:e}",
            1e-2 / df
        )));
    }
    let x0 = sd.point.0 + offset * sd.inward.0;
    let y0 = sd.point.1 + offset * sd.inward.1;
    let sys = FnSystem::new(2, move |v: &[f64], dv: &mut [f64]| {
        let (a, b) = rhs_sub(d, v[0], v[1]);
        dv[0] = a;
        dv[1] = b;
    });
    let controls = Controls::every_step().with_stop(StopCondition::floor(0, X_STOP));
    let sol = integrate(&sys, 0.0, &[x0, y0], 1e9, &sub_config(), &controls)?;
    if sol.event.kind != EventKind::ComponentFloor {
        return Err(Error::Precondition(format!(
            "subsystem run ended with {} before X reached {X_STOP:e}",
            sol.event.kind.as_str()
        )));
    }
    let samples: Vec<SubSample> = sol
        .samples
        .iter()
        .map(|p| SubSample { s: p.x, x: p.y[0], y: p.y[1] })
        .collect();
    let upper = 1.0 / df;
    if let Some(k) = samples.iter().position(|p| !(p.x > 0.0 && p.y > 0.0 && p.x < upper && p.y < upper)) {
        return Err(Error::Precondition(format!(
            "offset {offset:e} leaves the box at sample {k}"
        )));
    }
    let monotone = samples.windows(2).all(|w| w[1].x < w[0].x && w[1].y < w[0].y);
    let last = samples.last().unwrap();
    let ratio_end = last.ratio();
    let correction_end = last.correction(d);

    // Fit in Y² over the tail below X = 10 X_STOP.
    let tail: Vec<&SubSample> = samples.iter().filter(|p| p.x < 10.0 * X_STOP).collect();
    let xs: Vec<f64> = tail.iter().map(|p| p.y * p.y).collect();
    let (ratio_limit, correction_limit) = {
        let r: Vec<f64> = tail.iter().map(|p| p.ratio()).collect();
        let c: Vec<f64> = tail.iter().map(|p| p.correction(d)).collect();
        match (crate::analysis::polyfit(&xs, &r, 2), crate::analysis::polyfit(&xs, &c, 1)) {
            (Some((a, _)), Some((b, _))) => (a[0], b[0]),
            _ => (ratio_end, correction_end),
        }
    };
    let s_end = last.s;
    let rcal_positive_tail = samples
        .iter()
        .filter(|p| p.s >= 0.1 * s_end)
        .all(|p| rcal_sub(d, p.x, p.y) > 0.0);
    Ok(SubTrajectory {
        d,
        offset,
        samples,
        ratio_end,
        correction_end,
        ratio_limit,
        correction_limit,
        rcal_positive_tail,
        monotone,
    })
}

/// Largest change in the terminal and extrapolated limits when the seeding
/// offset is halved.
pub fn offset_halving_change(d: u32, offset: f64) -> Result<f64> {
    let a = unstable_trajectory(d, offset)?;
    let b = unstable_trajectory(d, 0.5 * offset)?;
    Ok([
        (a.ratio_end - b.ratio_end).abs(),
        (a.correction_end - b.correction_end).abs(),
        (a.ratio_limit - b.ratio_limit).abs(),
        (a.correction_limit - b.correction_limit).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxReport {
    pub contained: bool,
    pub first_exit: Option<usize>,
    pub stationary: bool,
    pub decayed: bool,
    pub final_state: (f64, f64),
}

/// Follows a state of the closed box `[0, 1/d]²` to `s = horizon`.
pub fn box_preservation_check(d: u32, state0: (f64, f64), horizon: f64) -> Result<BoxReport> {
    let upper = 1.0 / d as f64;
    let (x0, y0) = state0;
    if !(0.0..=upper).contains(&x0) || !(0.0..=upper).contains(&y0) {
        return Err(Error::Precondition(format!(
            "state ({x0}, {y0}) lies outside the box [0, {upper}]^2"
        )));
    }
    let (dx, dy) = rhs_sub(d, x0, y0);
    if dx.abs() < 1e-14 && dy.abs() < 1e-14 {
        return Ok(BoxReport {
            contained: true,
            first_exit: None,
            stationary: true,
            decayed: x0 == 0.0 && y0 == 0.0,
            final_state: state0,
        });
    }
    let sys = FnSystem::new(2, move |v: &[f64], dv: &mut [f64]| {
        let (a, b) = rhs_sub(d, v[0], v[1]);
        dv[0] = a;
        dv[1] = b;
    });
    let sol = integrate(&sys, 0.0, &[x0, y0], horizon, &sub_config(), &Controls::every_step())?;
    let first_exit = sol
        .samples
        .iter()
        .skip(1)
        .position(|p| !(p.y[0] > 0.0 && p.y[1] >= 0.0 && p.y[0] < upper && p.y[1] < upper))
        .map(|k| k + 1);
    let last = sol.last();
    let final_state = (last.y[0], last.y[1]);
    Ok(BoxReport {
        contained: first_exit.is_none(),
        first_exit,
        stationary: false,
        decayed: final_state.0.abs() < 1e-2 * upper && final_state.1.abs() < 0.2 * upper,
        final_state,
    })
}
