//! JSON run configuration.

use serde::{Deserialize, Serialize};
use soliton_core::analysis::RunConfig as CoreRunConfig;
use soliton_core::integrator::Method;
use soliton_core::model::{ProblemSpec, SeedParams};
use soliton_core::seeding::{validate_seed_regime, SeedOrder, SeedRegime};
use soliton_core::shooting::ShootConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub problem: ProblemBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<SeedBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetBlock>,
    #[serde(default)]
    pub integrator: IntegratorBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub d: Vec<u32>,
    /// Defaults to `(d₁ − 1, 0, …, 0)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedBlock {
    pub fbar: Vec<f64>,
    #[serde(rename = "C", alias = "c")]
    pub c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<f64>,
    /// Series order, 2 or 4.
    #[serde(default = "four")]
    pub order: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetBlock {
    pub sigma: Vec<f64>,
    #[serde(default = "shoot_tol")]
    pub tol: f64,
    #[serde(default = "shoot_evals")]
    pub max_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum MethodName {
    ExponentialRk4,
    DormandPrince54,
    ClassicRk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorBlock {
    pub method: MethodName,
    /// Fixed step for `classic-rk4`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub floor: f64,
    pub max_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_horizon: Option<f64>,
    /// Conservation monitor tolerance.
    pub ctol: f64,
}

impl Default for IntegratorBlock {
    fn default() -> Self {
        let d = CoreRunConfig::default();
        Self {
            method: MethodName::ExponentialRk4,
            step: None,
            rel_tol: d.integrator.rel_tol,
            abs_tol: d.integrator.abs_tol,
            floor: d.floor,
            max_steps: d.integrator.max_steps,
            s_horizon: None,
            t_horizon: None,
            ctol: d.ctol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    pub stride: usize,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: None, stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    /// Explicit grid; otherwise `points` log-spaced values from `from` to `to`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
}

fn one() -> f64 {
    1.0
}
fn four() -> u32 {
    4
}
fn shoot_tol() -> f64 {
    1e-4
}
fn shoot_evals() -> usize {
    60
}

/// Command-line overrides.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub floor: Option<f64>,
    pub tol: Option<f64>,
}

impl ConfigFile {
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| format!("config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        let spec = self.spec()?;
        match (&self.seed, &self.target) {
            (Some(_), Some(_)) => return Err("config: give either a seed block or a target block, not both".into()),
            (None, None) => return Err("config: a seed block or a target block is required".into()),
            _ => {}
        }
        if let Some(seed) = &self.seed {
            if seed.order != 2 && seed.order != 4 {
                return Err(format!("seed.order: must be 2 or 4, got {}", seed.order));
            }
            if let Some(t0) = seed.t0 {
                if !(t0 > 0.0 && t0.is_finite()) {
                    return Err(format!("seed.t0: must be positive, got {t0}"));
                }
            }
            if let SeedRegime::Rejected(why) = validate_seed_regime(&spec, &self.params()?) {
                return Err(format!("seed: {why}"));
            }
        }
        if let Some(t) = &self.target {
            if t.sigma.len() != spec.r() {
                return Err(format!("target.sigma: expected {} entries, got {}", spec.r(), t.sigma.len()));
            }
            if let Some(s) = t.sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
                return Err(format!("target.sigma: radii must be positive, got {s}"));
            }
            if !(t.tol > 0.0 && t.tol < 1.0) {
                return Err(format!("target.tol: must lie in (0, 1), got {}", t.tol));
            }
        }
        let ib = &self.integrator;
        if !(ib.floor > 0.0 && ib.floor < 1.0) {
            return Err(format!("integrator.floor: must lie in (0, 1), got {}", ib.floor));
        }
        if ib.method == MethodName::ClassicRk4 && !ib.step.is_some_and(|h| h > 0.0) {
            return Err("integrator.step: classic-rk4 needs a positive fixed step".into());
        }
        if !(ib.ctol > 0.0) {
            return Err(format!("integrator.ctol: must be positive, got {}", ib.ctol));
        }
        if self.output.stride == 0 {
            return Err("output.stride: must be at least 1".into());
        }
        self.run_config(Overrides::default())
            .integrator
            .validate()
            .map_err(|e| format!("integrator: {e}"))?;
        if let Some(sw) = &self.sweep {
            let g = sw.resolve()?;
            if let Some(c) = g.iter().find(|c| !(**c < 0.0)) {
                return Err(format!("sweep: grid values must be negative, got {c}"));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<ProblemSpec, String> {
        let p = &self.problem;
        let mu = match &p.mu {
            Some(m) => m.clone(),
            None => {
                let mut m = vec![0.0; p.d.len()];
                if let Some(&d1) = p.d.first() {
                    m[0] = d1 as f64 - 1.0;
                }
                m
            }
        };
        ProblemSpec::new(p.d.clone(), mu, p.eps).map_err(|e| format!("problem: {e}"))
    }

    pub fn params(&self) -> Result<SeedParams, String> {
        let s = self.seed.as_ref().ok_or("config: seed block required for this command")?;
        Ok(SeedParams::new(s.fbar.clone(), s.c))
    }

    pub fn run_config(&self, ov: Overrides) -> CoreRunConfig {
        let mut rc = CoreRunConfig::default();
        let ib = &self.integrator;
        rc.integrator.method = match ib.method {
            MethodName::ExponentialRk4 => Method::ExponentialRk4,
            MethodName::DormandPrince54 => Method::DormandPrince54,
            MethodName::ClassicRk4 => Method::ClassicRk4 { step: ib.step.unwrap_or(0.0) },
        };
        rc.integrator.rel_tol = ov.tol.unwrap_or(ib.rel_tol);
        rc.integrator.abs_tol = ib.abs_tol;
        rc.integrator.max_steps = ib.max_steps;
        rc.floor = ov.floor.unwrap_or(ib.floor);
        rc.s_horizon = ib.s_horizon.unwrap_or(f64::INFINITY);
        rc.t_horizon = ib.t_horizon;
        rc.ctol = ib.ctol;
        rc.stride = self.output.stride;
        if let Some(seed) = &self.seed {
            rc.t0 = seed.t0;
            rc.seed.order = if seed.order == 2 { SeedOrder::Two } else { SeedOrder::Four };
        }
        rc
    }

    pub fn shoot_config(&self, ov: Overrides) -> ShootConfig {
        let mut sc = ShootConfig::default();
        let verify = self.run_config(ov);
        sc.search.integrator.method = verify.integrator.method;
        sc.search.integrator.max_steps = verify.integrator.max_steps;
        sc.search.ctol = verify.ctol;
        sc.verify = verify;
        if let Some(t) = &self.target {
            sc.tol = t.tol;
            sc.max_evals = t.max_evals;
        }
        sc
    }
}

impl SweepBlock {
    pub fn resolve(&self) -> Result<Vec<f64>, String> {
        if let Some(g) = &self.grid {
            if g.is_empty() {
                return Err("sweep.grid: empty".into());
            }
            return Ok(g.clone());
        }
        match (self.from, self.to, self.points) {
            (Some(a), Some(b), Some(n)) if n > 0 => {
                if !(a < 0.0 && b < 0.0) {
                    return Err("sweep.from, sweep.to: must be negative".into());
                }
                Ok(soliton_core::shooting::log_grid(a, b, n))
            }
            _ => Err("sweep: give `grid` or all of `from`, `to`, `points`".into()),
        }
    }
}
