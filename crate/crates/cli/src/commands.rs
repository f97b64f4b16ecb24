use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use soliton_core::analysis::{
    expander_asymptotics_check, extract_sigma, preserved_inequalities_monitor, run_trajectory,
    scalar_curvature_at_origin, Classification, FlagKind, TrajectoryRecord,
};
use soliton_core::model::{derivative_identities_check, ProblemSpec, SState};
use soliton_core::shooting::{realize_cone, sweep, ConeSpec};
use soliton_core::subsystem::{offset_halving_change, unstable_trajectory};

use crate::config::{ConfigFile, Overrides};
use crate::output::{self, RunDir};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FLAGGED: i32 = 2;
pub const EXIT_SHOOTING: i32 = 3;

pub struct Common {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub workers: usize,
    pub overrides: Overrides,
}

impl Common {
    fn load(&self) -> Result<ConfigFile, String> {
        let path = self.config.as_ref().ok_or("--config PATH is required for this command")?;
        ConfigFile::load(path)
    }

    /// `--out`, else the config's output directory, else a directory named
    /// after the command and config digest under `$SOLITON_OUT_DIR`
    /// (default `soliton-runs`).
    fn out_dir(&self, command: &str, cfg: Option<&ConfigFile>, key: &Value) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        if let Some(d) = cfg.and_then(|c| c.output.dir.as_ref()) {
            return PathBuf::from(d);
        }
        let root = std::env::var_os("SOLITON_OUT_DIR").map_or_else(|| PathBuf::from("soliton-runs"), PathBuf::from);
        let digest = output::digest_hex(key.to_string().as_bytes());
        root.join(format!("{command}-{}", &digest[..12]))
    }
}

fn echo(cfg: &ConfigFile, ov: Overrides) -> Value {
    json!({
        "file": cfg,
        "overrides": { "floor": ov.floor, "tol": ov.tol },
    })
}

fn record_exit(record: &TrajectoryRecord, low_confidence: bool) -> (i32, String) {
    let mut kinds: Vec<&str> = record.flags.iter().map(|f| f.kind.as_str()).collect();
    if low_confidence {
        kinds.push("low-confidence extraction");
    }
    if kinds.is_empty() {
        (EXIT_OK, "accepted".into())
    } else {
        (EXIT_FLAGGED, format!("flagged: {}", kinds.join(", ")))
    }
}

pub fn integrate(c: &Common) -> Result<i32, String> {
    let started = output::now_unix();
    let cfg = c.load()?;
    let spec = cfg.spec()?;
    let params = cfg.params()?;
    let rc = cfg.run_config(c.overrides);
    let record = run_trajectory(&spec, &params, &rc).map_err(|e| e.to_string())?;
    let report = if record.classification == Classification::Einstein
        || record.event.kind == soliton_core::integrator::EventKind::ComponentFloor
    {
        Some(extract_sigma(&record).map_err(|e| e.to_string())?)
    } else {
        None
    };
    let low = report.as_ref().is_some_and(|r| r.low_confidence);
    let (code, status) = record_exit(&record, low);
    let echo = echo(&cfg, c.overrides);
    let mut dir = RunDir::create(&c.out_dir("integrate", Some(&cfg), &echo))?;
    dir.write("trajectory.csv", &output::trajectory_csv(&record))?;
    let mut summary = output::summary(&record, report.as_ref());
    if let Some(r0) = scalar_curvature_at_origin(&record) {
        summary["scal_at_origin"] = json!({ "value": r0.value, "uncertainty": r0.uncertainty });
    }
    dir.write_json("summary.json", &summary)?;
    let path = dir.path.clone();
    dir.finish("integrate", echo, started, code, &status)?;
    println!("{}: {status}", path.display());
    Ok(code)
}

pub fn shoot(c: &Common) -> Result<i32, String> {
    let started = output::now_unix();
    let cfg = c.load()?;
    let spec = cfg.spec()?;
    let target = cfg.target.as_ref().ok_or("config: shoot needs a target block")?;
    let cone = ConeSpec::new(&spec, target.sigma.clone()).map_err(|e| format!("target: {e}"))?;
    let sc = cfg.shoot_config(c.overrides);
    let res = realize_cone(&spec, &cone, &sc).map_err(|e| e.to_string())?;
    let echo = echo(&cfg, c.overrides);
    let mut dir = RunDir::create(&c.out_dir("shoot", Some(&cfg), &echo))?;
    dir.write("bracket.csv", &output::bracket_csv(&res.history))?;
    let mut summary = json!({
        "schema_version": output::SCHEMA_VERSION,
        "status": res.status,
        "target_sigma": cone.sigma,
        "target_cone_scal_coeff": cone.cone_scal_coeff,
        "iterations": res.iterations,
        "rescale": res.rescale,
        "C": res.params.c,
        "fbar": res.params.fbar,
        "notes": res.notes,
    });
    let (code, status) = if res.converged() {
        let record = run_trajectory(&spec, &res.params, &sc.verify).map_err(|e| e.to_string())?;
        let report = extract_sigma(&record).map_err(|e| e.to_string())?;
        dir.write("trajectory.csv", &output::trajectory_csv(&record))?;
        summary["verification"] = output::summary(&record, Some(&report));
        summary["rcal_positive"] = json!(record.samples.iter().skip(1).all(|s| s.diag.rcal > 0.0));
        record_exit(&record, report.low_confidence)
    } else {
        (EXIT_SHOOTING, format!("shooting failed: {:?}", res.status))
    };
    dir.write_json("summary.json", &summary)?;
    let path = dir.path.clone();
    dir.finish("shoot", echo, started, code, &status)?;
    println!("{}: {status}", path.display());
    Ok(code)
}

pub fn sweep_cmd(c: &Common) -> Result<i32, String> {
    let started = output::now_unix();
    let cfg = c.load()?;
    let spec = cfg.spec()?;
    let params = cfg.params()?;
    let grid = cfg.sweep.as_ref().ok_or("config: sweep needs a sweep block")?.resolve()?;
    let rc = cfg.run_config(c.overrides);
    let rows = sweep(&spec, &params.fbar, &grid, &rc, c.workers).map_err(|e| e.to_string())?;
    let echo = echo(&cfg, c.overrides);
    let mut dir = RunDir::create(&c.out_dir("sweep", Some(&cfg), &echo))?;
    dir.write("sweep.csv", &output::sweep_csv(&rows, spec.r()))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let flagged = rows.iter().filter(|r| !r.flags.is_empty()).count();
    dir.write_json(
        "summary.json",
        &json!({
            "schema_version": output::SCHEMA_VERSION,
            "rows": rows.len(),
            "failed": failed,
            "flagged": flagged,
            "fbar": params.fbar,
        }),
    )?;
    let code = if failed + flagged == 0 { EXIT_OK } else { EXIT_FLAGGED };
    let status = format!("{} rows, {failed} failed, {flagged} flagged", rows.len());
    let path = dir.path.clone();
    dir.finish("sweep", echo, started, code, &status)?;
    println!("{}: {status}", path.display());
    Ok(code)
}

pub fn subsystem_cmd(c: &Common, d: u32, offset: f64) -> Result<i32, String> {
    let started = output::now_unix();
    let t = unstable_trajectory(d, offset).map_err(|e| e.to_string())?;
    let halving = offset_halving_change(d, offset).map_err(|e| e.to_string())?;
    let echo = json!({ "d": d, "offset": offset });
    let mut dir = RunDir::create(&c.out_dir("subsystem", None, &echo))?;
    dir.write("trajectory.csv", &output::subsystem_csv(&t))?;
    let df = d as f64;
    let ok_ratio = (t.ratio_end - (df - 1.0)).abs() < 1e-3;
    let ok_corr = (t.correction_end - 2.0 * (df - 1.0).powi(2)).abs() < 1e-2;
    dir.write_json(
        "summary.json",
        &json!({
            "schema_version": output::SCHEMA_VERSION,
            "d": d,
            "offset": offset,
            "samples": t.samples.len(),
            "ratio_end": t.ratio_end,
            "correction_end": t.correction_end,
            "ratio_limit": t.ratio_limit,
            "correction_limit": t.correction_limit,
            "expected_ratio": df - 1.0,
            "expected_correction": 2.0 * (df - 1.0).powi(2),
            "offset_halving_change": halving,
            "rcal_positive_tail": t.rcal_positive_tail,
            "monotone": t.monotone,
        }),
    )?;
    let pass = ok_ratio && ok_corr && halving < 1e-6 && t.rcal_positive_tail;
    let (code, status) = if pass { (EXIT_OK, "accepted".to_string()) } else { (EXIT_FLAGGED, "subsystem limits outside tolerance".into()) };
    let path = dir.path.clone();
    dir.finish("subsystem", echo, started, code, &status)?;
    println!("{}: {status}", path.display());
    Ok(code)
}

struct Check {
    name: &'static str,
    pass: bool,
    value: f64,
    tolerance: f64,
}

fn random_state(rng: &mut ChaCha8Rng, spec: &ProblemSpec) -> SState {
    let r = spec.r();
    SState {
        l: rng.gen_range(0.0..2.0),
        x: (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        y: (0..r).map(|_| rng.gen_range(0.0..2.0)).collect(),
        t: rng.gen_range(0.0..5.0),
        u: rng.gen_range(-5.0..0.0),
        w: rng.gen_range(0.5..2.0),
    }
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

pub fn verify(c: &Common) -> Result<i32, String> {
    let cfg = c.load()?;
    let spec = cfg.spec()?;
    let params = cfg.params()?;
    let rc = cfg.run_config(c.overrides);
    let mut checks = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0_f64;
    for _ in 0..2000 {
        let st = random_state(&mut rng, &spec);
        let norm: f64 = (st.l * st.l + st.x.iter().chain(&st.y).map(|v| v * v).sum::<f64>()).sqrt();
        let res = derivative_identities_check(&spec, &st).map_err(|e| e.to_string())?;
        worst = worst.max(res.max() / (1.0 + norm.powi(4)));
    }
    checks.push(Check { name: "derivative identities", pass: worst <= 1e-12, value: worst, tolerance: 1e-12 });

    let record = run_trajectory(&spec, &params, &rc).map_err(|e| e.to_string())?;
    let ctol = rc.ctol * (1.0 + params.c.abs());
    checks.push(Check {
        name: "conservation",
        pass: record.max_conservation <= ctol,
        value: record.max_conservation,
        tolerance: ctol,
    });
    let n = spec.nf();
    let he = spec.half_eps();
    if let Some(r0) = scalar_curvature_at_origin(&record) {
        let expect = -params.c - (n + 1.0) * he;
        checks.push(Check {
            name: "R(0+)",
            pass: relative(r0.value, expect) <= 1e-4,
            value: relative(r0.value, expect),
            tolerance: 1e-4,
        });
    }
    let pres = preserved_inequalities_monitor(&record);
    if pres.trace.is_some() {
        let ok = pres.first_violation.iter().all(|v| v.is_none());
        checks.push(Check { name: "preserved inequalities", pass: ok, value: if ok { 0.0 } else { 1.0 }, tolerance: 0.0 });
    }
    match record.classification {
        Classification::Einstein => {
            let last = &record.last().state;
            let dev = last
                .x
                .iter()
                .map(|x| (x - 1.0 / n).abs())
                .fold((he * last.l * last.l - 1.0 / n).abs(), f64::max);
            checks.push(Check { name: "Einstein limit", pass: dev < 1e-6, value: dev, tolerance: 1e-6 });
        }
        Classification::Regular => {
            let sign_ok = pres.sign_violation.is_none()
                && !record
                    .flags
                    .iter()
                    .any(|f| matches!(f.kind, FlagKind::S1Sign | FlagKind::S2Sign | FlagKind::ClassificationFlip));
            checks.push(Check { name: "regular signs", pass: sign_ok, value: if sign_ok { 0.0 } else { 1.0 }, tolerance: 0.0 });
            match expander_asymptotics_check(&record, 1e-3) {
                Ok(e) => {
                    let v = e.x_deviation.iter().fold(e.lt_deviation, |a, &b| a.max(b));
                    checks.push(Check { name: "expander asymptotics", pass: e.pass, value: v, tolerance: 1e-3 });
                }
                Err(_) => checks.push(Check { name: "expander asymptotics", pass: false, value: f64::NAN, tolerance: 1e-3 }),
            }
            match extract_sigma(&record) {
                Ok(rep) => {
                    let mut worst = 0.0_f64;
                    for (f, p) in rep.refined.iter().zip(&rep.refined_predicted) {
                        worst = worst.max(relative(f.value, *p));
                    }
                    if rep.refined.len() != spec.r() {
                        worst = f64::NAN;
                    }
                    checks.push(Check { name: "refined asymptotics", pass: worst <= 1e-3, value: worst, tolerance: 1e-3 });
                    let sv = rep
                        .scal_limit
                        .as_ref()
                        .map_or(f64::NAN, |f| relative(f.value, rep.scal_predicted(&spec)));
                    checks.push(Check { name: "scalar curvature at infinity", pass: sv <= 1e-3, value: sv, tolerance: 1e-3 });
                }
                Err(_) => {
                    checks.push(Check { name: "refined asymptotics", pass: false, value: f64::NAN, tolerance: 1e-3 });
                }
            }
        }
    }

    println!("{:<30} {:<6} {:>12} {:>12}", "check", "status", "value", "tolerance");
    for ch in &checks {
        println!(
            "{:<30} {:<6} {:>12.3e} {:>12.3e}",
            ch.name,
            if ch.pass { "pass" } else { "FAIL" },
            ch.value,
            ch.tolerance
        );
    }
    if let Some(out) = &c.out {
        let started = output::now_unix();
        let echo = echo(&cfg, c.overrides);
        let mut dir = RunDir::create(out)?;
        let rows: Vec<Value> = checks
            .iter()
            .map(|ch| json!({ "check": ch.name, "pass": ch.pass, "value": ch.value, "tolerance": ch.tolerance }))
            .collect();
        dir.write_json("verify.json", &rows)?;
        let code = if checks.iter().all(|c| c.pass) { EXIT_OK } else { EXIT_FLAGGED };
        dir.finish("verify", echo, started, code, "")?;
    }
    Ok(if checks.iter().all(|c| c.pass) { EXIT_OK } else { EXIT_FLAGGED })
}
