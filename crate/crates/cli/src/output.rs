//! Run directories: CSV tables, JSON summaries and the digest manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use soliton_core::analysis::{AsymptoticReport, TrajectoryRecord};
use soliton_core::shooting::{BracketEntry, SweepRow};
use soliton_core::subsystem::{rcal_sub, SubTrajectory};

pub const SCHEMA_VERSION: u32 = 1;

/// 17 significant digits.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NaN".into(), num)
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Collects the files of one run directory for the manifest.
pub struct RunDir {
    pub path: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self, String> {
        fs::create_dir_all(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), String> {
        let p = self.path.join(name);
        fs::write(&p, contents).map_err(|e| format!("{}: {e}", p.display()))?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), String> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
        s.push('\n');
        self.write(name, &s)
    }

    pub fn finish(mut self, command: &str, config: Value, started: f64, exit_code: i32, status: &str) -> Result<(), String> {
        let mut inventory = Vec::new();
        for name in &self.files {
            let bytes = fs::read(self.path.join(name)).map_err(|e| e.to_string())?;
            inventory.push(json!({
                "name": name,
                "bytes": bytes.len(),
                "sha256": format!("{:x}", Sha256::digest(&bytes)),
            }));
        }
        let manifest = json!({
            "artifact": "soliton",
            "version": env!("CARGO_PKG_VERSION"),
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "config": config,
            "started_unix": started,
            "finished_unix": now_unix(),
            "files": inventory,
            "status": { "exit_code": exit_code, "message": status },
        });
        self.files.clear();
        let mut s = serde_json::to_string_pretty(&manifest).map_err(|e| e.to_string())?;
        s.push('\n');
        let p = self.path.join("manifest.json");
        fs::write(&p, s).map_err(|e| format!("{}: {e}", p.display()))
    }
}

pub fn digest_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn trajectory_csv(record: &TrajectoryRecord) -> String {
    let r = record.spec.r();
    let mut out = String::from("s,t,L");
    for i in 1..=r {
        write!(out, ",X{i}").unwrap();
    }
    for i in 1..=r {
        write!(out, ",Y{i}").unwrap();
    }
    out.push_str(",u,S1,S2,Rcal,Z,conservation_residual\n");
    for s in &record.samples {
        let st = &s.state;
        let mut row = vec![num(s.s), num(st.t), num(st.l)];
        row.extend(st.x.iter().map(|&v| num(v)));
        row.extend(st.y.iter().map(|&v| num(v)));
        row.push(num(st.u));
        row.push(num(s.diag.s1));
        row.push(num(s.diag.s2));
        row.push(num(s.diag.rcal));
        row.push(opt(s.diag.z));
        row.push(num(s.diag.conservation_residual));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn summary(record: &TrajectoryRecord, report: Option<&AsymptoticReport>) -> Value {
    let spec = &record.spec;
    let flags: Vec<Value> = record
        .flags
        .iter()
        .map(|f| {
            json!({
                "kind": f.kind.as_str(),
                "first_sample": f.first_sample,
                "count": f.count,
                "worst": f.worst,
                "message": f.message,
            })
        })
        .collect();
    let mut v = json!({
        "schema_version": SCHEMA_VERSION,
        "classification": record.classification,
        "d": spec.d(),
        "mu": spec.mu(),
        "eps": spec.eps(),
        "C": record.params.c,
        "fbar": record.params.fbar,
        "seed": {
            "t0": record.seed.t0,
            "order": record.seed.order,
            "est_error": record.seed.est_error,
        },
        "terminal_event": {
            "kind": record.event.kind.as_str(),
            "s": record.event.x,
            "index": record.event.index,
            "value": record.event.value,
        },
        "samples": record.samples.len(),
        "max_conservation": record.max_conservation,
        "stats": {
            "accepted": record.stats.accepted,
            "rejected": record.stats.rejected,
            "rhs_evals": record.stats.rhs_evals,
        },
        "flags": flags,
    });
    if let Some(rep) = report {
        let o = v.as_object_mut().unwrap();
        o.insert("sigma".into(), json!(rep.sigma));
        o.insert("sigma_uncertainty".into(), json!(rep.sigma_ci));
        o.insert(
            "sigma_divergent".into(),
            json!(rep.sigma_detail.iter().map(|d| d.divergent).collect::<Vec<_>>()),
        );
        o.insert("refined".into(), json!(rep.refined.iter().map(|f| f.value).collect::<Vec<_>>()));
        o.insert(
            "refined_uncertainty".into(),
            json!(rep.refined.iter().map(|f| f.uncertainty).collect::<Vec<_>>()),
        );
        o.insert("refined_predicted".into(), json!(rep.refined_predicted));
        o.insert("scal_limit".into(), json!(rep.scal_limit.as_ref().map(|f| f.value)));
        o.insert(
            "scal_limit_uncertainty".into(),
            json!(rep.scal_limit.as_ref().map(|f| f.uncertainty)),
        );
        o.insert("scal_predicted".into(), json!(rep.scal_predicted(spec)));
        o.insert("cone_scal_coeff".into(), json!(rep.cone_scal_coeff));
        o.insert("z_limit".into(), json!(rep.z_check.as_ref().map(|f| f.value)));
        o.insert("low_confidence".into(), json!(rep.low_confidence));
        o.insert("notes".into(), json!(rep.notes));
    }
    v
}

pub fn bracket_csv(history: &[BracketEntry]) -> String {
    let mut out = String::from("C,sigma1,uncertainty,phase,low_confidence,trapped_above,error\n");
    for e in history {
        let phase = serde_json::to_value(e.phase).unwrap();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            num(e.c),
            num(e.sigma1),
            num(e.uncertainty),
            phase.as_str().unwrap_or(""),
            e.low_confidence,
            e.trapped_above,
            csv_text(e.error.as_deref().unwrap_or("")),
        )
        .unwrap();
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow], r: usize) -> String {
    let mut out = String::from("C");
    for i in 1..=r {
        write!(out, ",sigma{i}").unwrap();
    }
    for i in 1..=r {
        write!(out, ",sigma{i}_uncertainty").unwrap();
    }
    out.push_str(",scal_limit,cone_scal_coeff,flags,error\n");
    for row in rows {
        let mut cells = vec![num(row.c)];
        for i in 0..r {
            cells.push(opt(row.sigma.get(i).copied()));
        }
        for i in 0..r {
            cells.push(opt(row.sigma_ci.get(i).copied()));
        }
        cells.push(opt(row.scal_limit));
        cells.push(opt(row.cone_scal_coeff));
        cells.push(csv_text(&row.flags.join(";")));
        cells.push(csv_text(row.error.as_deref().unwrap_or("")));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn subsystem_csv(t: &SubTrajectory) -> String {
    let mut out = String::from("s,X,Y,X_over_Y2,Rcal_sub\n");
    for p in &t.samples {
        writeln!(
            out,
            "{},{},{},{},{}",
            num(p.s),
            num(p.x),
            num(p.y),
            num(p.ratio()),
            num(rcal_sub(t.d, p.x, p.y))
        )
        .unwrap();
    }
    out
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
