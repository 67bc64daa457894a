//! Run-log files: `<run_id>.curve.csv`, `<run_id>.meta.json` and, for timed
//! runs, `<run_id>.timing.csv`.
//!
//! Floats are written in Rust's shortest round-trip form and JSON objects
//! have sorted keys, so identical logs give identical bytes. Wall-clock
//! times live in their own file to keep the other two reproducible.

use std::fs;
use std::path::{Path, PathBuf};

use rlrs_core::metrics::{checkpoint_step, RunLog};
use rlrs_core::trainer::Divergence;
use serde_json::{json, Map, Value};

use crate::error::{LabError, Result};

/// Files written by [`export`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exported {
    pub curve: PathBuf,
    pub meta: PathBuf,
    pub timing: Option<PathBuf>,
}

pub fn curve_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}.curve.csv"))
}

pub fn meta_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}.meta.json"))
}

fn csv_err(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

/// Curve CSV: `percent, step, loss`, then `lr_<tag>` and `updnorm_<tag>`
/// per active tag. Partial logs give one row per recorded checkpoint.
pub fn curve_csv(log: &RunLog) -> std::io::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["percent".to_string(), "step".into(), "loss".into()];
    header.extend(log.lr.iter().map(|t| format!("lr_{}", t.tag)));
    header.extend(log.update_norm.iter().map(|t| format!("updnorm_{}", t.tag)));
    w.write_record(&header).map_err(csv_err)?;
    for (p, loss) in log.losses.iter().enumerate() {
        let mut row = vec![p.to_string(), checkpoint_step(p, log.total_steps).to_string(), loss.to_string()];
        for t in log.lr.iter().chain(&log.update_norm) {
            row.push(t.values.get(p).map_or_else(String::new, f64::to_string));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))
}

/// Metadata: run id, seeds, the full config echo and the final loss.
pub fn meta_json(log: &RunLog, divergence: Option<&Divergence>) -> Value {
    let config: Map<String, Value> = log.config.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
    let mut meta = json!({
        "run_id": log.run_id,
        "init_seed": log.init_seed,
        "data_seed": log.data_seed,
        "total_steps": log.total_steps,
        "checkpoints": log.losses.len(),
        "complete": log.is_complete(),
        "final_loss": log.losses.last().copied().filter(|_| log.is_complete()),
        "tags": log.tags().iter().map(|t| t.to_string()).collect::<Vec<_>>(),
        "config": config,
    });
    if let Some(d) = divergence {
        let norms: Map<String, Value> = d.last_update_norms.iter().map(|(t, n)| (t.to_string(), json!(n))).collect();
        meta["divergence"] = json!({ "step": d.step, "reason": d.reason, "last_update_norms": norms });
    }
    meta
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    text.push('\n');
    write(path, text.as_bytes())
}

/// Writes the run files of `log` into `dir`, creating it if needed.
pub fn export(log: &RunLog, dir: &Path, divergence: Option<&Divergence>) -> Result<Exported> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let curve = curve_path(dir, &log.run_id);
    write(&curve, &curve_csv(log).map_err(|e| LabError::io(&curve, e))?)?;
    let meta = meta_path(dir, &log.run_id);
    write_json(&meta, &meta_json(log, divergence))?;
    let timing = match &log.wall_clock {
        Some(times) => {
            let path = dir.join(format!("{}.timing.csv", log.run_id));
            let mut text = String::from("percent,step,seconds\n");
            for (p, t) in times.iter().enumerate() {
                text.push_str(&format!("{p},{},{t}\n", checkpoint_step(p, log.total_steps)));
            }
            write(&path, text.as_bytes())?;
            Some(path)
        }
        None => None,
    };
    Ok(Exported { curve, meta, timing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rlrs_core::metrics::{Trace, CHECKPOINTS};
    use rlrs_core::schedule::ModelKind;

    pub(crate) fn fake_log(kind: ModelKind) -> RunLog {
        let trace = |k: f64| {
            kind.components().iter().map(|&tag| Trace { tag, values: vec![k; CHECKPOINTS] }).collect::<Vec<_>>()
        };
        RunLog {
            run_id: "r".into(),
            config: vec![("model.d_model".into(), "8".into())],
            init_seed: 1,
            data_seed: 2,
            total_steps: 200,
            losses: (0..CHECKPOINTS).map(|p| 3.0 - p as f64 / 100.0).collect(),
            lr: trace(1e-3),
            update_norm: trace(0.5),
            wall_clock: None,
        }
    }

    #[test]
    fn header_arity_by_kind() {
        for (kind, n) in [(ModelKind::Dense, 4), (ModelKind::Moe, 5)] {
            let csv = String::from_utf8(curve_csv(&fake_log(kind)).unwrap()).unwrap();
            let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
            assert_eq!(header.iter().filter(|h| h.starts_with("lr_")).count(), n);
            assert_eq!(header.iter().filter(|h| h.starts_with("updnorm_")).count(), n);
            assert_eq!(csv.lines().count(), CHECKPOINTS + 1);
            assert!(csv.lines().nth(2).unwrap().starts_with("1,2,2.99,"));
        }
    }

    #[test]
    fn export_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let log = fake_log(ModelKind::Moe);
        let a = export(&log, dir.path(), None).unwrap();
        let (c1, m1) = (fs::read(&a.curve).unwrap(), fs::read(&a.meta).unwrap());
        export(&log, dir.path(), None).unwrap();
        assert_eq!(fs::read(&a.curve).unwrap(), c1);
        assert_eq!(fs::read(&a.meta).unwrap(), m1);
        let meta: Value = serde_json::from_slice(&m1).unwrap();
        assert_eq!(meta["config"]["model.d_model"], "8");
        assert_eq!(meta["final_loss"], 2.0);
    }
}
