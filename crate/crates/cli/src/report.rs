//! Report files: a JSON envelope with a metadata block (timestamps live
//! only there, so the `config`/`result` blocks are byte-identical across
//! reruns with the same seed) plus CSV emitters for power curves and
//! hostile designs.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

pub fn write_report<T: Serialize>(
    dir: &Path,
    name: &str,
    command: &str,
    config: &RunConfig,
    result: &T,
    warnings: &[String],
) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output dir {}", dir.display()))?;
    let envelope = json!({
        "meta": {
            "tool": "hrt",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "created_unix": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            "warnings": warnings,
        },
        "config": config,
        "result": result,
    });
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&envelope)?)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

/// One power curve as CSV: `test,sigma_label,delta,power`.
pub fn write_power_csv(
    dir: &Path,
    label: &str,
    curve: &hrt_core::power::PowerCurve,
) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("power_{}_{}.csv", curve.test, label));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["test", "sigma_label", "delta", "power"])?;
    for (d, p) in curve.delta_grid.iter().zip(&curve.power) {
        w.write_record([
            curve.test.as_str(),
            label,
            &format!("{d}"),
            &format!("{p}"),
        ])?;
    }
    w.flush()?;
    Ok(path)
}

/// The hostile design as CSV (intercept and searched regressor columns).
pub fn write_design_csv(dir: &Path, name: &str, x2: &nalgebra::DVector<f64>) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["intercept", "x"])?;
    for &v in x2.iter() {
        w.write_record(["1", &format!("{v}")])?;
    }
    w.flush()?;
    Ok(path)
}
