//! Run configuration: a single JSON document validated against the shipped
//! schema (`hrt schema` prints it). Unknown keys are rejected; which keys
//! are required depends on the subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use hrt_core::sizecontrol::BootstrapVariant;
use hrt_core::{CovarianceModel, SearchParams, StatisticFamily, TestingProblem};

/// The machine-readable schema for this configuration.
pub const CONFIG_SCHEMA: &str = include_str!("../schema/config.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CritvalMethod {
    LineSearch,
    Quantile,
}

fn default_true() -> bool {
    true
}

fn default_model() -> CovarianceModel {
    CovarianceModel::HetFull
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Restriction {
    pub r_matrix: Vec<Vec<f64>>,
    pub r_vector: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// CSV file containing the design matrix X (numeric; an optional
    /// single header row is detected by a non-numeric first line).
    pub design_path: Option<PathBuf>,
    pub restriction: Option<Restriction>,
    /// One of UC, HC0..HC4, UCR, HC0R..HC4R.
    pub statistic: Option<String>,
    #[serde(default = "default_model")]
    pub model: CovarianceModel,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: SearchParams,
    pub output_dir: Option<PathBuf>,

    /// Critical value for `size` and `power`.
    pub critical_value: Option<f64>,
    /// Observed data vector for `pvalue` and single-dataset
    /// `bootstrap-eval` (CSV, one column).
    pub y_path: Option<PathBuf>,
    /// Covariance diagonal (normalized to unit trace) for `power` and
    /// null-rejection `bootstrap-eval`.
    pub sigma: Option<Vec<f64>>,
    #[serde(default)]
    pub sigma_label: Option<String>,

    /// Sample size for `hostile`.
    pub hostile_n: Option<usize>,
    pub restarts: Option<usize>,
    pub nm_max_iter: Option<usize>,

    pub bootstrap_variant: Option<BootstrapVariant>,
    pub critval_method: Option<CritvalMethod>,

    pub delta_max: Option<f64>,
    pub delta_points: Option<usize>,
    #[serde(default = "default_true")]
    pub include_oracle: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("config {} does not match the schema", path.display()))?;
        cfg.validate_common()?;
        Ok(cfg)
    }

    fn validate_common(&self) -> anyhow::Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            bail!("alpha must lie strictly between 0 and 1, got {}", self.alpha);
        }
        self.params
            .validate()
            .map_err(|e| anyhow::anyhow!("params: {e}"))?;
        if let Some(c) = self.critical_value {
            if !c.is_finite() {
                bail!("critical_value must be finite");
            }
        }
        if let Some(points) = self.delta_points {
            if points < 2 {
                bail!("delta_points must be at least 2");
            }
        }
        Ok(())
    }

    pub fn effective_seed(&self) -> u64 {
        match std::env::var("HRT_SEED") {
            Ok(v) => v.parse().unwrap_or(self.seed),
            Err(_) => self.seed,
        }
    }

    pub fn statistic_family(&self) -> anyhow::Result<StatisticFamily> {
        let name = self
            .statistic
            .as_deref()
            .ok_or_else(|| anyhow::anyhow!("config key 'statistic' is required"))?;
        name.parse::<StatisticFamily>()
            .map_err(|e| anyhow::anyhow!("{e}"))
    }

    /// Build the testing problem from the design CSV and the inline
    /// restriction.
    pub fn build_problem(&self) -> anyhow::Result<TestingProblem> {
        let design = self
            .design_path
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("config key 'design_path' is required"))?;
        let x = read_matrix_csv(design)?;
        let restriction = self
            .restriction
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("config key 'restriction' is required"))?;
        let q = restriction.r_matrix.len();
        if q == 0 {
            bail!("restriction.r_matrix must have at least one row");
        }
        let k = restriction.r_matrix[0].len();
        if restriction.r_matrix.iter().any(|row| row.len() != k) {
            bail!("restriction.r_matrix rows must have equal length");
        }
        let r_mat = DMatrix::from_fn(q, k, |i, j| restriction.r_matrix[i][j]);
        let r_vec = DVector::from_vec(restriction.r_vector.clone());
        TestingProblem::build(x, r_mat, r_vec).map_err(|e| anyhow::anyhow!("{e}"))
    }

    pub fn delta_grid(&self) -> Vec<f64> {
        let max = self.delta_max.unwrap_or(6.0);
        let points = self.delta_points.unwrap_or(61);
        (0..points)
            .map(|i| max * i as f64 / (points - 1) as f64)
            .collect()
    }

    pub fn output_dir(&self, cli_override: Option<&Path>) -> PathBuf {
        cli_override
            .map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

/// Read a numeric CSV matrix; a non-numeric first line is treated as a
/// header and skipped.
pub fn read_matrix_csv(path: &Path) -> anyhow::Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if idx == 0 => continue, // header line
            Err(e) => bail!("{}: row {}: {}", path.display(), idx + 1, e),
        }
    }
    if rows.is_empty() {
        bail!("{}: no numeric rows", path.display());
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        bail!("{}: ragged rows", path.display());
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Read a one-column numeric CSV vector (header detected as above).
pub fn read_vector_csv(path: &Path) -> anyhow::Result<DVector<f64>> {
    let m = read_matrix_csv(path)?;
    if m.ncols() != 1 {
        bail!("{}: expected a single column, got {}", path.display(), m.ncols());
    }
    Ok(m.column(0).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_keys() {
        let text = r#"{ "alpha": 0.05, "frobnicate": 1 }"#;
        assert!(serde_json::from_str::<RunConfig>(text).is_err());
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.alpha, 0.05);
        assert_eq!(cfg.seed, 0);
        assert!(matches!(cfg.model, CovarianceModel::HetFull));
        assert!(cfg.include_oracle);
    }

    #[test]
    fn schema_is_valid_json() {
        let v: serde_json::Value = serde_json::from_str(CONFIG_SCHEMA).unwrap();
        assert_eq!(v["title"], "hrt run configuration");
    }
}
