//! Run configuration: defaults, then the manifest's `config` object, then a
//! `--config` JSON file, then command-line flags. Later sources win.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use compot::allocator::Grouping;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    #[default]
    Svd,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    #[default]
    None,
    Svd,
    V2Alloc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingArg {
    Global,
    PerProjectionType,
    Custom,
}

impl From<GroupingArg> for Grouping {
    fn from(g: GroupingArg) -> Self {
        match g {
            GroupingArg::Global => Grouping::Global,
            GroupingArg::PerProjectionType => Grouping::PerProjectionType,
            GroupingArg::Custom => Grouping::Custom,
        }
    }
}

/// Every tunable, all optional. Used for flags and for JSON sources.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Target compression ratio for dynamic allocation.
    #[arg(long)]
    pub cr: Option<f64>,
    /// Uniform per-layer ratio; disables dynamic allocation.
    #[arg(long)]
    pub static_cr: Option<f64>,
    /// Dictionary size over per-column sparsity, k/s.
    #[arg(long)]
    pub ks_ratio: Option<f64>,
    /// Alternating-minimization iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, value_enum)]
    pub init: Option<InitKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop once the relative loss change falls to this value.
    #[arg(long)]
    pub early_stop_tol: Option<f64>,
    #[arg(long)]
    pub cr_min: Option<f64>,
    #[arg(long)]
    pub cr_max: Option<f64>,
    #[arg(long, value_enum)]
    pub grouping: Option<GroupingArg>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Worker threads for layer-level parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl Settings {
    /// `other`'s set fields override ours.
    pub fn merge(self, other: Settings) -> Settings {
        Settings {
            cr: other.cr.or(self.cr),
            static_cr: other.static_cr.or(self.static_cr),
            ks_ratio: other.ks_ratio.or(self.ks_ratio),
            iters: other.iters.or(self.iters),
            init: other.init.or(self.init),
            seed: other.seed.or(self.seed),
            early_stop_tol: other.early_stop_tol.or(self.early_stop_tol),
            cr_min: other.cr_min.or(self.cr_min),
            cr_max: other.cr_max.or(self.cr_max),
            grouping: other.grouping.or(self.grouping),
            baseline: other.baseline.or(self.baseline),
            jobs: other.jobs.or(self.jobs),
        }
    }

    pub fn from_json(value: &serde_json::Value, source: &str) -> Result<Settings, CliError> {
        serde_json::from_value(value.clone()).map_err(|e| CliError::Config(format!("{source}: {e}")))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON file with any of the tuning keys; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: Settings,
}

/// Fully resolved settings, echoed into plans and reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub cr: Option<f64>,
    pub static_cr: Option<f64>,
    pub ks_ratio: f64,
    pub iters: usize,
    pub init: InitKind,
    pub seed: u64,
    pub early_stop_tol: Option<f64>,
    pub cr_min: f64,
    pub cr_max: f64,
    pub grouping: GroupingArg,
    pub baseline: Baseline,
    /// Not echoed: results are independent of the thread count.
    #[serde(skip)]
    pub jobs: usize,
}

impl RunConfig {
    pub fn resolve(manifest_config: &serde_json::Value, args: &ConfigArgs) -> Result<Self, CliError> {
        let mut s = match manifest_config {
            serde_json::Value::Null => Settings::default(),
            v => Settings::from_json(v, "manifest config")?,
        };
        if let Some(path) = &args.config {
            let bytes = std::fs::read(path).map_err(compot::Error::from)?;
            let v: serde_json::Value = serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            s = s.merge(Settings::from_json(&v, &path.display().to_string())?);
        }
        let s = s.merge(args.flags.clone());
        let cfg = RunConfig {
            cr: s.cr,
            static_cr: s.static_cr,
            ks_ratio: s.ks_ratio.unwrap_or(2.0),
            iters: s.iters.unwrap_or(20),
            init: s.init.unwrap_or_default(),
            seed: s.seed.unwrap_or(0),
            early_stop_tol: s.early_stop_tol,
            cr_min: s.cr_min.unwrap_or(0.0),
            cr_max: s.cr_max.unwrap_or(0.9),
            grouping: s.grouping.unwrap_or(GroupingArg::Global),
            baseline: s.baseline.unwrap_or_default(),
            jobs: s.jobs.unwrap_or(1),
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.ks_ratio.is_finite() && self.ks_ratio > 1.0) {
            return bad(format!("ks_ratio {} must be > 1", self.ks_ratio));
        }
        if self.iters == 0 {
            return bad("iters must be positive".into());
        }
        if self.jobs == 0 {
            return bad("jobs must be positive".into());
        }
        if let Some(t) = self.early_stop_tol {
            if t.is_nan() || t < 0.0 {
                return bad(format!("early_stop_tol {t} must be non-negative"));
            }
        }
        for (name, v) in [("cr", self.cr), ("static_cr", self.static_cr)] {
            if let Some(v) = v {
                if !(v > 0.0 && v < 1.0) {
                    return bad(format!("{name} {v} must be in (0, 1)"));
                }
            }
        }
        Ok(())
    }

    pub fn factorizer(&self) -> compot::factorizer::FactorizerConfig {
        compot::factorizer::FactorizerConfig {
            max_iterations: self.iters,
            early_stop: self.early_stop_tol,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_manifest() {
        let manifest = serde_json::json!({"iters": 5, "seed": 3, "ks_ratio": 3.0});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"iters": 7, "grouping": "per-projection-type"}"#).unwrap();
        let args = ConfigArgs {
            config: Some(path),
            flags: Settings {
                iters: Some(9),
                ..Default::default()
            },
        };
        let cfg = RunConfig::resolve(&manifest, &args).unwrap();
        assert_eq!(cfg.iters, 9);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.ks_ratio, 3.0);
        assert_eq!(cfg.grouping, GroupingArg::PerProjectionType);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::resolve(&serde_json::json!({"itres": 3}), &ConfigArgs::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
