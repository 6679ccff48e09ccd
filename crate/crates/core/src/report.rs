//! Per-layer and model-wide quality and storage metrics.

use serde::{Deserialize, Serialize};

use crate::artifact::LayerArtifact;
use crate::error::{Error, Result};
use crate::factorizer::{FactorizationTrace, StopReason};
use crate::gram::CholeskyFactor;
use crate::linalg;
use crate::packing::cr_from_bits;
use crate::tensorio::WeightMatrix;

pub const REPORT_SCHEMA: &str = "compot-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Compot,
    Svd,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub name: String,
    pub kind: LayerKind,
    pub m: usize,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r: Option<usize>,
    /// `‖X(W − Ŵ)‖²_F`, evaluated as `‖Lᵀ(W − Ŵ)‖²_F`.
    pub functional_loss: f64,
    /// `‖W − Ŵ‖_F / ‖W‖_F`; absent for an all-zero `W`.
    pub relative_error: Option<f64>,
    pub ideal_cr: f64,
    pub padded_cr: f64,
    pub bits_ideal: u64,
    pub bits_padded: u64,
    pub bits_dense: u64,
    pub payload_bytes: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stop_reason: Option<StopReason>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub loss_trace: Vec<f64>,
    pub ridge_used: f64,
}

/// Metrics for `artifact` as an approximation of `w`. The reconstruction
/// is the one [`LayerArtifact::reconstruct`] produces from stored values.
pub fn layer_metrics(
    w: &WeightMatrix,
    factor: &CholeskyFactor,
    artifact: &LayerArtifact,
    trace: Option<&FactorizationTrace>,
) -> Result<LayerMetrics> {
    let (m, n) = artifact.shape();
    if (w.rows(), w.cols()) != (m, n) || factor.dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "weight {}x{}, artifact {m}x{n}, whitening {}",
            w.rows(),
            w.cols(),
            factor.dim()
        )));
    }
    let wm = w.to_mat();
    let w_hat = artifact.reconstruct()?;
    let diff = faer::Mat::from_fn(m, n, |i, j| wm[(i, j)] - w_hat[(i, j)]);
    let functional_loss = linalg::frobenius_sq(factor.whiten_mat(diff.as_ref())?.as_ref());
    let wn = linalg::frobenius(wm.as_ref());
    let relative_error = (wn > 0.0).then(|| linalg::frobenius(diff.as_ref()) / wn);
    let (bits_ideal, bits_padded) = artifact.storage_bits();
    let bits_dense = artifact.dense_bits();
    let (kind, k, s, r) = match artifact {
        LayerArtifact::Compot(l) => (LayerKind::Compot, Some(l.codes.k()), Some(l.codes.s()), None),
        LayerArtifact::LowRank(l) => (LayerKind::Svd, None, None, Some(l.r)),
        LayerArtifact::Dense(_) => (LayerKind::Dense, None, None, None),
    };
    Ok(LayerMetrics {
        name: artifact.name().to_string(),
        kind,
        m,
        n,
        k,
        s,
        r,
        functional_loss,
        relative_error,
        ideal_cr: cr_from_bits(bits_ideal, bits_dense),
        padded_cr: cr_from_bits(bits_padded, bits_dense),
        bits_ideal,
        bits_padded,
        bits_dense,
        payload_bytes: artifact.payload_bytes(),
        iterations: trace.map(|t| t.iterations_run),
        stop_reason: trace.map(|t| t.stop_reason),
        loss_trace: trace.map(|t| t.losses.clone()).unwrap_or_default(),
        ridge_used: factor.ridge_used(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub mean: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_cr: Option<f64>,
    /// Model-wide CR; DENSE layers count at full size.
    pub achieved_cr_ideal: f64,
    pub achieved_cr_padded: f64,
    pub bits_ideal: u64,
    pub bits_padded: u64,
    pub bits_dense: u64,
    pub payload_bytes: u64,
    pub dense_layers: Vec<String>,
    pub loss: LossSummary,
    pub layers: Vec<LayerMetrics>,
    pub config: serde_json::Value,
}

pub fn global_report(layers: Vec<LayerMetrics>, target_cr: Option<f64>, config: serde_json::Value) -> Result<Report> {
    if layers.is_empty() {
        return Err(Error::NothingCompressed);
    }
    let bits_ideal = layers.iter().map(|l| l.bits_ideal).sum();
    let bits_padded = layers.iter().map(|l| l.bits_padded).sum();
    let bits_dense = layers.iter().map(|l| l.bits_dense).sum();
    let mut losses: Vec<f64> = layers.iter().map(|l| l.functional_loss).collect();
    losses.sort_by(f64::total_cmp);
    let total: f64 = losses.iter().sum();
    let mid = losses.len() / 2;
    let median = if losses.len() % 2 == 1 {
        losses[mid]
    } else {
        0.5 * (losses[mid - 1] + losses[mid])
    };
    Ok(Report {
        schema: REPORT_SCHEMA.to_string(),
        target_cr,
        achieved_cr_ideal: cr_from_bits(bits_ideal, bits_dense),
        achieved_cr_padded: cr_from_bits(bits_padded, bits_dense),
        bits_ideal,
        bits_padded,
        bits_dense,
        payload_bytes: layers.iter().map(|l| l.payload_bytes).sum(),
        dense_layers: layers
            .iter()
            .filter(|l| l.kind == LayerKind::Dense)
            .map(|l| l.name.clone())
            .collect(),
        loss: LossSummary {
            total,
            mean: total / losses.len() as f64,
            min: losses[0],
            median,
            max: losses[losses.len() - 1],
        },
        layers,
        config,
    })
}

fn kind_name(k: LayerKind) -> &'static str {
    match k {
        LayerKind::Compot => "compot",
        LayerKind::Svd => "svd",
        LayerKind::Dense => "dense",
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl Report {
    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let r: Self = serde_json::from_slice(bytes)?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::InvalidArgument(format!("unknown report schema {:?}", r.schema)));
        }
        Ok(r)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(0).max(5);
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>5}  {:>5}  {:>9}  {:>9}  {:>12}  {:>10}\n",
            "layer", "kind", "m", "n", "k", "s", "cr", "cr_pad", "func_loss", "rel_err"
        ));
        for l in &self.layers {
            out.push_str(&format!(
                "{:<width$}  {:>6}  {:>6}  {:>6}  {:>5}  {:>5}  {:>9.6}  {:>9.6}  {:>12.6e}  {:>10}\n",
                l.name,
                kind_name(l.kind),
                l.m,
                l.n,
                opt(l.k.or(l.r)),
                opt(l.s),
                l.ideal_cr,
                l.padded_cr,
                l.functional_loss,
                l.relative_error.map(|e| format!("{e:.6}")).unwrap_or_else(|| "-".into()),
            ));
        }
        out.push_str(&format!(
            "achieved cr {:.6} (padded {:.6}){}\n",
            self.achieved_cr_ideal,
            self.achieved_cr_padded,
            self.target_cr.map(|t| format!(", target {t}")).unwrap_or_default()
        ));
        out.push_str(&format!(
            "functional loss total {:.6e}, median {:.6e}, max {:.6e}\n",
            self.loss.total, self.loss.median, self.loss.max
        ));
        if !self.dense_layers.is_empty() {
            out.push_str(&format!("dense: {}\n", self.dense_layers.join(", ")));
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record([
            "name",
            "kind",
            "m",
            "n",
            "k",
            "s",
            "r",
            "functional_loss",
            "relative_error",
            "ideal_cr",
            "padded_cr",
            "bits_ideal",
            "bits_padded",
            "bits_dense",
            "iterations",
            "ridge_used",
        ])
        .map_err(io)?;
        for l in &self.layers {
            w.write_record([
                l.name.clone(),
                kind_name(l.kind).to_string(),
                l.m.to_string(),
                l.n.to_string(),
                opt(l.k),
                opt(l.s),
                opt(l.r),
                l.functional_loss.to_string(),
                opt(l.relative_error),
                l.ideal_cr.to_string(),
                l.padded_cr.to_string(),
                l.bits_ideal.to_string(),
                l.bits_padded.to_string(),
                l.bits_dense.to_string(),
                opt(l.iterations),
                l.ridge_used.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
