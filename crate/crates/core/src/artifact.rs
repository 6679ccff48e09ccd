//! Deployable per-layer artifacts and their on-disk form.
//!
//! Artifacts live in a tensor container plus a JSON sidecar at
//! `<container path>.json`. Per layer:
//!
//! | kind     | tensors                                                        |
//! |----------|----------------------------------------------------------------|
//! | `compot` | `<layer>/A` f16 m×k, `<layer>/S_values` f16, `<layer>/S_mask` u8 |
//! | `svd`    | `<layer>/A` f16 m×r, `<layer>/B` f16 r×n                       |
//! | `dense`  | `<layer>` copied byte-for-byte from the input checkpoint       |
//!
//! Before the f16 cast the two factors are rebalanced by a power of two
//! (`A·2^e`, `S·2^-e`), which leaves the product bit-exact in f64 while
//! keeping the dewhitened dictionary out of the f16 subnormal range.

use std::fs;
use std::path::{Path, PathBuf};

use faer::Mat;
use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorizer::{OrthoDictionary, SparseCodes};
use crate::gram::CholeskyFactor;
use crate::linalg;
use crate::packing::{self, mask_bytes_per_column, PackedCodes};
use crate::tensorio::{self, Dtype, Orientation, Tensor, TensorContainer, TensorSet};

pub const SIDECAR_FORMAT: &str = "compot-artifacts/1";
pub const MASK_PADDING: &str = "per-column-byte";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerRecord {
    Compot {
        name: String,
        m: usize,
        n: usize,
        k: usize,
        s: usize,
        padding: String,
        orientation: Orientation,
    },
    Svd {
        name: String,
        m: usize,
        n: usize,
        r: usize,
        orientation: Orientation,
    },
    Dense {
        name: String,
        m: usize,
        n: usize,
        orientation: Orientation,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format: String,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompotLayer {
    pub name: String,
    pub orientation: Orientation,
    pub m: usize,
    /// Row-major m×k.
    pub dictionary: Vec<f16>,
    pub codes: PackedCodes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankLayer {
    pub name: String,
    pub orientation: Orientation,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    /// Row-major m×r.
    pub left: Vec<f16>,
    /// Row-major r×n.
    pub right: Vec<f16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    pub orientation: Orientation,
    pub m: usize,
    pub n: usize,
    /// The input tensor, unchanged.
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerArtifact {
    Compot(CompotLayer),
    LowRank(LowRankLayer),
    Dense(DenseLayer),
}

fn balance_exponent(max_left: f64, max_right: f64) -> i32 {
    if max_left > 0.0 && max_right > 0.0 {
        (0.5 * (max_right / max_left).log2()).round() as i32
    } else {
        0
    }
}

fn to_f16(layer: &str, values: impl Iterator<Item = f64>) -> Result<Vec<f16>> {
    values
        .map(|v| {
            let h = f16::from_f64(v);
            if h.is_finite() {
                Ok(h)
            } else {
                Err(Error::F16Overflow {
                    layer: layer.to_string(),
                    value: v,
                })
            }
        })
        .collect()
}

fn f16_matrix(rows: usize, cols: usize, data: &[f16]) -> Mat<f64> {
    Mat::from_fn(rows, cols, |i, j| data[i * cols + j].to_f64())
}

impl LayerArtifact {
    /// Dewhitens `dictionary`, rebalances and casts to the storage format.
    pub fn compot(
        name: &str,
        orientation: Orientation,
        factor: &CholeskyFactor,
        dictionary: &OrthoDictionary,
        codes: &SparseCodes,
    ) -> Result<Self> {
        let a = crate::gram::dewhiten_dictionary(factor, dictionary)?;
        let max_s = codes.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let e = balance_exponent(linalg::max_abs(a.as_ref()), max_s);
        let up = 2f64.powi(e);
        let down = 2f64.powi(-e);
        let dict = to_f16(name, linalg::to_row_major(a.as_ref()).into_iter().map(|v| v * up))?;
        let scaled = codes.scaled(down);
        to_f16(name, scaled.values().iter().copied())?;
        Ok(Self::Compot(CompotLayer {
            name: name.to_string(),
            orientation,
            m: a.nrows(),
            dictionary: dict,
            codes: packing::pack(&scaled),
        }))
    }

    /// `left·right` with left m×r and right r×n.
    pub fn low_rank(name: &str, orientation: Orientation, left: &Mat<f64>, right: &Mat<f64>) -> Result<Self> {
        if left.ncols() != right.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "low-rank factors {}x{} and {}x{}",
                left.nrows(),
                left.ncols(),
                right.nrows(),
                right.ncols()
            )));
        }
        let e = balance_exponent(linalg::max_abs(left.as_ref()), linalg::max_abs(right.as_ref()));
        let (up, down) = (2f64.powi(e), 2f64.powi(-e));
        Ok(Self::LowRank(LowRankLayer {
            name: name.to_string(),
            orientation,
            m: left.nrows(),
            n: right.ncols(),
            r: left.ncols(),
            left: to_f16(name, linalg::to_row_major(left.as_ref()).into_iter().map(|v| v * up))?,
            right: to_f16(name, linalg::to_row_major(right.as_ref()).into_iter().map(|v| v * down))?,
        }))
    }

    /// Pass-through of the stored tensor.
    pub fn dense(name: &str, orientation: Orientation, tensor: Tensor) -> Result<Self> {
        let &[a, b] = tensor.shape() else {
            return Err(Error::NotAMatrix {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
            });
        };
        let (m, n) = match orientation {
            Orientation::InputByOutput => (a, b),
            Orientation::OutputByInput => (b, a),
        };
        Ok(Self::Dense(DenseLayer {
            name: name.to_string(),
            orientation,
            m,
            n,
            tensor,
        }))
    }

    pub fn name(&self) -> &str {
        match self {
            Self::Compot(l) => &l.name,
            Self::LowRank(l) => &l.name,
            Self::Dense(l) => &l.name,
        }
    }

    pub fn orientation(&self) -> Orientation {
        match self {
            Self::Compot(l) => l.orientation,
            Self::LowRank(l) => l.orientation,
            Self::Dense(l) => l.orientation,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Self::Compot(l) => (l.m, l.codes.n()),
            Self::LowRank(l) => (l.m, l.n),
            Self::Dense(l) => (l.m, l.n),
        }
    }

    /// `(ideal, padded)` storage bits against a 16-bit dense baseline.
    pub fn storage_bits(&self) -> (u64, u64) {
        match self {
            Self::Compot(l) => {
                let r = packing::storage_report(l.m, l.codes.n(), l.codes.k(), l.codes.s());
                (r.bits_ideal(), r.bits_padded())
            }
            Self::LowRank(l) => {
                let b = 16 * (l.r * (l.m + l.n)) as u64;
                (b, b)
            }
            Self::Dense(l) => {
                let b = 16 * (l.m * l.n) as u64;
                (b, b)
            }
        }
    }

    /// Bytes this layer's tensors occupy in the data region.
    pub fn payload_bytes(&self) -> u64 {
        (match self {
            Self::Compot(l) => 2 * (l.dictionary.len() + l.codes.values().len()) + l.codes.mask().len(),
            Self::LowRank(l) => 2 * (l.left.len() + l.right.len()),
            Self::Dense(l) => l.tensor.bytes().len(),
        }) as u64
    }

    pub fn dense_bits(&self) -> u64 {
        let (m, n) = self.shape();
        16 * (m * n) as u64
    }

    /// `Ŵ` in `X·W` orientation, from exactly the stored values.
    pub fn reconstruct(&self) -> Result<Mat<f64>> {
        Ok(match self {
            Self::Compot(l) => {
                let k = l.codes.k();
                let a = f16_matrix(l.m, k, &l.dictionary);
                let s = packing::unpack(&l.codes)?.to_dense();
                linalg::mul(a.as_ref(), s.as_ref())
            }
            Self::LowRank(l) => {
                let a = f16_matrix(l.m, l.r, &l.left);
                let b = f16_matrix(l.r, l.n, &l.right);
                linalg::mul(a.as_ref(), b.as_ref())
            }
            Self::Dense(l) => {
                let w = tensorio::weight_from_tensor(&l.name, &l.tensor, l.orientation)?;
                w.to_mat()
            }
        })
    }

    /// The reconstructed weight as a tensor in the layer's stored layout.
    /// Dense layers return their original tensor unchanged.
    pub fn reconstructed_tensor(&self) -> Result<Tensor> {
        if let Self::Dense(l) = self {
            return Ok(l.tensor.clone());
        }
        let w = tensorio::WeightMatrix::from_mat(self.name(), &self.reconstruct()?)?;
        Ok(w.to_tensor(self.orientation()))
    }

    pub fn record(&self) -> LayerRecord {
        match self {
            Self::Compot(l) => LayerRecord::Compot {
                name: l.name.clone(),
                m: l.m,
                n: l.codes.n(),
                k: l.codes.k(),
                s: l.codes.s(),
                padding: MASK_PADDING.to_string(),
                orientation: l.orientation,
            },
            Self::LowRank(l) => LayerRecord::Svd {
                name: l.name.clone(),
                m: l.m,
                n: l.n,
                r: l.r,
                orientation: l.orientation,
            },
            Self::Dense(l) => LayerRecord::Dense {
                name: l.name.clone(),
                m: l.m,
                n: l.n,
                orientation: l.orientation,
            },
        }
    }

    fn insert_tensors(&self, set: &mut TensorSet) -> Result<()> {
        match self {
            Self::Compot(l) => {
                let k = l.codes.k();
                let nnz = l.codes.values().len();
                set.insert(format!("{}/A", l.name), Tensor::from_f16(vec![l.m, k], &l.dictionary)?)?;
                set.insert(format!("{}/S_values", l.name), Tensor::from_f16(vec![nnz], l.codes.values())?)?;
                set.insert(
                    format!("{}/S_mask", l.name),
                    Tensor::from_u8(vec![l.codes.mask().len()], l.codes.mask().to_vec())?,
                )?;
            }
            Self::LowRank(l) => {
                set.insert(format!("{}/A", l.name), Tensor::from_f16(vec![l.m, l.r], &l.left)?)?;
                set.insert(format!("{}/B", l.name), Tensor::from_f16(vec![l.r, l.n], &l.right)?)?;
            }
            Self::Dense(l) => set.insert(l.name.clone(), l.tensor.clone())?,
        }
        Ok(())
    }

    /// Names of the tensors this layer occupies in a container.
    pub fn tensor_names(&self) -> Vec<String> {
        let n = self.name();
        match self {
            Self::Compot(_) => vec![format!("{n}/A"), format!("{n}/S_values"), format!("{n}/S_mask")],
            Self::LowRank(_) => vec![format!("{n}/A"), format!("{n}/B")],
            Self::Dense(_) => vec![n.to_string()],
        }
    }
}

/// A full compression output: layers in manifest order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Artifacts {
    pub layers: Vec<LayerArtifact>,
}

pub fn sidecar_path(container: &Path) -> PathBuf {
    let mut s = container.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn f16_payload(c: &TensorContainer, name: &str, shape: &[usize]) -> Result<Vec<f16>> {
    let t = c.tensor(name)?;
    if t.shape() != shape {
        return Err(Error::InvalidArtifact(format!(
            "{name:?} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    t.to_f16_vec()
        .ok_or_else(|| Error::InvalidArtifact(format!("{name:?} must be F16")))
}

impl Artifacts {
    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            format: SIDECAR_FORMAT.to_string(),
            layers: self.layers.iter().map(LayerArtifact::record).collect(),
        }
    }

    pub fn to_tensor_set(&self) -> Result<TensorSet> {
        let mut set = TensorSet::new();
        for l in &self.layers {
            l.insert_tensors(&mut set)?;
        }
        Ok(set)
    }

    /// `(container bytes, sidecar bytes)`.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let container = self.to_tensor_set()?.encode()?;
        let mut sidecar = serde_json::to_vec_pretty(&self.sidecar())?;
        sidecar.push(b'\n');
        Ok((container, sidecar))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let (container, sidecar) = self.encode()?;
        fs::write(path, container)?;
        fs::write(sidecar_path(path), sidecar)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let container = tensorio::read_container(path)?;
        let sidecar = fs::read(sidecar_path(path))?;
        Self::from_parts(&container, &sidecar)
    }

    /// Decodes and validates artifacts from a parsed container and the raw
    /// sidecar JSON.
    pub fn from_parts(container: &TensorContainer, sidecar: &[u8]) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_slice(sidecar)?;
        if sidecar.format != SIDECAR_FORMAT {
            return Err(Error::InvalidArtifact(format!("unknown format {:?}", sidecar.format)));
        }
        let mut names = std::collections::BTreeSet::new();
        let mut layers = Vec::with_capacity(sidecar.layers.len());
        for rec in sidecar.layers {
            let layer = match rec {
                LayerRecord::Compot {
                    name,
                    m,
                    n,
                    k,
                    s,
                    padding,
                    orientation,
                } => {
                    if padding != MASK_PADDING {
                        return Err(Error::InvalidArtifact(format!("unknown mask padding {padding:?}")));
                    }
                    if m == 0 || n == 0 || k == 0 || k > m || s == 0 || s > k {
                        return Err(Error::InvalidArtifact(format!(
                            "layer {name:?}: invalid dims m={m} n={n} k={k} s={s}"
                        )));
                    }
                    let dictionary = f16_payload(container, &format!("{name}/A"), &[m, k])?;
                    let values_name = format!("{name}/S_values");
                    let vt = container.tensor(&values_name)?;
                    if vt.shape().len() != 1 {
                        return Err(Error::InvalidArtifact(format!("{values_name:?} must be flat")));
                    }
                    let values = vt
                        .to_f16_vec()
                        .ok_or_else(|| Error::InvalidArtifact(format!("{values_name:?} must be F16")))?;
                    let mask_name = format!("{name}/S_mask");
                    let mt = container.tensor(&mask_name)?;
                    let mask_len = n
                        .checked_mul(mask_bytes_per_column(k))
                        .ok_or_else(|| Error::InvalidArtifact("mask size overflows".into()))?;
                    if mt.dtype() != Dtype::U8 || mt.shape() != [mask_len] {
                        return Err(Error::InvalidArtifact(format!(
                            "{mask_name:?} must be U8 of length {mask_len}"
                        )));
                    }
                    let codes = PackedCodes::from_parts(k, n, s, values, mt.bytes().to_vec())?;
                    LayerArtifact::Compot(CompotLayer {
                        name,
                        orientation,
                        m,
                        dictionary,
                        codes,
                    })
                }
                LayerRecord::Svd {
                    name,
                    m,
                    n,
                    r,
                    orientation,
                } => {
                    if m == 0 || n == 0 || r == 0 || r > m.min(n) {
                        return Err(Error::InvalidArtifact(format!(
                            "layer {name:?}: invalid dims m={m} n={n} r={r}"
                        )));
                    }
                    let left = f16_payload(container, &format!("{name}/A"), &[m, r])?;
                    let right = f16_payload(container, &format!("{name}/B"), &[r, n])?;
                    if left.iter().chain(&right).any(|v| !v.is_finite()) {
                        return Err(Error::InvalidArtifact(format!("layer {name:?}: non-finite factor")));
                    }
                    LayerArtifact::LowRank(LowRankLayer {
                        name,
                        orientation,
                        m,
                        n,
                        r,
                        left,
                        right,
                    })
                }
                LayerRecord::Dense {
                    name,
                    m,
                    n,
                    orientation,
                } => {
                    let tensor = container.tensor(&name)?;
                    let layer = LayerArtifact::dense(&name, orientation, tensor)?;
                    if layer.shape() != (m, n) {
                        return Err(Error::InvalidArtifact(format!(
                            "dense layer {name:?} is {:?}, sidecar says {m}x{n}",
                            layer.shape()
                        )));
                    }
                    layer
                }
            };
            if !names.insert(layer.name().to_string()) {
                return Err(Error::DuplicateName(layer.name().to_string()));
            }
            if let LayerArtifact::Compot(l) = &layer {
                if l.dictionary.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArtifact(format!("layer {:?}: non-finite dictionary", l.name)));
                }
            }
            layers.push(layer);
        }
        Ok(Self { layers })
    }

    /// Container of reconstructed dense weights, each in its stored layout.
    pub fn reconstruct(&self) -> Result<TensorSet> {
        let mut set = TensorSet::new();
        for l in &self.layers {
            set.insert(l.name().to_string(), l.reconstructed_tensor()?)?;
        }
        Ok(set)
    }
}
