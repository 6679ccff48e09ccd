//! Named-tensor container files and the compression manifest.
//!
//! Container layout:
//!
//! ```text
//! [8 bytes  LE u64: header length H]
//! [H bytes  UTF-8 JSON: name -> {"dtype", "shape", "data_offsets": [begin, end]}]
//! [data region, little-endian IEEE-754 / raw u8]
//! ```
//!
//! Offsets are relative to the start of the data region. The writer lays
//! tensors out contiguously in name order and pads the header with spaces to
//! a multiple of 8 bytes, so identical tensor sets always encode to
//! identical bytes. A `__metadata__` key holding a string map is accepted on
//! read and ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use faer::Mat;
use half::f16;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Dtype {
    F16,
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F16 => "F16",
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
            Dtype::U8 => "U8",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data_offsets: [u64; 2],
}

impl TensorInfo {
    pub fn numel(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }
}

/// An owned tensor: dtype, shape and its little-endian payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl Tensor {
    pub fn from_bytes(dtype: Dtype, shape: Vec<usize>, bytes: Vec<u8>) -> Result<Self> {
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidArgument(format!("shape {shape:?} overflows")))?;
        if numel.checked_mul(dtype.width()) != Some(bytes.len()) {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} of {} needs {} bytes, got {}",
                dtype.name(),
                numel.saturating_mul(dtype.width()),
                bytes.len()
            )));
        }
        Ok(Self { dtype, shape, bytes })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::from_bytes(Dtype::F32, shape, bytes)
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::from_bytes(Dtype::F64, shape, bytes)
    }

    pub fn from_f16(shape: Vec<usize>, values: &[f16]) -> Result<Self> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::from_bytes(Dtype::F16, shape, bytes)
    }

    pub fn from_u8(shape: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Self::from_bytes(Dtype::U8, shape, values)
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn numel(&self) -> usize {
        self.bytes.len() / self.dtype.width()
    }

    /// Widens every element to f64. f16 and f32 widen exactly.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        decode_f64(self.dtype, &self.bytes)
    }

    pub fn to_f16_vec(&self) -> Option<Vec<f16>> {
        (self.dtype == Dtype::F16).then(|| {
            self.bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]))
                .collect()
        })
    }
}

fn decode_f64(dtype: Dtype, bytes: &[u8]) -> Vec<f64> {
    match dtype {
        Dtype::U8 => bytes.iter().map(|&b| b as f64).collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    }
}

/// A set of uniquely named tensors, ready to be written.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TensorSet {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(Error::InvalidArgument(format!("{METADATA_KEY} is reserved")));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn extend(&mut self, other: TensorSet) -> Result<()> {
        for (name, t) in other.tensors {
            self.insert(name, t)?;
        }
        Ok(())
    }

    /// Encodes the set in the container format.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut header = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let end = offset + t.bytes.len() as u64;
            header.insert(
                name.as_str(),
                TensorInfo {
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    data_offsets: [offset, end],
                },
            );
            offset = end;
        }
        let mut json = serde_json::to_vec(&header)?;
        while json.len() % 8 != 0 {
            json.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }
}

/// A parsed container. Tensor payloads are only decoded on request.
#[derive(Debug, Clone)]
pub struct TensorContainer {
    entries: BTreeMap<String, TensorInfo>,
    metadata: BTreeMap<String, String>,
    data: Vec<u8>,
}

struct Header {
    entries: Vec<(String, TensorInfo)>,
    metadata: BTreeMap<String, String>,
}

impl<'de> Deserialize<'de> for Header {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = Header;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Header, A::Error> {
                let mut entries: Vec<(String, TensorInfo)> = Vec::new();
                let mut metadata = None;
                while let Some(key) = map.next_key::<String>()? {
                    if key == METADATA_KEY {
                        if metadata.is_some() {
                            return Err(serde::de::Error::custom("duplicate __metadata__"));
                        }
                        metadata = Some(map.next_value::<BTreeMap<String, String>>()?);
                    } else {
                        entries.push((key, map.next_value()?));
                    }
                }
                Ok(Header {
                    entries,
                    metadata: metadata.unwrap_or_default(),
                })
            }
        }

        d.deserialize_map(HeaderVisitor)
    }
}

impl TensorContainer {
    /// Parses a container from its full byte image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedHeader);
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(Error::TruncatedHeader);
        }
        let header_end = 8 + header_len as usize;
        let header_bytes = &bytes[8..header_end];
        let text = std::str::from_utf8(header_bytes)
            .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let data = bytes[header_end..].to_vec();

        let mut entries = BTreeMap::new();
        for (name, info) in header.entries {
            let numel = info.numel().ok_or_else(|| {
                Error::MalformedHeader(format!("shape of {name:?} overflows"))
            })?;
            let nbytes = numel
                .checked_mul(info.dtype.width())
                .ok_or_else(|| Error::MalformedHeader(format!("size of {name:?} overflows")))?;
            let [begin, end] = info.data_offsets;
            if end < begin || end - begin != nbytes as u64 {
                return Err(Error::MalformedHeader(format!(
                    "tensor {name:?}: range [{begin}, {end}) does not hold {nbytes} bytes"
                )));
            }
            if end > data.len() as u64 {
                return Err(Error::TruncatedData(name));
            }
            if entries.contains_key(&name) {
                return Err(Error::DuplicateName(name));
            }
            entries.insert(name, info);
        }

        let mut ranges: Vec<(u64, u64, &str)> = entries
            .iter()
            .filter(|(_, i)| i.data_offsets[1] > i.data_offsets[0])
            .map(|(n, i)| (i.data_offsets[0], i.data_offsets[1], n.as_str()))
            .collect();
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::MalformedHeader(format!(
                    "tensors {:?} and {:?} overlap",
                    w[0].2, w[1].2
                )));
            }
        }

        Ok(Self {
            entries,
            metadata: header.metadata,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.entries.get(name)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        let info = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let [b, e] = info.data_offsets;
        Ok(&self.data[b as usize..e as usize])
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let info = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Ok(Tensor {
            dtype: info.dtype,
            shape: info.shape.clone(),
            bytes: self.bytes(name)?.to_vec(),
        })
    }

    pub fn to_tensor_set(&self) -> TensorSet {
        let mut set = TensorSet::new();
        for name in self.entries.keys() {
            let t = self.tensor(name).expect("entry exists");
            set.tensors.insert(name.clone(), t);
        }
        set
    }
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let bytes = fs::read(path)?;
    TensorContainer::from_bytes(&bytes)
}

pub fn write_container(path: impl AsRef<Path>, tensors: &TensorSet) -> Result<()> {
    fs::write(path, tensors.encode()?)?;
    Ok(())
}

/// How a checkpoint stores a linear layer's matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// Stored as m×n (inputs × outputs): already in `X·W` form.
    #[default]
    InputByOutput,
    /// Stored as n×m (outputs × inputs), the usual `Linear.weight` layout.
    OutputByInput,
}

/// A dense m×n weight acting on activations as `X·W`, with X of width m.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl WeightMatrix {
    /// Row-major `data` of shape rows×cols.
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if rows == 0 || cols == 0 || rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::DimensionMismatch(format!(
                "weight {name:?}: {rows}x{cols} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("weight {name:?}")));
        }
        Ok(Self { name, rows, cols, data })
    }

    pub fn from_mat(name: impl Into<String>, m: &Mat<f64>) -> Result<Self> {
        let data = crate::linalg::to_row_major(m.as_ref())
            .into_iter()
            .map(|v| v as f32)
            .collect();
        Self::new(name, m.nrows(), m.ncols(), data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn to_mat(&self) -> Mat<f64> {
        crate::linalg::from_row_major_f32(self.rows, self.cols, &self.data)
    }

    pub fn transposed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self {
            name: self.name.clone(),
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// f32 tensor laid out per `orientation`; the inverse of [`load_weight`].
    pub fn to_tensor(&self, orientation: Orientation) -> Tensor {
        let stored = match orientation {
            Orientation::InputByOutput => self.clone(),
            Orientation::OutputByInput => self.transposed(),
        };
        Tensor::from_f32(vec![stored.rows, stored.cols], &stored.data).expect("consistent shape")
    }
}

/// Loads `name` and normalizes it to `X·W` orientation.
pub fn load_weight(
    container: &TensorContainer,
    name: &str,
    orientation: Orientation,
) -> Result<WeightMatrix> {
    let t = container.tensor(name)?;
    weight_from_tensor(name, &t, orientation)
}

pub fn weight_from_tensor(name: &str, t: &Tensor, orientation: Orientation) -> Result<WeightMatrix> {
    let &[rows, cols] = t.shape() else {
        return Err(Error::NotAMatrix {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
    };
    let data: Vec<f32> = match t.dtype() {
        Dtype::U8 => {
            return Err(Error::UnsupportedDtype {
                name: name.to_string(),
                dtype: "U8",
            })
        }
        Dtype::F32 => t
            .bytes()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        _ => t.to_f64_vec().into_iter().map(|v| v as f32).collect(),
    };
    let stored = WeightMatrix::new(name, rows, cols, data)?;
    Ok(match orientation {
        Orientation::InputByOutput => stored,
        Orientation::OutputByInput => stored.transposed(),
    })
}

/// Reads a rank-2 tensor of any float dtype into an f64 matrix, as stored.
pub fn load_f64_matrix(container: &TensorContainer, name: &str) -> Result<Mat<f64>> {
    let t = container.tensor(name)?;
    let &[rows, cols] = t.shape() else {
        return Err(Error::NotAMatrix {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
    };
    if t.dtype() == Dtype::U8 {
        return Err(Error::UnsupportedDtype {
            name: name.to_string(),
            dtype: "U8",
        });
    }
    let v = t.to_f64_vec();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("tensor {name:?}")));
    }
    Ok(crate::linalg::from_row_major_f64(rows, cols, &v))
}

/// One compressible layer in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub weight: String,
    #[serde(default)]
    pub gram: Option<String>,
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default)]
    pub orientation: Orientation,
}

impl LayerSpec {
    /// Gram tensor name: explicit, or `<weight>/gram`.
    pub fn gram_name(&self) -> String {
        self.gram
            .clone()
            .unwrap_or_else(|| format!("{}/gram", self.weight))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub layers: Vec<LayerSpec>,
    #[serde(default = "empty_object")]
    pub config: serde_json::Value,
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

impl Manifest {
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(bytes)?;
        let mut seen = std::collections::BTreeSet::new();
        for l in &m.layers {
            if !seen.insert(l.weight.as_str()) {
                return Err(Error::DuplicateName(l.weight.clone()));
            }
        }
        Ok(m)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_slice(&fs::read(path)?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json_pretty()?)?;
        Ok(())
    }

    /// Checks that every weight resolves in `weights`, and, when `grams` is
    /// given, every explicitly named gram resolves there.
    pub fn validate(&self, weights: &TensorContainer, grams: Option<&TensorContainer>) -> Result<()> {
        for l in &self.layers {
            if !weights.contains(&l.weight) {
                return Err(Error::MissingTensor(l.weight.clone()));
            }
            if let (Some(g), Some(grams)) = (&l.gram, grams) {
                if !grams.contains(g) {
                    return Err(Error::MissingTensor(g.clone()));
                }
            }
        }
        Ok(())
    }
}
