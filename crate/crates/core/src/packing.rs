//! Packed storage for sparse codes and the storage accounting that goes
//! with it.
//!
//! Layout (normative for this crate):
//! - `mask`: for each column in order, `ceil(k/8)` bytes; row `i` of the
//!   column is bit `i % 8` (LSB first) of byte `i / 8`. Padding bits are 0.
//! - `values`: f16 nonzeros, column by column, rows increasing within a
//!   column. Exactly `popcount(mask)` entries.
//!
//! Stored entries that are exactly zero are dropped from both.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorizer::SparseCodes;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedCodes {
    k: usize,
    n: usize,
    s: usize,
    values: Vec<f16>,
    mask: Vec<u8>,
}

pub fn mask_bytes_per_column(k: usize) -> usize {
    k.div_ceil(8)
}

impl PackedCodes {
    /// Validates raw parts, e.g. as read back from a container.
    pub fn from_parts(k: usize, n: usize, s: usize, values: Vec<f16>, mask: Vec<u8>) -> Result<Self> {
        let corrupt = |msg: String| Err(Error::CorruptPackedCodes(msg));
        if s > k {
            return corrupt(format!("s = {s} exceeds k = {k}"));
        }
        let per_col = mask_bytes_per_column(k);
        let expected = per_col.checked_mul(n);
        if expected != Some(mask.len()) {
            return corrupt(format!(
                "mask has {} bytes, expected {n} columns x {per_col}",
                mask.len()
            ));
        }
        let mut total = 0usize;
        if per_col > 0 {
            let tail_bits = k % 8;
            for (j, col) in mask.chunks_exact(per_col).enumerate() {
                if tail_bits != 0 && col[per_col - 1] >> tail_bits != 0 {
                    return corrupt(format!("column {j}: padding bits set"));
                }
                let count: usize = col.iter().map(|b| b.count_ones() as usize).sum();
                if count > s {
                    return corrupt(format!("column {j}: {count} entries exceed s = {s}"));
                }
                total += count;
            }
        }
        if total != values.len() {
            return corrupt(format!(
                "mask popcount {total} != value count {}",
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return corrupt("non-finite value".into());
        }
        Ok(Self { k, n, s, values, mask })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn values(&self) -> &[f16] {
        &self.values
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn is_set(&self, row: usize, col: usize) -> bool {
        let b = self.mask[col * mask_bytes_per_column(self.k) + row / 8];
        (b >> (row % 8)) & 1 == 1
    }
}

pub fn pack(codes: &SparseCodes) -> PackedCodes {
    let (k, n) = (codes.k(), codes.n());
    let per_col = mask_bytes_per_column(k);
    let mut mask = vec![0u8; per_col * n];
    let mut values = Vec::with_capacity(codes.nnz());
    for j in 0..n {
        for (i, v) in codes.column(j) {
            if v == 0.0 {
                continue;
            }
            mask[j * per_col + i / 8] |= 1 << (i % 8);
            values.push(f16::from_f64(v));
        }
    }
    PackedCodes {
        k,
        n,
        s: codes.s(),
        values,
        mask,
    }
}

pub fn unpack(p: &PackedCodes) -> Result<SparseCodes> {
    // re-validate: the struct can only be built through from_parts or pack,
    // but unpack is also the decoding entry point for untrusted parts
    let p = PackedCodes::from_parts(p.k, p.n, p.s, p.values.clone(), p.mask.clone())?;
    let per_col = mask_bytes_per_column(p.k);
    let mut next = p.values.iter();
    let mut columns = Vec::with_capacity(p.n);
    for j in 0..p.n {
        let mut col = Vec::new();
        for i in 0..p.k {
            if (p.mask[j * per_col + i / 8] >> (i % 8)) & 1 == 1 {
                let v = next.next().expect("popcount validated");
                col.push((i, v.to_f64()));
            }
        }
        columns.push(col);
    }
    SparseCodes::from_columns(p.k, p.s, columns)
}

/// Storage of an m×n matrix held as an m×k f16 dictionary, s f16 values per
/// column and a k×n position mask, against a dense f16 baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub bits_dictionary: u64,
    pub bits_values: u64,
    pub bits_mask: u64,
    /// Mask bits including the per-column byte padding.
    pub bits_mask_padded: u64,
    pub bits_dense: u64,
}

impl StorageReport {
    pub fn bits_ideal(&self) -> u64 {
        self.bits_dictionary + self.bits_values + self.bits_mask
    }

    pub fn bits_padded(&self) -> u64 {
        self.bits_dictionary + self.bits_values + self.bits_mask_padded
    }

    /// `1 − (16mk + 16sn + kn) / 16mn`
    pub fn ideal_cr(&self) -> f64 {
        cr_from_bits(self.bits_ideal(), self.bits_dense)
    }

    pub fn padded_cr(&self) -> f64 {
        cr_from_bits(self.bits_padded(), self.bits_dense)
    }

    /// Ideal CR as an exact fraction `(numerator, denominator)`.
    pub fn ideal_cr_fraction(&self) -> (i128, u128) {
        let num = self.bits_dense as i128 - self.bits_ideal() as i128;
        let den = self.bits_dense as u128;
        let g = gcd(num.unsigned_abs(), den).max(1);
        (num / g as i128, den / g)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn cr_from_bits(stored: u64, dense: u64) -> f64 {
    // exact when both fit in 53 bits, which covers any realistic layer
    1.0 - stored as f64 / dense as f64
}

pub fn storage_report(m: usize, n: usize, k: usize, s: usize) -> StorageReport {
    let (m, n, k, s) = (m as u64, n as u64, k as u64, s as u64);
    StorageReport {
        bits_dictionary: 16 * m * k,
        bits_values: 16 * s * n,
        bits_mask: k * n,
        bits_mask_padded: 8 * n * mask_bytes_per_column(k as usize) as u64,
        bits_dense: 16 * m * n,
    }
}
