//! Dense vectors and matrices over fixed-point raw values.
//!
//! Matrix-vector products use the same fused multiply-accumulate truncation
//! as scalar inner products: exact integer arithmetic with one truncation per
//! accumulation step.

use serde::{Deserialize, Serialize};

use crate::fxp::{self, FxError, FxFormat, FxScalar};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FxVector {
    fmt: FxFormat,
    raw: Vec<i128>,
}

impl FxVector {
    pub fn zeros(len: usize, fmt: FxFormat) -> Self {
        Self {
            fmt,
            raw: vec![0; len],
        }
    }

    pub fn from_ints(vals: &[i64], fmt: FxFormat) -> Result<Self, FxError> {
        let mut v = Self::zeros(vals.len(), fmt);
        for (i, &x) in vals.iter().enumerate() {
            v.set(i, FxScalar::from_int(x, fmt)?);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn format(&self) -> FxFormat {
        self.fmt
    }

    pub fn get(&self, i: usize) -> FxScalar {
        FxScalar::from_raw(self.raw[i], self.fmt).expect("stored values are in range")
    }

    pub fn raw_at(&self, i: usize) -> i128 {
        self.raw[i]
    }

    pub fn set(&mut self, i: usize, v: FxScalar) {
        assert_eq!(v.format(), self.fmt);
        self.raw[i] = v.raw();
    }

    pub fn set_raw(&mut self, i: usize, raw: i128) -> Result<(), FxError> {
        self.raw[i] = FxScalar::from_raw(raw, self.fmt)?.raw();
        Ok(())
    }

    pub fn iter_raw(&self) -> impl Iterator<Item = i128> + '_ {
        self.raw.iter().copied()
    }

    /// Elementwise sum, exact (overflow checked).
    pub fn add(&self, other: &FxVector) -> Result<FxVector, FxError> {
        if self.len() != other.len() {
            return Err(FxError::LengthMismatch(self.len(), other.len()));
        }
        let mut out = FxVector::zeros(self.len(), self.fmt);
        for i in 0..self.len() {
            let sum = self.raw[i] + other.raw[i];
            if sum.abs() >= self.fmt.raw_bound() {
                return Err(FxError::Overflow {
                    op: "vector_add",
                    bits: self.fmt.integer_bits,
                });
            }
            out.raw[i] = sum;
        }
        Ok(out)
    }

    pub fn relu(&self) -> FxVector {
        FxVector {
            fmt: self.fmt,
            raw: self.raw.iter().map(|&r| r.max(0)).collect(),
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> FxVector {
        FxVector {
            fmt: self.fmt,
            raw: self.raw[start..start + len].to_vec(),
        }
    }

    /// Exact uniform average of several equal-length vectors, truncated once
    /// toward zero per coordinate.
    pub fn truncated_mean(vectors: &[&FxVector]) -> Result<FxVector, FxError> {
        assert!(!vectors.is_empty(), "mean of no vectors");
        let fmt = vectors[0].fmt;
        let len = vectors[0].len();
        let count = vectors.len() as i128;
        let mut out = FxVector::zeros(len, fmt);
        for i in 0..len {
            let sum: i128 = vectors.iter().map(|v| v.raw[i]).sum();
            out.set_raw(i, fxp::div_trunc(sum, count))?;
        }
        Ok(out)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i).value_f64()).collect()
    }
}

/// Row-major dense matrix. Compiled weight matrices are overwhelmingly
/// sparse, so matvec runs off a lazily-built per-row tap index; mutation
/// drops the index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FxMatrix {
    fmt: FxFormat,
    rows: usize,
    cols: usize,
    raw: Vec<i128>,
    #[serde(skip)]
    taps: std::sync::OnceLock<Vec<Vec<(u32, i128)>>>,
}

impl PartialEq for FxMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.fmt == other.fmt
            && self.rows == other.rows
            && self.cols == other.cols
            && self.raw == other.raw
    }
}

impl Eq for FxMatrix {}

impl FxMatrix {
    pub fn zeros(rows: usize, cols: usize, fmt: FxFormat) -> Self {
        Self {
            fmt,
            rows,
            cols,
            raw: vec![0; rows * cols],
            taps: std::sync::OnceLock::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn format(&self) -> FxFormat {
        self.fmt
    }

    pub fn raw_at(&self, r: usize, c: usize) -> i128 {
        self.raw[r * self.cols + c]
    }

    pub fn set_raw(&mut self, r: usize, c: usize, raw: i128) -> Result<(), FxError> {
        FxScalar::from_raw(raw, self.fmt)?;
        self.raw[r * self.cols + c] = raw;
        self.taps = std::sync::OnceLock::new();
        Ok(())
    }

    pub fn set_int(&mut self, r: usize, c: usize, v: i64) -> Result<(), FxError> {
        self.set_raw(r, c, (v as i128) << self.fmt.fraction_bits)
    }

    pub fn add_int(&mut self, r: usize, c: usize, v: i64) -> Result<(), FxError> {
        let cur = self.raw_at(r, c);
        self.set_raw(r, c, cur + ((v as i128) << self.fmt.fraction_bits))
    }

    pub fn iter_raw_mut(&mut self) -> impl Iterator<Item = &mut i128> {
        self.taps = std::sync::OnceLock::new();
        self.raw.iter_mut()
    }

    fn row_taps(&self) -> &Vec<Vec<(u32, i128)>> {
        self.taps.get_or_init(|| {
            (0..self.rows)
                .map(|r| {
                    self.raw[r * self.cols..(r + 1) * self.cols]
                        .iter()
                        .enumerate()
                        .filter(|(_, &w)| w != 0)
                        .map(|(c, &w)| (c as u32, w))
                        .collect()
                })
                .collect()
        })
    }

    pub fn matvec(&self, x: &FxVector) -> Result<FxVector, FxError> {
        if x.len() != self.cols {
            return Err(FxError::LengthMismatch(self.cols, x.len()));
        }
        let mut out = FxVector::zeros(self.rows, self.fmt);
        for (r, taps) in self.row_taps().iter().enumerate() {
            let mut acc = 0i128;
            for &(c, w) in taps {
                let b = x.raw[c as usize];
                if b == 0 {
                    continue;
                }
                acc = fxp::mac_raw(acc, w, b, self.fmt, "matvec")?;
            }
            out.raw[r] = acc;
        }
        Ok(out)
    }

    /// All stored entries within the format range (true by construction; used
    /// as a load-time validation for deserialized programs).
    pub fn entries_in_range(&self) -> bool {
        self.raw.iter().all(|r| r.abs() < self.fmt.raw_bound())
    }
}
