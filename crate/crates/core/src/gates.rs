//! Two-layer ReLU feedforward constructions: unbounded fan-in logic gates,
//! majority/threshold gates, arbitrary bounded-arity symbol functions, and
//! the one-hot commit map.
//!
//! Logic gates take inputs interleaved with constant-1 slots,
//! `(x_1, 1, x_2, 1, ..., x_n, 1)`; thresholds are realized by spending the
//! one-slots with unit coefficients, so every gate weight lies in {-1, 0, 1}
//! and the bias vector stays zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::{FxError, FxFormat, FxScalar};
use crate::graph::LocalFn;
use crate::linalg::{FxMatrix, FxVector};

#[derive(Debug, Error)]
pub enum GateError {
    #[error("arity {arity} exceeds the configured fan-in bound {bound}")]
    ArityExceedsBound { arity: usize, bound: usize },
    #[error("margin violated: {above} coordinates at or above the 1-delta threshold")]
    MarginViolation { above: usize },
    #[error(transparent)]
    Fx(#[from] FxError),
}

/// Declared weight-magnitude class of a construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrecisionClass {
    ConstantBit,
    LogBit,
}

/// A two-layer ReLU network: `y = W2 * ReLU(W1 x + b1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FFWeights {
    pub w1: FxMatrix,
    pub b1: FxVector,
    pub w2: FxMatrix,
    pub class: PrecisionClass,
}

impl FFWeights {
    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn apply(&self, x: &FxVector) -> Result<FxVector, FxError> {
        let h = self.w1.matvec(x)?.add(&self.b1)?;
        self.w2.matvec(&h.relu())
    }
}

/// Interleave boolean inputs with constant-1 slots as the gate interface
/// expects.
pub fn interleaved_input(bits: &[bool], fmt: FxFormat) -> Result<FxVector, FxError> {
    let mut v = FxVector::zeros(2 * bits.len(), fmt);
    for (i, &b) in bits.iter().enumerate() {
        v.set(2 * i, FxScalar::from_int(b as i64, fmt)?);
        v.set(2 * i + 1, FxScalar::one(fmt));
    }
    Ok(v)
}

/// Shared builder: output = ReLU(s - (k-1)) - ReLU(s - k) where s is the sum
/// of the value slots; exactly the indicator of s >= k on integer s in [0, n].
/// Thresholds are paid with -1 coefficients on one-slots, so k-1 and k must
/// not exceed n.
fn threshold_units(n: usize, k: usize, fmt: FxFormat, class: PrecisionClass) -> FFWeights {
    assert!(k <= n, "threshold k={k} beyond fan-in n={n}");
    let mut w1 = FxMatrix::zeros(2, 2 * n, fmt);
    for i in 0..n {
        w1.set_int(0, 2 * i, 1).unwrap();
        w1.set_int(1, 2 * i, 1).unwrap();
    }
    // row 0 subtracts k-1 ones, row 1 subtracts k ones; k = 0 instead adds one
    if k == 0 {
        w1.set_int(0, 1, 1).unwrap();
    } else {
        for i in 0..(k - 1) {
            w1.set_int(0, 2 * i + 1, -1).unwrap();
        }
        for i in 0..k {
            w1.set_int(1, 2 * i + 1, -1).unwrap();
        }
    }
    let b1 = FxVector::zeros(2, fmt);
    let mut w2 = FxMatrix::zeros(1, 2, fmt);
    w2.set_int(0, 0, 1).unwrap();
    w2.set_int(0, 1, -1).unwrap();
    FFWeights { w1, b1, w2, class }
}

/// Unbounded fan-in AND on n inputs: ReLU(sum x_i - (n-1)).
pub fn ff_and(n: usize, fmt: FxFormat) -> FFWeights {
    assert!(n >= 1);
    let mut w1 = FxMatrix::zeros(1, 2 * n, fmt);
    for i in 0..n {
        w1.set_int(0, 2 * i, 1).unwrap();
    }
    for i in 0..(n - 1) {
        w1.set_int(0, 2 * i + 1, -1).unwrap();
    }
    let mut w2 = FxMatrix::zeros(1, 1, fmt);
    w2.set_int(0, 0, 1).unwrap();
    FFWeights {
        w1,
        b1: FxVector::zeros(1, fmt),
        w2,
        class: PrecisionClass::ConstantBit,
    }
}

/// Unbounded fan-in OR on n inputs.
pub fn ff_or(n: usize, fmt: FxFormat) -> FFWeights {
    assert!(n >= 1);
    threshold_units(n, 1, fmt, PrecisionClass::ConstantBit)
}

/// NOT on a single input: ReLU(1 - x).
pub fn ff_not(fmt: FxFormat) -> FFWeights {
    let mut w1 = FxMatrix::zeros(1, 2, fmt);
    w1.set_int(0, 0, -1).unwrap();
    w1.set_int(0, 1, 1).unwrap();
    let mut w2 = FxMatrix::zeros(1, 1, fmt);
    w2.set_int(0, 0, 1).unwrap();
    FFWeights {
        w1,
        b1: FxVector::zeros(1, fmt),
        w2,
        class: PrecisionClass::ConstantBit,
    }
}

/// Indicator of sum x_i >= k, clamped to {0,1} by the two-unit construction.
pub fn ff_threshold(n: usize, k: usize, fmt: FxFormat) -> FFWeights {
    assert!(n >= 1);
    threshold_units(n, k, fmt, PrecisionClass::LogBit)
}

/// Majority: threshold at floor(n/2) + 1.
pub fn ff_majority(n: usize, fmt: FxFormat) -> FFWeights {
    ff_threshold(n, n / 2 + 1, fmt)
}

/// Table-driven symbol function on concatenated one-hot inputs: one hidden
/// unit per input combination firing on exact match, summed into the one-hot
/// of the function value. The output is an exact one-hot, so it meets the
/// margin condition with delta = 1/4 with room to spare.
pub fn table_function(
    f: &LocalFn,
    alphabet_len: usize,
    max_fan_in: usize,
    fmt: FxFormat,
) -> Result<FFWeights, GateError> {
    if f.arity > max_fan_in {
        return Err(GateError::ArityExceedsBound {
            arity: f.arity,
            bound: max_fan_in,
        });
    }
    let patterns = alphabet_len.pow(f.arity as u32);
    debug_assert_eq!(f.table.len(), patterns);
    let in_dim = f.arity * alphabet_len;
    let mut w1 = FxMatrix::zeros(patterns, in_dim.max(1), fmt);
    let mut b1 = FxVector::zeros(patterns, fmt);
    let mut w2 = FxMatrix::zeros(alphabet_len, patterns, fmt);
    for unit in 0..patterns {
        // decode the pattern, first argument most significant
        let mut rest = unit;
        let mut pattern = vec![0usize; f.arity];
        for c in (0..f.arity).rev() {
            pattern[c] = rest % alphabet_len;
            rest /= alphabet_len;
        }
        for (c, &sym) in pattern.iter().enumerate() {
            w1.set_int(unit, c * alphabet_len + sym, 1)?;
        }
        b1.set(
            unit,
            FxScalar::from_int(1 - f.arity as i64, fmt)?,
        );
        w2.set_int(f.table[unit], unit, 1)?;
    }
    Ok(FFWeights {
        w1,
        b1,
        w2,
        class: PrecisionClass::ConstantBit,
    })
}

/// The one-hot commit map with delta = 2^-delta_log2: elementwise
/// ReLU(y_i - (1-delta)), rescaled and clamped to [0,1] via
/// ReLU(1 - ReLU(1 - scale * t)). The rescale uses the full fraction width
/// 2^F (>= 1/delta), so any coordinate strictly above the threshold (at F
/// fraction bits, above it by at least 2^-F) lands on exactly 1
/// and every other coordinate on exactly 0.
pub fn onehot_threshold(x: &FxVector, delta_log2: u32) -> Result<FxVector, FxError> {
    let fmt = x.format();
    assert!(
        delta_log2 >= 1 && delta_log2 <= fmt.fraction_bits,
        "delta must be a representable power of two"
    );
    let one = fmt.scale();
    let one_minus_delta = one - (one >> delta_log2);
    let mut out = FxVector::zeros(x.len(), fmt);
    for i in 0..x.len() {
        let t = (x.raw_at(i) - one_minus_delta).max(0);
        let scaled = t << fmt.fraction_bits;
        let clamped = one - (one - scaled).max(0);
        out.set_raw(i, clamped.max(0))?;
    }
    Ok(out)
}

/// Verification-mode commit: checks the margin condition (exactly one
/// coordinate strictly above 1-delta, all others strictly below) before
/// applying the map.
pub fn onehot_threshold_checked(x: &FxVector, delta_log2: u32) -> Result<FxVector, GateError> {
    let fmt = x.format();
    let one_minus_delta = fmt.scale() - (fmt.scale() >> delta_log2);
    let above = (0..x.len())
        .filter(|&i| x.raw_at(i) >= one_minus_delta)
        .count();
    if above != 1 {
        return Err(GateError::MarginViolation { above });
    }
    Ok(onehot_threshold(x, delta_log2)?)
}
