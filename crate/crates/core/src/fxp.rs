//! Exact truncated fixed-point arithmetic and the index encodings used by
//! compiled transformer programs.
//!
//! Every scalar is a signed integer `raw` interpreted as `raw / 2^fraction_bits`.
//! Arithmetic is performed exactly on raw integers and re-truncated toward zero
//! after each primitive operation (one truncation per fused multiply-accumulate
//! for inner products). Overflow is always detected, never wrapped.

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cap on `integer_bits + fraction_bits` so raw products and fused
/// multiply-accumulates stay inside `i128`.
pub const MAX_TOTAL_BITS: u32 = 62;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FxError {
    #[error("overflow in {op}: result exceeds the {bits}-bit integer range of the format")]
    Overflow { op: &'static str, bits: u32 },
    #[error("format mismatch between operands")]
    FormatMismatch,
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("index {index} out of range for {s} bits")]
    IndexOutOfRange { index: u64, s: u32 },
    #[error("invalid format: integer_bits={integer_bits}, fraction_bits={fraction_bits}")]
    BadFormat { integer_bits: u32, fraction_bits: u32 },
}

/// Shared number format: `integer_bits` to the left of the binary point,
/// `fraction_bits` to the right. All scalars of one program share one format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FxFormat {
    pub integer_bits: u32,
    pub fraction_bits: u32,
}

impl FxFormat {
    pub fn new(integer_bits: u32, fraction_bits: u32) -> Result<Self, FxError> {
        if integer_bits < 1 || integer_bits + fraction_bits > MAX_TOTAL_BITS {
            return Err(FxError::BadFormat {
                integer_bits,
                fraction_bits,
            });
        }
        Ok(Self {
            integer_bits,
            fraction_bits,
        })
    }

    /// 2^fraction_bits: raw units per 1.0.
    pub fn scale(&self) -> i128 {
        1i128 << self.fraction_bits
    }

    /// Exclusive bound on |raw|: representable values satisfy |v| < 2^integer_bits.
    pub fn raw_bound(&self) -> i128 {
        1i128 << (self.integer_bits + self.fraction_bits)
    }
}

/// A fixed-point number: value = raw / 2^fraction_bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FxScalar {
    raw: i128,
    fmt: FxFormat,
}

#[inline]
fn check_raw(raw: i128, fmt: FxFormat, op: &'static str) -> Result<i128, FxError> {
    if raw.abs() >= fmt.raw_bound() {
        Err(FxError::Overflow {
            op,
            bits: fmt.integer_bits,
        })
    } else {
        Ok(raw)
    }
}

/// Truncate `num / den` toward zero (`den > 0`). Rust integer division
/// already truncates toward zero; this names the intent.
#[inline]
pub fn div_trunc(num: i128, den: i128) -> i128 {
    num / den
}

impl FxScalar {
    pub fn zero(fmt: FxFormat) -> Self {
        Self { raw: 0, fmt }
    }

    pub fn one(fmt: FxFormat) -> Self {
        Self {
            raw: fmt.scale(),
            fmt,
        }
    }

    pub fn from_raw(raw: i128, fmt: FxFormat) -> Result<Self, FxError> {
        Ok(Self {
            raw: check_raw(raw, fmt, "from_raw")?,
            fmt,
        })
    }

    pub fn from_int(v: i64, fmt: FxFormat) -> Result<Self, FxError> {
        let raw = (v as i128) << fmt.fraction_bits;
        Ok(Self {
            raw: check_raw(raw, fmt, "from_int")?,
            fmt,
        })
    }

    pub fn raw(&self) -> i128 {
        self.raw
    }

    pub fn format(&self) -> FxFormat {
        self.fmt
    }

    pub fn value_f64(&self) -> f64 {
        self.raw as f64 / self.fmt.scale() as f64
    }

    pub fn is_zero(&self) -> bool {
        self.raw == 0
    }
}

/// Truncate the exact rational `num/den` (`den != 0`) into `fmt`.
/// Idempotent on already-representable values; truncation is toward zero.
pub fn quantize(num: i64, den: i64, fmt: FxFormat) -> Result<FxScalar, FxError> {
    assert!(den != 0, "quantize: zero denominator");
    let (num, den) = if den < 0 {
        (-(num as i128), -(den as i128))
    } else {
        (num as i128, den as i128)
    };
    // precondition |num/den| < 2^integer_bits, checked exactly
    if num.abs() >= (1i128 << fmt.integer_bits) * den {
        return Err(FxError::Overflow {
            op: "quantize",
            bits: fmt.integer_bits,
        });
    }
    let raw = div_trunc(num * fmt.scale(), den);
    Ok(FxScalar { raw, fmt })
}

fn same_fmt(a: FxScalar, b: FxScalar) -> Result<FxFormat, FxError> {
    if a.fmt != b.fmt {
        Err(FxError::FormatMismatch)
    } else {
        Ok(a.fmt)
    }
}

/// Exact sum; a sum of two F-bit-fraction values is already representable,
/// so the post-operation truncation is the identity.
pub fn fx_add(a: FxScalar, b: FxScalar) -> Result<FxScalar, FxError> {
    let fmt = same_fmt(a, b)?;
    Ok(FxScalar {
        raw: check_raw(a.raw + b.raw, fmt, "fx_add")?,
        fmt,
    })
}

/// Exact product truncated once toward zero.
pub fn fx_mul(a: FxScalar, b: FxScalar) -> Result<FxScalar, FxError> {
    let fmt = same_fmt(a, b)?;
    Ok(FxScalar {
        raw: mul_raw(a.raw, b.raw, fmt, "fx_mul")?,
        fmt,
    })
}

#[inline]
pub(crate) fn mul_raw(a: i128, b: i128, fmt: FxFormat, op: &'static str) -> Result<i128, FxError> {
    check_raw(div_trunc(a * b, fmt.scale()), fmt, op)
}

/// One fused multiply-accumulate step: `acc + a*b` computed exactly, then
/// truncated once toward zero.
#[inline]
pub(crate) fn mac_raw(
    acc: i128,
    a: i128,
    b: i128,
    fmt: FxFormat,
    op: &'static str,
) -> Result<i128, FxError> {
    let wide = acc * fmt.scale() + a * b;
    check_raw(div_trunc(wide, fmt.scale()), fmt, op)
}

/// Inner product with one truncation per fused multiply-accumulate step.
pub fn fx_inner(a: &[FxScalar], b: &[FxScalar]) -> Result<FxScalar, FxError> {
    if a.len() != b.len() {
        return Err(FxError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        panic!("fx_inner: empty operands have no format");
    }
    let fmt = same_fmt(a[0], b[0])?;
    let mut acc = 0i128;
    for (x, y) in a.iter().zip(b.iter()) {
        same_fmt(*x, *y)?;
        acc = mac_raw(acc, x.raw, y.raw, fmt, "fx_inner")?;
    }
    Ok(FxScalar { raw: acc, fmt })
}

/// Truncated exponential: the exact value of exp(a) truncated toward zero at
/// `fraction_bits`. `exp(0) = 1` exactly; sufficiently negative inputs
/// truncate to zero; large positive inputs overflow.
pub fn fx_exp(a: FxScalar) -> Result<FxScalar, FxError> {
    let fmt = a.fmt;
    if a.raw == 0 {
        return Ok(FxScalar::one(fmt));
    }
    let scale = fmt.scale();
    if a.raw < 0 {
        // exp(v) < 2^-F whenever v <= -max(F,1) since F >= F*ln2 (strict for F >= 1),
        // and for F = 0 any negative v gives exp(v) < 1.
        let cut = (fmt.fraction_bits.max(1) as i128) * scale;
        if -a.raw >= cut {
            return Ok(FxScalar::zero(fmt));
        }
    } else {
        // exp(v) >= e^I > 2^I for v >= I: certain overflow without computing.
        if a.raw >= (fmt.integer_bits as i128) * scale {
            return Err(FxError::Overflow {
                op: "fx_exp",
                bits: fmt.integer_bits,
            });
        }
    }
    exp_truncated(a)
}

/// Rigorous enclosure of exp(value)*2^F via a Taylor partial sum with a
/// geometric remainder bound; refined until the enclosure pins the floor.
/// The target is irrational for nonzero rational inputs, so this terminates.
fn exp_truncated(a: FxScalar) -> Result<FxScalar, FxError> {
    let fmt = a.fmt;
    let v = BigRational::new(BigInt::from(a.raw), BigInt::from(fmt.scale()));
    let t = v.abs();
    let scale = BigRational::from(BigInt::from(fmt.scale()));
    let mut n_terms: usize = 8;
    loop {
        // S = sum_{k=0}^{N} t^k / k!, remainder R in (0, t^{N+1}/(N+1)! * 1/(1 - t/(N+2)))
        let mut term = BigRational::one();
        let mut sum = BigRational::one();
        for k in 1..=n_terms {
            term = term * &t / BigRational::from(BigInt::from(k as i64));
            sum += &term;
        }
        let n2 = BigRational::from(BigInt::from((n_terms + 2) as i64));
        if t >= n2 {
            n_terms *= 2;
            continue;
        }
        let rem = term * &t / BigRational::from(BigInt::from((n_terms + 1) as i64))
            / (BigRational::one() - &t / n2);
        let (lo, hi) = if a.raw > 0 {
            ((&sum) * &scale, (&sum + &rem) * &scale)
        } else {
            // exp(-t) = 1/exp(t) in (1/(S+R), 1/S)
            (
                scale.clone() / (&sum + &rem),
                scale.clone() / &sum,
            )
        };
        let lo_floor = lo.numer().div_floor(lo.denom());
        let hi_floor = hi.numer().div_floor(hi.denom());
        if lo_floor == hi_floor {
            let raw = lo_floor
                .to_i128()
                .ok_or(FxError::Overflow {
                    op: "fx_exp",
                    bits: fmt.integer_bits,
                })?;
            return Ok(FxScalar {
                raw: check_raw(raw, fmt, "fx_exp")?,
                fmt,
            });
        }
        n_terms += 8;
    }
}

/// Ceiling of log2(x) for x >= 1.
pub fn ceil_log2(x: u64) -> u32 {
    assert!(x >= 1);
    64 - (x - 1).leading_zeros().min(63) - if x == 1 { 1 } else { 0 }
}

/// Bit sequence over {0,1} or {-1,+1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitVector {
    pub bits: Vec<i8>,
}

impl BitVector {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// LSB-first binary representation: bit index i (0-based) carries weight 2^i.
pub fn bin(x: u64, s: u32) -> Result<BitVector, FxError> {
    if s < 64 && x >= (1u64 << s) {
        return Err(FxError::IndexOutOfRange { index: x, s });
    }
    Ok(BitVector {
        bits: (0..s).map(|i| ((x >> i) & 1) as i8).collect(),
    })
}

/// Signed binary: sbin(x) = 2*bin(x) - (1,...,1), entries in {-1,+1}.
pub fn sbin(x: u64, s: u32) -> Result<BitVector, FxError> {
    let b = bin(x, s)?;
    Ok(BitVector {
        bits: b.bits.iter().map(|&b| 2 * b - 1).collect(),
    })
}

/// Decode an LSB-first 0/1 bit vector back to the integer it encodes.
pub fn bit_decode(bv: &BitVector) -> u64 {
    bv.bits
        .iter()
        .enumerate()
        .map(|(i, &b)| (b as u64) << i)
        .sum()
}

/// Alternate components: result[2i] = x[i], result[2i+1] = y[i].
pub fn interleave<T: Copy>(x: &[T], y: &[T]) -> Result<Vec<T>, FxError> {
    if x.len() != y.len() {
        return Err(FxError::LengthMismatch(x.len(), y.len()));
    }
    let mut out = Vec::with_capacity(2 * x.len());
    for (a, b) in x.iter().zip(y.iter()) {
        out.push(*a);
        out.push(*b);
    }
    Ok(out)
}

fn sbin_i64(x: u64, s: u32) -> Result<Vec<i64>, FxError> {
    Ok(sbin(x, s)?.bits.iter().map(|&b| b as i64).collect())
}

/// Query vector of the selector pair: interleave(sbin_s(i), 1_s).
/// Valid for 1 <= i <= 2^s - 1.
pub fn ortho_query(i: u64, s: u32) -> Result<Vec<i64>, FxError> {
    if i < 1 || (s < 64 && i >= (1u64 << s)) {
        return Err(FxError::IndexOutOfRange { index: i, s });
    }
    interleave(&sbin_i64(i, s)?, &vec![1i64; s as usize])
}

/// Key vector of the selector pair: 2^{s+1} * interleave(sbin_s(j), -1_s).
/// Valid for 1 <= j <= 2^s - 1.
pub fn ortho_key(j: u64, s: u32) -> Result<Vec<i64>, FxError> {
    if j < 1 || (s < 64 && j >= (1u64 << s)) {
        return Err(FxError::IndexOutOfRange { index: j, s });
    }
    let k = 1i64 << (s + 1);
    Ok(interleave(&sbin_i64(j, s)?, &vec![-1i64; s as usize])?
        .into_iter()
        .map(|v| k * v)
        .collect())
}

/// Format wide enough for selector arithmetic at parameter s: scores reach
/// 2^{s+2} * s in magnitude and keys carry the 2^{s+1} scaling, plus one
/// guard bit.
pub fn selector_format(s: u32) -> Result<FxFormat, FxError> {
    let integer_bits = s + 3 + ceil_log2(s.max(1) as u64) + 1;
    FxFormat::new(integer_bits, s)
}

/// The selector value [[exp(<q_i, k_j>_s)]]: exactly 1 when i = j and
/// exactly 0 otherwise, for all i, j in [2^s - 1].
pub fn selector_value(i: u64, j: u64, s: u32) -> Result<FxScalar, FxError> {
    let fmt = selector_format(s)?;
    let q: Vec<FxScalar> = ortho_query(i, s)?
        .iter()
        .map(|&v| FxScalar::from_int(v, fmt))
        .collect::<Result<_, _>>()?;
    let k: Vec<FxScalar> = ortho_key(j, s)?
        .iter()
        .map(|&v| FxScalar::from_int(v, fmt))
        .collect::<Result<_, _>>()?;
    fx_exp(fx_inner(&q, &k)?)
}
