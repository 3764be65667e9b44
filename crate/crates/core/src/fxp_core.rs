//! Fixed-point primitives shared by training and inference.
//!
//! Every rounding step in the crate goes through [`round_half_away`] (or its
//! integer twin [`shift_round_half_away`]), so the floating-point simulation
//! and the integer engine agree bit for bit.
//!
//! Unit-range codes follow a two-stage mapping: a real `w` in `[-1, 1]` maps to
//! the unsigned grid index `u = round(2^(b-1) * (w + 1))`, clamped to
//! `[0, 2^b - 1]`, and is stored as the signed two's-complement value
//! `u - 2^(b-1)` with `q = b - 1`. Dequantization is the exact inverse on the
//! grid: `u * 2^-(b-1) - 1`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on `|w| <= 1` before [`quantize_unit`] rejects its input.
pub const UNIT_RANGE_SLACK: f64 = 1e-9;

/// Number of bits of a quantized value, `2..=16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct BitWidth(u8);

impl BitWidth {
    pub const MIN: u32 = 2;
    pub const MAX: u32 = 16;

    pub fn new(bits: u32) -> Result<Self> {
        if (Self::MIN..=Self::MAX).contains(&bits) {
            Ok(Self(bits as u8))
        } else {
            Err(Error::InvalidBitWidth(bits))
        }
    }

    pub const fn get(self) -> u32 {
        self.0 as u32
    }

    /// `2^(b-1)`, the offset between unsigned grid indices and signed codes.
    pub const fn half_range(self) -> i64 {
        1 << (self.0 - 1)
    }

    pub const fn min_code(self) -> i64 {
        -self.half_range()
    }

    pub const fn max_code(self) -> i64 {
        self.half_range() - 1
    }

    pub fn clamp(self, v: i64) -> i64 {
        v.clamp(self.min_code(), self.max_code())
    }

    pub fn contains(self, v: i64) -> bool {
        (self.min_code()..=self.max_code()).contains(&v)
    }

    /// Fractional bits of a unit-range code at this width.
    pub fn unit_q(self) -> QFormat {
        QFormat(self.0 - 1)
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = Error;
    fn try_from(v: u32) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.get()
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-bit", self.0)
    }
}

/// Number of fractional bits, `0..=30`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct QFormat(u8);

impl QFormat {
    pub const MAX: u32 = 30;

    pub fn new(q: u32) -> Result<Self> {
        if q <= Self::MAX {
            Ok(Self(q as u8))
        } else {
            Err(Error::InvalidQFormat(q as i64))
        }
    }

    pub const fn get(self) -> u32 {
        self.0 as u32
    }

    /// `2^q` as a float; exact for every valid q.
    pub fn scale(self) -> f64 {
        (self.0 as f64).exp2()
    }
}

impl TryFrom<u32> for QFormat {
    type Error = Error;
    fn try_from(v: u32) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QFormat> for u32 {
    fn from(q: QFormat) -> u32 {
        q.get()
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}", self.0)
    }
}

/// A single fixed-point value: a signed integer code tagged with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FxpCode {
    value: i32,
    bits: BitWidth,
    q: QFormat,
}

impl FxpCode {
    pub fn new(value: i64, bits: BitWidth, q: QFormat) -> Result<Self> {
        if !bits.contains(value) {
            return Err(Error::InvalidInput(format!(
                "code {value} does not fit in {bits}"
            )));
        }
        Ok(Self { value: value as i32, bits, q })
    }

    pub const fn value(self) -> i32 {
        self.value
    }

    pub const fn bits(self) -> BitWidth {
        self.bits
    }

    pub const fn q(self) -> QFormat {
        self.q
    }
}

/// Rounding used when converting features to q-format codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingConvention {
    /// `c = +0.5` for `f >= 0`, `-0.5` otherwise, then truncate: round half away from zero.
    #[default]
    HalfAway,
    /// `c = +0.5` for `f < 0`, `-0.5` otherwise, then truncate: pulls magnitudes toward zero.
    SignFlipped,
}

/// Round half away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    // f64::round breaks ties away from zero.
    x.round()
}

/// `round_half_away(v / 2^shift)` on integers.
#[inline]
pub fn shift_round_half_away(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    let bias = 1i64 << (shift - 1);
    if v >= 0 {
        (v + bias) >> shift
    } else {
        -((-v + bias) >> shift)
    }
}

/// Move an integer from `from_q` to `to_q` fractional bits.
///
/// Down-shifts round half away from zero; up-shifts are exact.
#[inline]
pub fn requantize(v: i64, from_q: i32, to_q: i32) -> i64 {
    if to_q <= from_q {
        shift_round_half_away(v, (from_q - to_q) as u32)
    } else {
        v << (to_q - from_q)
    }
}

/// Unsigned grid index for a unit-range value, before the signed offset.
#[inline]
pub(crate) fn unit_grid_index(w: f64, bits: BitWidth) -> i64 {
    let w = w.clamp(-1.0, 1.0);
    let half = bits.half_range() as f64;
    let u = round_half_away(half * (w + 1.0)) as i64;
    u.clamp(0, 2 * bits.half_range() - 1)
}

/// Quantize a unit-range real to a signed `b`-bit code with `q = b - 1`.
pub fn quantize_unit(w: f64, bits: BitWidth) -> Result<FxpCode> {
    if !w.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite weight {w}")));
    }
    if w.abs() > 1.0 + UNIT_RANGE_SLACK {
        return Err(Error::InvalidInput(format!("weight {w} outside [-1, 1]")));
    }
    let u = unit_grid_index(w, bits);
    FxpCode::new(u - bits.half_range(), bits, bits.unit_q())
}

/// Inverse of [`quantize_unit`] on the grid.
pub fn dequantize_unit(c: FxpCode) -> f64 {
    let u = c.value as i64 + c.bits.half_range();
    u as f64 / c.bits.half_range() as f64 - 1.0
}

/// Quantize a real to a signed `b`-bit code with `q` fractional bits, rounding half away.
pub fn quantize_qformat(f: f64, bits: BitWidth, q: QFormat) -> Result<FxpCode> {
    quantize_qformat_with(f, bits, q, RoundingConvention::HalfAway)
}

pub fn quantize_qformat_with(
    f: f64,
    bits: BitWidth,
    q: QFormat,
    rounding: RoundingConvention,
) -> Result<FxpCode> {
    if !f.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite feature {f}")));
    }
    let c = match (rounding, f >= 0.0) {
        (RoundingConvention::HalfAway, true) | (RoundingConvention::SignFlipped, false) => 0.5,
        _ => -0.5,
    };
    let scaled = (f * q.scale() + c).trunc();
    let code = scaled.clamp(bits.min_code() as f64, bits.max_code() as f64) as i64;
    FxpCode::new(code, bits, q)
}

pub fn dequantize_qformat(c: FxpCode) -> f64 {
    c.value as f64 / c.q.scale()
}

/// Largest q for which `max_abs * 2^q <= 2^(b-1)`, floored at zero and capped at 30.
pub fn select_qformat(max_abs: f64, bits: BitWidth) -> Result<QFormat> {
    if !max_abs.is_finite() || max_abs <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "max_abs must be positive and finite, got {max_abs}"
        )));
    }
    // ceil(log2(max_abs)), corrected against exact powers of two.
    let mut k = max_abs.log2().ceil() as i64;
    while (k as f64).exp2() < max_abs {
        k += 1;
    }
    while ((k - 1) as f64).exp2() >= max_abs {
        k -= 1;
    }
    let q = (bits.get() as i64 - 1 - k).clamp(0, QFormat::MAX as i64);
    QFormat::new(q as u32)
}

/// Shift a code to fewer fractional bits and saturate to `to_bits`.
pub fn rescale(c: FxpCode, to_bits: BitWidth, to_q: QFormat) -> Result<FxpCode> {
    if to_q > c.q {
        return Err(Error::InvalidRescale { from: c.q.0, to: to_q.0 });
    }
    let v = shift_round_half_away(c.value as i64, c.q.get() - to_q.get());
    FxpCode::new(to_bits.clamp(v), to_bits, to_q)
}

/// A saturating accumulator of `bits` width that counts its clamp events.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accumulator {
    acc: i64,
    bits: u32,
    sat_count: u64,
}

impl Accumulator {
    pub const DEFAULT_BITS: u32 = 16;

    pub fn new(bits: u32) -> Result<Self> {
        Self::with_value(0, bits)
    }

    pub fn with_value(acc: i64, bits: u32) -> Result<Self> {
        if !(2..=62).contains(&bits) {
            return Err(Error::Config(format!("accumulator width {bits} outside 2..=62")));
        }
        let a = Self { acc: 0, bits, sat_count: 0 };
        if acc < a.min() || acc > a.max() {
            return Err(Error::InvalidInput(format!(
                "{acc} does not fit a {bits}-bit accumulator"
            )));
        }
        Ok(Self { acc, ..a })
    }

    pub const fn value(self) -> i64 {
        self.acc
    }

    pub const fn bits(self) -> u32 {
        self.bits
    }

    pub const fn sat_count(self) -> u64 {
        self.sat_count
    }

    pub const fn max(self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    pub const fn min(self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    /// Reset the running sum, keeping the saturation count.
    pub fn reset(&mut self) -> i64 {
        std::mem::take(&mut self.acc)
    }

    /// In-place saturating add; returns whether the sum was clamped.
    #[inline]
    pub fn add(&mut self, x: i64) -> bool {
        let sum = self.acc.saturating_add(x);
        let clamped = sum.clamp(self.min(), self.max());
        self.acc = clamped;
        if clamped != sum {
            self.sat_count += 1;
            true
        } else {
            false
        }
    }
}

/// Functional saturating add.
pub fn sat_add(mut acc: Accumulator, x: i64) -> Accumulator {
    acc.add(x);
    acc
}

/// A dense tensor of fixed-point codes sharing one format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FxpTensor {
    shape: Vec<usize>,
    codes: Vec<i32>,
    bits: BitWidth,
    q: QFormat,
}

impl FxpTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<i32>, bits: BitWidth, q: QFormat) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != codes.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                codes.len()
            )));
        }
        if let Some(bad) = codes.iter().find(|&&c| !bits.contains(c as i64)) {
            return Err(Error::InvalidInput(format!("code {bad} does not fit in {bits}")));
        }
        Ok(Self { shape, codes, bits, q })
    }

    pub fn zeros(shape: Vec<usize>, bits: BitWidth, q: QFormat) -> Self {
        let n = shape.iter().product();
        Self { shape, codes: vec![0; n], bits, q }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn q(&self) -> QFormat {
        self.q
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<FxpCode> {
        self.codes.get(i).map(|&value| FxpCode { value, bits: self.bits, q: self.q })
    }

    /// Real values under the plain q-format reading `code * 2^-q`.
    pub fn dequantize(&self) -> Vec<f64> {
        let s = self.q.scale();
        self.codes.iter().map(|&c| c as f64 / s).collect()
    }

    /// Quantize reals with [`quantize_qformat`].
    pub fn from_reals(shape: Vec<usize>, data: &[f64], bits: BitWidth, q: QFormat) -> Result<Self> {
        let codes = data
            .iter()
            .map(|&f| quantize_qformat(f, bits, q).map(|c| c.value))
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, codes, bits, q)
    }

    /// Quantize unit-range reals with [`quantize_unit`].
    pub fn from_unit_reals(shape: Vec<usize>, data: &[f64], bits: BitWidth) -> Result<Self> {
        let codes = data
            .iter()
            .map(|&w| quantize_unit(w, bits).map(|c| c.value))
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, codes, bits, bits.unit_q())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(n: u32) -> BitWidth {
        BitWidth::new(n).unwrap()
    }

    fn q(n: u32) -> QFormat {
        QFormat::new(n).unwrap()
    }

    // Oracle for the unit quantizer: search the grid for the nearest point,
    // breaking ties toward the larger index, then apply the top clamp.
    fn brute_force_unit_code(w: f64, bits: u32) -> i64 {
        let half = 1i64 << (bits - 1);
        let target = (w + 1.0) * half as f64;
        let mut best = 0i64;
        let mut best_d = f64::INFINITY;
        for u in 0..=(2 * half) {
            let d = (u as f64 - target).abs();
            if d < best_d || (d == best_d && u > best) {
                best = u;
                best_d = d;
            }
        }
        best.min(2 * half - 1) - half
    }

    #[test]
    fn bit_width_range() {
        assert!(BitWidth::new(1).is_err());
        assert!(BitWidth::new(17).is_err());
        assert_eq!(b(8).min_code(), -128);
        assert_eq!(b(8).max_code(), 127);
        assert!(QFormat::new(31).is_err());
    }

    #[test]
    fn quantize_unit_examples() {
        assert_eq!(quantize_unit(-1.0, b(8)).unwrap().value(), -128);
        assert_eq!(quantize_unit(0.0, b(8)).unwrap().value(), 0);
        assert_eq!(quantize_unit(0.999, b(8)).unwrap().value(), 127);
        assert_eq!(brute_force_unit_code(0.999, 8), 127);
        assert_eq!(quantize_unit(0.999, b(8)).unwrap().q(), q(7));
    }

    #[test]
    fn quantize_unit_errors() {
        assert!(quantize_unit(f64::NAN, b(8)).is_err());
        assert!(quantize_unit(1.5, b(8)).is_err());
        assert_eq!(quantize_unit(1.0 + 1e-10, b(8)).unwrap().value(), 127);
    }

    #[test]
    fn dequantize_unit_examples() {
        let c = |v| FxpCode::new(v, b(8), q(7)).unwrap();
        assert_eq!(dequantize_unit(c(0)), 0.0);
        assert_eq!(dequantize_unit(c(-128)), -1.0);
        assert_eq!(dequantize_unit(c(-64)), -0.5);
    }

    #[test]
    fn quantize_qformat_examples() {
        assert_eq!(quantize_qformat(0.0, b(8), q(4)).unwrap().value(), 0);
        assert_eq!(quantize_qformat(-100.0, b(8), q(4)).unwrap().value(), -128);
        // 0.53 * 16 = 8.48 -> nearest integer 8.
        assert_eq!(quantize_qformat(0.53, b(8), q(4)).unwrap().value(), 8);
        assert_eq!(quantize_qformat(-0.53, b(8), q(4)).unwrap().value(), -8);
        assert_eq!(quantize_qformat(2.5 / 16.0, b(8), q(4)).unwrap().value(), 3);
        assert_eq!(quantize_qformat(-2.5 / 16.0, b(8), q(4)).unwrap().value(), -3);
        assert!(quantize_qformat(f64::INFINITY, b(8), q(4)).is_err());
    }

    #[test]
    fn sign_flipped_rounding_biases_toward_zero() {
        let lit = |f| {
            quantize_qformat_with(f, b(8), q(4), RoundingConvention::SignFlipped)
                .unwrap()
                .value()
        };
        // 8.48 - 0.5 = 7.98 -> 7; the flipped constant pulls toward zero.
        assert_eq!(lit(0.53), 7);
        assert_eq!(lit(-0.53), -7);
        assert_eq!(lit(1.0), 15);
    }

    #[test]
    fn dequantize_qformat_examples() {
        assert_eq!(dequantize_qformat(FxpCode::new(0, b(8), q(4)).unwrap()), 0.0);
        assert_eq!(dequantize_qformat(FxpCode::new(16, b(8), q(4)).unwrap()), 1.0);
        assert_eq!(
            dequantize_qformat(FxpCode::new(-127, b(8), q(7)).unwrap()),
            -0.9921875
        );
    }

    #[test]
    fn select_qformat_examples() {
        assert_eq!(select_qformat(1.0, b(8)).unwrap(), q(7));
        assert_eq!(select_qformat(16.0, b(8)).unwrap(), q(3));
        assert_eq!(select_qformat(1e6, b(8)).unwrap(), q(0));
        assert_eq!(select_qformat(17.0, b(8)).unwrap(), q(2));
        assert_eq!(select_qformat(0.1, b(8)).unwrap(), q(10));
        assert!(select_qformat(0.0, b(8)).is_err());
        assert!(select_qformat(-1.0, b(8)).is_err());
    }

    #[test]
    fn sat_add_examples() {
        let a = sat_add(Accumulator::with_value(32760, 16).unwrap(), 100);
        assert_eq!((a.value(), a.sat_count()), (32767, 1));
        let a = sat_add(Accumulator::with_value(-32768, 16).unwrap(), -5);
        assert_eq!((a.value(), a.sat_count()), (-32768, 1));
        let a = sat_add(Accumulator::with_value(5, 16).unwrap(), 7);
        assert_eq!((a.value(), a.sat_count()), (12, 0));
    }

    #[test]
    fn rescale_examples() {
        let c = FxpCode::new(16384, b(16), q(14)).unwrap();
        assert_eq!(rescale(c, b(8), q(7)).unwrap().value(), 127);
        let z = FxpCode::new(0, b(16), q(12)).unwrap();
        assert_eq!(rescale(z, b(8), q(3)).unwrap().value(), 0);
        // -129 / 2 = -64.5, half away from zero -> -65.
        let c = FxpCode::new(-129, b(16), q(8)).unwrap();
        assert_eq!(rescale(c, b(8), q(7)).unwrap().value(), -65);
        assert_eq!(round_half_away(-129.0 / 2.0), -65.0);
        assert!(matches!(
            rescale(FxpCode::new(1, b(8), q(0)).unwrap(), b(8), q(4)),
            Err(Error::InvalidRescale { .. })
        ));
    }

    #[test]
    fn shift_matches_float_rounding() {
        for v in -5000i64..5000 {
            for s in 0..6 {
                let want = round_half_away(v as f64 / (1u64 << s) as f64) as i64;
                assert_eq!(shift_round_half_away(v, s), want, "v={v} s={s}");
            }
        }
    }

    #[test]
    fn tensor_validates_codes_and_shape() {
        assert!(FxpTensor::new(vec![2, 2], vec![0; 3], b(8), q(7)).is_err());
        assert!(FxpTensor::new(vec![1], vec![128], b(8), q(7)).is_err());
        let t = FxpTensor::new(vec![2], vec![-128, 127], b(8), q(7)).unwrap();
        assert_eq!(t.dequantize(), vec![-1.0, 127.0 / 128.0]);
    }

    proptest! {
        #[test]
        fn unit_quantizer_matches_grid_search(w in -1.0f64..=1.0, bits in 2u32..=12) {
            prop_assert_eq!(quantize_unit(w, b(bits)).unwrap().value() as i64, brute_force_unit_code(w, bits));
        }

        #[test]
        fn qformat_quantizer_is_monotone(a in -300.0f64..300.0, d in 0.0f64..10.0, bits in 2u32..=16, qq in 0u32..=12) {
            let lo = quantize_qformat(a, b(bits), q(qq)).unwrap().value();
            let hi = quantize_qformat(a + d, b(bits), q(qq)).unwrap().value();
            prop_assert!(lo <= hi);
        }

        #[test]
        fn sat_add_stays_in_range_and_commutes(x in -70000i64..70000, y in -70000i64..70000) {
            let a = sat_add(sat_add(Accumulator::new(16).unwrap(), x), y);
            let b2 = sat_add(sat_add(Accumulator::new(16).unwrap(), y), x);
            prop_assert!(a.value() >= -32768 && a.value() <= 32767);
            prop_assert!(b2.value() >= -32768 && b2.value() <= 32767);
            if (x + y).abs() <= 32767 && x.abs() <= 32767 && y.abs() <= 32767 {
                prop_assert_eq!(a.value(), b2.value());
            }
        }

        #[test]
        fn selected_qformat_never_clips_positive_side(max_abs in 1e-3f64..1e5, bits in 2u32..=16) {
            let qf = select_qformat(max_abs, b(bits)).unwrap();
            prop_assert!(max_abs * qf.scale() <= b(bits).half_range() as f64 || qf.get() == 0);
            let code = quantize_qformat(max_abs, b(bits), qf).unwrap().value() as f64;
            let exact = max_abs * qf.scale();
            if exact + 0.5 < b(bits).half_range() as f64 {
                prop_assert!(code < b(bits).max_code() as f64 || exact.round() == code);
            }
        }
    }
}
