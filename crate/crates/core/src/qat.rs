//! Training-side fake quantization.
//!
//! Weights are squashed with `tanh` and passed through the unit-range
//! quantizer; activations go through a clipped ReLU that is rescaled onto
//! `[-1, 1]`, quantized, and scaled back so the node is a `2^b`-level uniform
//! quantizer on `[0, c_a]`. The backward pass treats every quantizer as the
//! identity.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fxp_core::{
    dequantize_qformat, dequantize_unit, quantize_qformat_with, round_half_away, unit_grid_index,
    BitWidth, FxpCode, QFormat, RoundingConvention,
};

/// Latent weights beyond this magnitude are penalized by the SQWD regularizer.
pub const SQWD_WEIGHT_LIMIT: f64 = 2.0;
pub const DEFAULT_ACR_LAMBDA: f64 = 1e-3;
pub const DEFAULT_SQWD_LAMBDA: f64 = 1e-4;
pub const DEFAULT_ACT_CLIP: f64 = 2.0;

/// Which quantization regularizer is added to the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QatMethod {
    /// Squashed weight distribution.
    Sqwd,
    /// Absolute cosine regularization.
    Acr,
    None,
}

impl QatMethod {
    pub fn default_lambda(self) -> f64 {
        match self {
            QatMethod::Sqwd => DEFAULT_SQWD_LAMBDA,
            QatMethod::Acr => DEFAULT_ACR_LAMBDA,
            QatMethod::None => 0.0,
        }
    }
}

impl std::str::FromStr for QatMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sqwd" => Ok(Self::Sqwd),
            "acr" => Ok(Self::Acr),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown QAT method `{other}`"))),
        }
    }
}

/// Per-model fake-quantization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FakeQuantConfig {
    pub weight_bits: BitWidth,
    pub activation_bits: BitWidth,
    pub input_bits: BitWidth,
    /// Feature q-format; `None` selects it from training-set statistics.
    pub input_q: Option<QFormat>,
    pub method: QatMethod,
    pub lambda_reg: f64,
    /// Upper clip of the activation ReLU; a power of two for export.
    pub act_clip: f64,
    /// Insert quantizer nodes into the forward pass.
    pub enabled: bool,
    #[serde(default)]
    pub input_rounding: RoundingConvention,
}

impl FakeQuantConfig {
    /// Full-precision training: no quantizer nodes, no regularizer.
    pub fn disabled() -> Self {
        Self {
            weight_bits: BitWidth::new(8).unwrap(),
            activation_bits: BitWidth::new(8).unwrap(),
            input_bits: BitWidth::new(8).unwrap(),
            input_q: None,
            method: QatMethod::None,
            lambda_reg: 0.0,
            act_clip: DEFAULT_ACT_CLIP,
            enabled: false,
            input_rounding: RoundingConvention::HalfAway,
        }
    }

    /// Quantization-aware training at the given precisions with the method's default strength.
    pub fn qat(method: QatMethod, weight_bits: u32, activation_bits: u32) -> Result<Self> {
        Ok(Self {
            weight_bits: BitWidth::new(weight_bits)?,
            activation_bits: BitWidth::new(activation_bits)?,
            method,
            lambda_reg: method.default_lambda(),
            enabled: true,
            ..Self::disabled()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda_reg.is_finite() || self.lambda_reg < 0.0 {
            return Err(Error::Config(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        if !self.act_clip.is_finite() || self.act_clip <= 0.0 {
            return Err(Error::Config(format!("act_clip must be > 0, got {}", self.act_clip)));
        }
        Ok(())
    }

    pub fn regularized(&self) -> bool {
        self.method != QatMethod::None && self.lambda_reg > 0.0
    }
}

impl Default for FakeQuantConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

/// A trainable latent weight and its squashed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquashedWeight {
    pub raw: f64,
    pub squashed: f64,
}

impl SquashedWeight {
    pub fn new(raw: f64) -> Self {
        Self { raw, squashed: squash(raw) }
    }
}

pub fn squash(raw: f64) -> f64 {
    raw.tanh()
}

pub fn squash_grad(raw: f64) -> f64 {
    let t = raw.tanh();
    1.0 - t * t
}

/// Quantize-dequantize through the unit grid. Inputs are clamped to `[-1, 1]`.
pub fn fake_quant_unit(w_hat: f64, bits: BitWidth) -> f64 {
    let u = unit_grid_index(w_hat, bits);
    let code = FxpCode::new(u - bits.half_range(), bits, bits.unit_q())
        .expect("grid index is in range by construction");
    dequantize_unit(code)
}

/// Straight-through estimator: the quantizer is the identity on the way back.
#[inline]
pub fn ste_backward(upstream_grad: f64) -> f64 {
    upstream_grad
}

pub fn sqwd_reg_loss(raw_weights: &[f64], lambda: f64) -> f64 {
    if raw_weights.is_empty() {
        return 0.0;
    }
    let sum: f64 = raw_weights
        .iter()
        .map(|&w| {
            let excess = (w.abs() - SQWD_WEIGHT_LIMIT).max(0.0);
            excess * excess
        })
        .sum();
    lambda * sum / raw_weights.len() as f64
}

/// d/d raw of one term of [`sqwd_reg_loss`], with `count` terms in the mean.
pub fn sqwd_reg_grad(raw: f64, lambda: f64, count: usize) -> f64 {
    let excess = raw.abs() - SQWD_WEIGHT_LIMIT;
    if excess <= 0.0 {
        0.0
    } else {
        lambda * 2.0 * excess * raw.signum() / count as f64
    }
}

/// Distance of `2^(b-1) * (w + 1)` from the nearest integer, in `[-0.5, 0.5]`.
#[inline]
fn grid_phase(w_hat: f64, bits: BitWidth) -> f64 {
    let t = bits.half_range() as f64 * (w_hat + 1.0);
    t - round_half_away(t)
}

pub fn acr_reg_loss(w_hats: &[f64], bits: BitWidth, lambda: f64) -> f64 {
    if w_hats.is_empty() {
        return 0.0;
    }
    let sum: f64 = w_hats.iter().map(|&w| (PI * grid_phase(w, bits)).sin().abs()).sum();
    lambda * sum / w_hats.len() as f64
}

/// d/d w_hat of one term of [`acr_reg_loss`], with `count` terms in the mean.
pub fn acr_reg_grad(w_hat: f64, bits: BitWidth, lambda: f64, count: usize) -> f64 {
    let phase = PI * grid_phase(w_hat, bits);
    let s = phase.sin();
    if s == 0.0 {
        return 0.0;
    }
    lambda * s.signum() * phase.cos() * PI * bits.half_range() as f64 / count as f64
}

/// Clipped ReLU followed by a `2^b`-level quantizer on `[0, c_a]`.
pub fn fake_quant_activation(x: f64, bits: BitWidth, act_clip: f64) -> f64 {
    let s = 2.0 * x.clamp(0.0, act_clip) / act_clip - 1.0;
    act_clip * (fake_quant_unit(s, bits) + 1.0) / 2.0
}

pub fn fake_quant_feature(f: f64, bits: BitWidth, q: QFormat) -> Result<f64> {
    fake_quant_feature_with(f, bits, q, RoundingConvention::HalfAway)
}

pub fn fake_quant_feature_with(
    f: f64,
    bits: BitWidth,
    q: QFormat,
    rounding: RoundingConvention,
) -> Result<f64> {
    Ok(dequantize_qformat(quantize_qformat_with(f, bits, q, rounding)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp_core::quantize_unit;
    use proptest::prelude::*;

    fn b(n: u32) -> BitWidth {
        BitWidth::new(n).unwrap()
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash(0.0), 0.0);
        assert!(squash(10.0) < 1.0 && squash(10.0) > 0.9999);
        // tanh(0.5) = (e - 1) / (e + 1) with e = exp(1).
        let e = 1f64.exp();
        let oracle = (e - 1.0) / (e + 1.0);
        assert!((squash(0.5) - oracle).abs() < 1e-15);
        assert!((squash(0.5) - 0.46211715726).abs() < 1e-11);
    }

    #[test]
    fn squash_gradient_matches_finite_differences() {
        for &x in &[-3.0, -1.2, -0.3, 0.0, 0.4, 0.9, 2.5] {
            let h = 1e-6;
            let fd = (squash(x + h) - squash(x - h)) / (2.0 * h);
            let rel = (fd - squash_grad(x)).abs() / squash_grad(x).abs().max(1e-12);
            assert!(rel < 1e-5, "x={x} rel={rel}");
        }
    }

    #[test]
    fn fake_quant_unit_examples() {
        assert_eq!(fake_quant_unit(0.0, b(8)), 0.0);
        assert_eq!(fake_quant_unit(0.3, b(4)), 0.25);
        for bits in 2..=10 {
            let half = 1i64 << (bits - 1);
            for u in 0..2 * half {
                let g = u as f64 / half as f64 - 1.0;
                assert_eq!(fake_quant_unit(g, b(bits)), g);
            }
        }
    }

    #[test]
    fn ste_is_identity() {
        for g in [1.0, -3.7, 0.0, f64::MIN_POSITIVE, -0.0] {
            assert_eq!(ste_backward(g).to_bits(), g.to_bits());
        }
    }

    #[test]
    fn sqwd_examples() {
        assert_eq!(sqwd_reg_loss(&[0.0; 5], 1.0), 0.0);
        assert_eq!(sqwd_reg_loss(&[3.0], 1.0), 1.0);
        assert_eq!(sqwd_reg_loss(&[3.0, -4.0, 0.1], 0.0), 0.0);
    }

    #[test]
    fn sqwd_gradient_matches_finite_differences() {
        let w = [2.7, -3.1, 0.5, 2.2, -2.05];
        for i in 0..w.len() {
            let h = 1e-6;
            let mut plus = w;
            let mut minus = w;
            plus[i] += h;
            minus[i] -= h;
            let fd = (sqwd_reg_loss(&plus, 0.7) - sqwd_reg_loss(&minus, 0.7)) / (2.0 * h);
            let an = sqwd_reg_grad(w[i], 0.7, w.len());
            let rel = (fd - an).abs() / an.abs().max(1e-12);
            assert!(an == 0.0 && fd.abs() < 1e-9 || rel < 1e-5, "i={i} fd={fd} an={an}");
        }
    }

    #[test]
    fn acr_examples() {
        assert_eq!(acr_reg_loss(&[0.0], b(8), 1.0), 0.0);
        let mid = 0.5 / 128.0;
        assert_eq!(acr_reg_loss(&[mid], b(8), 1.0), 1.0);
        assert_eq!(acr_reg_loss(&[0.0, mid], b(8), 2.0), 1.0);
        assert_eq!(acr_reg_loss(&[-1.0, 127.0 / 128.0, -0.5], b(8), 1.0), 0.0);
    }

    #[test]
    fn acr_gradient_matches_finite_differences() {
        let w = [0.0123, -0.4567, 0.8, -0.99];
        for i in 0..w.len() {
            let h = 1e-7;
            let mut plus = w;
            let mut minus = w;
            plus[i] += h;
            minus[i] -= h;
            let fd = (acr_reg_loss(&plus, b(6), 1.3) - acr_reg_loss(&minus, b(6), 1.3)) / (2.0 * h);
            let an = acr_reg_grad(w[i], b(6), 1.3, w.len());
            assert!((fd - an).abs() / an.abs() < 1e-5, "i={i} fd={fd} an={an}");
        }
    }

    #[test]
    fn fake_quant_activation_examples() {
        assert_eq!(fake_quant_activation(-5.0, b(8), 1.0), 0.0);
        assert_eq!(fake_quant_activation(1.0, b(8), 1.0), 255.0 / 256.0);
        assert_eq!(fake_quant_activation(0.5, b(2), 1.0), 0.5);
        assert_eq!(fake_quant_activation(7.0, b(4), 2.0), 2.0 * 15.0 / 16.0);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn fake_quant_feature_examples() {
        assert_eq!(fake_quant_feature(0.0, b(8), QFormat::new(4).unwrap()).unwrap(), 0.0);
        assert_eq!(fake_quant_feature(-100.0, b(8), QFormat::new(4).unwrap()).unwrap(), -8.0);
        // 3.14159 * 16 = 50.27 -> code 50 -> 3.125.
        assert_eq!(fake_quant_feature(3.14159, b(8), QFormat::new(4).unwrap()).unwrap(), 3.125);
    }

    #[test]
    fn config_validation() {
        let mut c = FakeQuantConfig::qat(QatMethod::Acr, 8, 8).unwrap();
        assert!(c.validate().is_ok());
        c.lambda_reg = -1.0;
        assert!(c.validate().is_err());
        c.lambda_reg = 0.0;
        c.act_clip = 0.0;
        assert!(c.validate().is_err());
        assert!(FakeQuantConfig::qat(QatMethod::Acr, 1, 8).is_err());
        assert!(!FakeQuantConfig::qat(QatMethod::None, 8, 8).unwrap().regularized());
    }

    proptest! {
        #[test]
        fn fake_quant_unit_is_idempotent_and_exportable(w in -1.0f64..=1.0, bits in 2u32..=16) {
            let once = fake_quant_unit(w, b(bits));
            prop_assert_eq!(fake_quant_unit(once, b(bits)), once);
            let code = quantize_unit(once, b(bits)).unwrap();
            prop_assert_eq!(dequantize_unit(code), once);
        }

        #[test]
        fn acr_zero_iff_on_grid(w in -1.0f64..1.0, bits in 2u32..=10) {
            let g = fake_quant_unit(w, b(bits));
            prop_assert!(acr_reg_loss(&[g], b(bits), 1.0) <= 1e-12);
            if (w - g).abs() > 1e-9 {
                prop_assert!(acr_reg_loss(&[w], b(bits), 1.0) > 1e-12);
            }
        }

        #[test]
        fn fake_quant_activation_is_bounded_and_monotone(x in -3.0f64..3.0, d in 0.0f64..1.0, bits in 2u32..=12, clip in 0.25f64..4.0) {
            let y0 = fake_quant_activation(x, b(bits), clip);
            let y1 = fake_quant_activation(x + d, b(bits), clip);
            prop_assert!((0.0..=clip).contains(&y0));
            prop_assert!(y0 <= y1);
        }
    }
}
