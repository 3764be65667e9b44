//! The convolutional keyword-spotting model in floating point.
//!
//! Every block but the last is conv, batch norm and a clipped ReLU; the last
//! block is a bare convolution producing class logits over a 1x1 map.
//!
//! With fake quantization enabled the batch norm is folded into the
//! convolution on every forward pass (using running statistics), and the
//! folded weights and bias are what get quantized. The exporter folds and
//! quantizes the same way, which is what makes export lossless.

mod checkpoint;
pub mod conv;
mod net;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DatasetStats;
use crate::fxp_core::{round_half_away, QFormat};
use crate::qat::{fake_quant_unit, squash, FakeQuantConfig};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use net::{BlockGrads, Gradients, Mode, Pass, StatsUpdate};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// One convolution: kernel `(h, w)`, channels, stride, and zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn fan_in(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.in_channels
    }

    pub fn macs_per_activation(&self) -> usize {
        self.fan_in()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    /// The `(h, w, in_channels)` triple whose product is the MAC count per activation.
    pub fn kernel_size(&self) -> (usize, usize, usize) {
        (self.kernel.0, self.kernel.1, self.in_channels)
    }
}

/// Spatial sizes around one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

impl BlockGeometry {
    pub fn positions(&self) -> usize {
        self.out_hw.0 * self.out_hw.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub blocks: Vec<ConvSpec>,
    pub num_classes: usize,
    /// `(frames, bins, channels)`.
    pub input_shape: (usize, usize, usize),
}

impl ModelSpec {
    /// The five-block topology with kernels `(3,4)`, `(4,4)`, `(7,4)`, `(1,1)`, `(1,1)`.
    ///
    /// Strides and padding are chosen so a 76x64 input yields 10880 outputs in
    /// block one and a 1x1 map from block three on; block two produces 1120.
    pub fn reference(num_classes: usize) -> Self {
        Self::five_block([32, 40, 128, 160], num_classes)
    }

    /// Same geometry as [`ModelSpec::reference`] with narrow channels, sized for CPU training.
    pub fn desk(num_classes: usize) -> Self {
        Self::five_block([8, 16, 32, 32], num_classes)
    }

    /// Reference topology sized for the 35 Speech Commands keywords.
    pub fn gsc() -> Self {
        Self::reference(35)
    }

    fn five_block(ch: [usize; 4], num_classes: usize) -> Self {
        let conv = |kernel, in_channels, out_channels, stride, padding| ConvSpec {
            kernel,
            in_channels,
            out_channels,
            stride,
            padding,
        };
        Self {
            blocks: vec![
                conv((3, 4), 1, ch[0], (4, 4), (2, 2)),
                conv((4, 4), ch[0], ch[1], (3, 4), (1, 0)),
                conv((7, 4), ch[1], ch[2], (1, 1), (0, 0)),
                conv((1, 1), ch[2], ch[3], (1, 1), (0, 0)),
                conv((1, 1), ch[3], num_classes, (1, 1), (0, 0)),
            ],
            num_classes,
            input_shape: (76, 64, 1),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.0 * self.input_shape.1 * self.input_shape.2
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry().map(|_| ())
    }

    /// Per-block spatial sizes; fails on incompatible channels or shapes.
    pub fn geometry(&self) -> Result<Vec<BlockGeometry>> {
        if self.blocks.is_empty() {
            return Err(Error::Shape("model has no blocks".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Shape("need at least two classes".into()));
        }
        let (h0, w0, c0) = self.input_shape;
        if h0 == 0 || w0 == 0 || c0 == 0 {
            return Err(Error::Shape("input shape must be positive".into()));
        }
        let mut hw = (h0, w0);
        let mut channels = c0;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel.0 == 0 || b.kernel.1 == 0 || b.out_channels == 0 {
                return Err(Error::Shape(format!("block {i} has an empty dimension")));
            }
            if b.in_channels != channels {
                return Err(Error::Shape(format!(
                    "block {i} expects {} input channels, previous block yields {channels}",
                    b.in_channels
                )));
            }
            let next = conv::output_hw(b, hw.0, hw.1).ok_or_else(|| {
                Error::Shape(format!("block {i} kernel {:?} does not fit input {hw:?}", b.kernel))
            })?;
            out.push(BlockGeometry { in_hw: hw, out_hw: next });
            hw = next;
            channels = b.out_channels;
        }
        if channels != self.num_classes {
            return Err(Error::Shape(format!(
                "last block yields {channels} channels for {} classes",
                self.num_classes
            )));
        }
        if hw != (1, 1) {
            return Err(Error::Shape(format!("last block must produce a 1x1 map, got {hw:?}")));
        }
        Ok(out)
    }

    pub fn is_classifier(&self, block: usize) -> bool {
        block + 1 == self.blocks.len()
    }

    /// Learnable parameters: weights, biases, and batch-norm scale and shift.
    pub fn parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let bn = if self.is_classifier(i) { 0 } else { 2 * b.out_channels };
                b.weight_len() + b.out_channels + bn
            })
            .sum()
    }

    /// Output activations per input, one entry per block.
    pub fn activation_counts(&self) -> Result<Vec<usize>> {
        Ok(self
            .geometry()?
            .iter()
            .zip(&self.blocks)
            .map(|(g, b)| g.positions() * b.out_channels)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `gamma / sqrt(var + eps)`.
    pub fn scales(&self) -> Result<Vec<f64>> {
        self.gamma
            .iter()
            .zip(&self.running_var)
            .enumerate()
            .map(|(c, (&g, &v))| {
                let d = v + self.eps;
                if d > 0.0 && d.is_finite() {
                    Ok(g / d.sqrt())
                } else {
                    Err(Error::InvalidBatchNorm(format!("channel {c}: var + eps = {d}")))
                }
            })
            .collect()
    }
}

/// Absorb batch norm into the preceding convolution.
///
/// `weights` is `[out_channels, fan_in]`; returns the folded weights and bias.
pub fn fold_batchnorm(
    weights: &[f64],
    bias: &[f64],
    bn: &BatchNormParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let oc = bias.len();
    if bn.channels() != oc || bn.beta.len() != oc || bn.running_mean.len() != oc || bn.running_var.len() != oc {
        return Err(Error::Shape(format!("batch norm has {} channels, conv has {oc}", bn.channels())));
    }
    if oc == 0 || !weights.len().is_multiple_of(oc) {
        return Err(Error::Shape(format!("{} weights for {oc} output channels", weights.len())));
    }
    let fan = weights.len() / oc;
    let scales = bn.scales()?;
    let mut w = Vec::with_capacity(weights.len());
    for (c, &s) in scales.iter().enumerate() {
        w.extend(weights[c * fan..(c + 1) * fan].iter().map(|&x| x * s));
    }
    let b = (0..oc)
        .map(|c| (bias[c] - bn.running_mean[c]) * scales[c] + bn.beta[c])
        .collect();
    Ok((w, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    /// Latent weights `[out_channels, in_channels * kh * kw]`, taps ordered `(c, ky, kx)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNormParams>,
}

/// Topology, parameters, frozen input statistics, and quantization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub blocks: Vec<BlockParams>,
    pub stats: DatasetStats,
    pub fq: FakeQuantConfig,
    /// Running batch-norm statistics have been seeded from data.
    pub bn_stats_ready: bool,
}

impl TrainedModel {
    /// He-initialized model with identity batch norm.
    pub fn init(spec: ModelSpec, stats: DatasetStats, mut fq: FakeQuantConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        fq.validate()?;
        if stats.mean.len() != spec.input_shape.1 || stats.std.len() != spec.input_shape.1 {
            return Err(Error::Shape(format!(
                "statistics cover {} bins, model input has {}",
                stats.mean.len(),
                spec.input_shape.1
            )));
        }
        if fq.enabled {
            activation_clip_exponent(fq.act_clip)?;
            if fq.input_q.is_none() {
                fq.input_q = Some(stats.input_qformat(fq.input_bits)?);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let gain = if spec.is_classifier(i) { 1.0 } else { 2.0 };
                let std = (gain / b.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                BlockParams {
                    weight: (0..b.weight_len()).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; b.out_channels],
                    bn: (!spec.is_classifier(i)).then(|| BatchNormParams::identity(b.out_channels)),
                }
            })
            .collect();
        Ok(Self { spec, blocks, stats, fq, bn_stats_ready: false })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.fq.validate()?;
        if self.blocks.len() != self.spec.blocks.len() {
            return Err(Error::Shape("parameter blocks do not match the spec".into()));
        }
        for (i, (p, b)) in self.blocks.iter().zip(&self.spec.blocks).enumerate() {
            if p.weight.len() != b.weight_len() || p.bias.len() != b.out_channels {
                return Err(Error::Shape(format!("block {i} parameter sizes do not match the spec")));
            }
            if p.bn.is_some() == self.spec.is_classifier(i) {
                return Err(Error::Shape(format!("block {i} batch-norm presence is wrong")));
            }
            let finite = p.weight.iter().chain(&p.bias).all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidInput(format!("block {i} has non-finite parameters")));
            }
        }
        if self.fq.enabled {
            activation_clip_exponent(self.fq.act_clip)?;
            self.input_q()?;
        }
        Ok(())
    }

    pub fn input_q(&self) -> Result<QFormat> {
        self.fq
            .input_q
            .ok_or_else(|| Error::Config("feature q-format has not been resolved".into()))
    }

    /// Fractional bits of the real-valued input to `block` under fake quantization.
    ///
    /// Block 0 reads features at `input_q`; later blocks read activations on the
    /// `c_a * u / 2^b_a` grid, i.e. `b_a - log2(c_a)` fractional bits.
    pub fn input_frac_bits(&self, block: usize) -> Result<i32> {
        if block == 0 {
            Ok(self.input_q()?.get() as i32)
        } else {
            Ok(self.fq.activation_bits.get() as i32 - activation_clip_exponent(self.fq.act_clip)?)
        }
    }

    /// Fractional bits of the accumulator (and the quantized bias) of `block`.
    pub fn accumulator_q(&self, block: usize) -> Result<i32> {
        Ok(self.fq.weight_bits.get() as i32 - 1 + self.input_frac_bits(block)?)
    }

    /// Weights entering the unit quantizer: squashed, batch-norm folded, clamped to `[-1, 1]`.
    pub fn prequant_weights(&self, block: usize) -> Result<Vec<f64>> {
        let p = &self.blocks[block];
        let squashed: Vec<f64> = p.weight.iter().map(|&w| squash(w)).collect();
        let w = match &p.bn {
            Some(bn) => fold_batchnorm(&squashed, &p.bias, bn)?.0,
            None => squashed,
        };
        Ok(w.into_iter().map(|x| x.clamp(-1.0, 1.0)).collect())
    }

    /// Folded real-valued bias before quantization.
    pub fn prequant_bias(&self, block: usize) -> Result<Vec<f64>> {
        let p = &self.blocks[block];
        match &p.bn {
            Some(bn) => {
                let squashed: Vec<f64> = p.weight.iter().map(|&w| squash(w)).collect();
                Ok(fold_batchnorm(&squashed, &p.bias, bn)?.1)
            }
            None => Ok(p.bias.clone()),
        }
    }

    /// The fake-quantized weights and bias used by the quantized forward pass.
    pub fn quantized_block(&self, block: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let bits = self.fq.weight_bits;
        let w = self.prequant_weights(block)?.into_iter().map(|x| fake_quant_unit(x, bits)).collect();
        let q = self.accumulator_q(block)?;
        let b = self.prequant_bias(block)?.into_iter().map(|x| fake_quant_bias(x, q)).collect();
        Ok((w, b))
    }

    pub fn parameter_count(&self) -> usize {
        self.spec.parameter_count()
    }

    /// All conv weights concatenated, in block order.
    pub fn all_raw_weights(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.weight.iter().copied()).collect()
    }
}

/// `c_a` must be an exact power of two for the integer engine; returns `log2(c_a)`.
pub fn activation_clip_exponent(act_clip: f64) -> Result<i32> {
    let e = act_clip.log2().round();
    if act_clip > 0.0 && e.exp2() == act_clip && (-8.0..=8.0).contains(&e) {
        Ok(e as i32)
    } else {
        Err(Error::Config(format!(
            "activation clip {act_clip} must be a power of two in [2^-8, 2^8] for fixed-point export"
        )))
    }
}

/// Largest bias code the 32-bit bias storage holds.
pub const BIAS_CODE_LIMIT: i64 = i32::MAX as i64;

/// Integer bias code at `q` fractional bits, saturated to 32 bits.
pub fn bias_code(b: f64, q: i32) -> i64 {
    let scaled = round_half_away(b * (q as f64).exp2());
    scaled.clamp(-(BIAS_CODE_LIMIT as f64), BIAS_CODE_LIMIT as f64) as i64
}

pub fn fake_quant_bias(b: f64, q: i32) -> f64 {
    bias_code(b, q) as f64 / (q as f64).exp2()
}
