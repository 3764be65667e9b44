//! Pure-integer inference.
//!
//! Every output activation is one multiply-accumulate chain over its
//! receptive field in `(c, ky, kx)` order, run through a saturating
//! accumulator that is optionally flushed into a wider saturating buffer every
//! `k` MACs. The bias (plus the zero-point correction of the input codes) is
//! added in the buffer, then the clipped ReLU and the requantization to the
//! next layer's activation format happen in integer arithmetic. Only the final
//! logits are converted to reals.

mod format;
mod profile;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DatasetStats;
use crate::fxp_core::{
    quantize_qformat_with, quantize_unit, requantize, rescale, select_qformat, BitWidth, FxpTensor, QFormat,
    RoundingConvention,
};
use crate::graph::conv::softmax;
use crate::graph::{activation_clip_exponent, bias_code, ConvSpec, Mode, ModelSpec, Pass, TrainedModel};
use crate::qat::{squash, FakeQuantConfig};

pub use format::{load_model, read_model, save_model, write_model};
pub use profile::{
    flp_reference_profile, instruction_profile, model_instructions, parallel_degree, profile_saturations,
    CadenceColumn, CycleWeights, InstructionProfile, SaturationTable, SaturationTableRow,
};

/// Narrow accumulator, wide flush buffer, and flush cadence in MACs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccumulatorConfig {
    pub acc_bits: u32,
    pub buffer_bits: u32,
    pub flush_cadence: Option<usize>,
}

impl Default for AccumulatorConfig {
    fn default() -> Self {
        Self { acc_bits: 16, buffer_bits: 32, flush_cadence: None }
    }
}

impl AccumulatorConfig {
    pub const MAX_ACC_BITS: u32 = 62;
    pub const MAX_BUFFER_BITS: u32 = 63;

    pub fn new(acc_bits: u32, buffer_bits: u32, flush_cadence: Option<usize>) -> Result<Self> {
        let cfg = Self { acc_bits, buffer_bits, flush_cadence };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 32-bit accumulator with a 40-bit buffer; wide enough that desk-scale 8-bit models never clamp.
    pub fn wide() -> Self {
        Self { acc_bits: 32, buffer_bits: 40, flush_cadence: None }
    }

    pub fn with_cadence(self, flush_cadence: Option<usize>) -> Self {
        Self { flush_cadence, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=Self::MAX_ACC_BITS).contains(&self.acc_bits) {
            return Err(Error::Config(format!("acc_bits {} outside 2..={}", self.acc_bits, Self::MAX_ACC_BITS)));
        }
        if self.buffer_bits <= self.acc_bits || self.buffer_bits > Self::MAX_BUFFER_BITS {
            return Err(Error::Config(format!(
                "buffer_bits {} must exceed acc_bits {} and be at most {}",
                self.buffer_bits,
                self.acc_bits,
                Self::MAX_BUFFER_BITS
            )));
        }
        if self.flush_cadence == Some(0) {
            return Err(Error::Config("flush cadence must be at least 1".into()));
        }
        Ok(())
    }
}

fn range(bits: u32) -> (i64, i64) {
    let half = 1i64 << (bits - 1);
    (-half, half - 1)
}

/// Outcome of one multiply-accumulate chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MacResult {
    pub sum: i64,
    /// Accumulator clamp events.
    pub saturations: u32,
    pub buffer_saturations: u32,
}

/// Sequential saturating dot product of two code arrays.
pub fn mac_kernel(w_codes: &[i32], x_codes: &[i32], cfg: &AccumulatorConfig) -> Result<MacResult> {
    cfg.validate()?;
    if w_codes.len() != x_codes.len() {
        return Err(Error::Shape(format!("{} weights against {} inputs", w_codes.len(), x_codes.len())));
    }
    Ok(mac_chain(w_codes, x_codes, 0, cfg))
}

/// MAC chain with `offset` added into the buffer at the end. `cfg` must be valid.
fn mac_chain(w: &[i32], x: &[i32], offset: i64, cfg: &AccumulatorConfig) -> MacResult {
    let (amin, amax) = range(cfg.acc_bits);
    let (bmin, bmax) = range(cfg.buffer_bits);
    let mut r = MacResult::default();
    let mut buffer = 0i64;
    let flush = |buffer: &mut i64, v: i64, r: &mut MacResult| {
        let s = buffer.saturating_add(v);
        *buffer = s.clamp(bmin, bmax);
        if *buffer != s {
            r.buffer_saturations += 1;
        }
    };
    let mut acc = 0i64;
    let cadence = cfg.flush_cadence.unwrap_or(usize::MAX);
    let mut since_flush = 0usize;
    for (&a, &b) in w.iter().zip(x) {
        let s = acc.saturating_add(a as i64 * b as i64);
        acc = s.clamp(amin, amax);
        if acc != s {
            r.saturations += 1;
        }
        since_flush += 1;
        if since_flush == cadence {
            flush(&mut buffer, acc, &mut r);
            acc = 0;
            since_flush = 0;
        }
    }
    flush(&mut buffer, acc, &mut r);
    flush(&mut buffer, offset, &mut r);
    r.sum = buffer;
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    /// One shared activation format; no normalization between layers.
    QatUniform,
    /// Per-layer formats with a normalization step at every layer boundary.
    PtqPerLayer,
}

/// Integer activation format: real value `(code + zero_point) * 2^-q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActFormat {
    pub bits: BitWidth,
    pub q: QFormat,
    pub zero_point: i32,
}

impl ActFormat {
    /// Largest unsigned level `code + zero_point` a non-negative activation can take.
    fn max_level(&self) -> i64 {
        self.bits.max_code() + self.zero_point as i64
    }

    pub fn to_real(&self, code: i64) -> f64 {
        (code + self.zero_point as i64) as f64 / self.q.scale()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FxpLayer {
    pub conv: ConvSpec,
    /// `[out_channels, in_channels, kh, kw]`.
    pub weights: FxpTensor,
    /// Bias codes at `acc_q` fractional bits.
    pub bias: Vec<i32>,
    pub acc_q: i32,
    pub input: ActFormat,
    /// Format the layer requantizes into; `None` for the classifier.
    pub output: Option<ActFormat>,
}

impl FxpLayer {
    /// Bias plus the zero-point correction `zp * sum(w)`, per output channel.
    fn offsets(&self) -> Vec<i64> {
        let fan = self.conv.fan_in();
        let zp = self.input.zero_point as i64;
        self.weights
            .codes()
            .chunks_exact(fan)
            .zip(&self.bias)
            .map(|(row, &b)| b as i64 + zp * row.iter().map(|&w| w as i64).sum::<i64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FxpModel {
    pub spec: ModelSpec,
    pub mode: EngineMode,
    pub weight_bits: BitWidth,
    pub activation_bits: BitWidth,
    pub input_bits: BitWidth,
    pub input_q: QFormat,
    pub input_rounding: RoundingConvention,
    pub act_clip: f64,
    pub layers: Vec<FxpLayer>,
    pub accumulator: AccumulatorConfig,
    pub stats: DatasetStats,
}

/// Export a fake-quantized model; dequantized weights equal the training-time fake-quantized weights.
pub fn export_model(tm: &TrainedModel) -> Result<FxpModel> {
    tm.validate()?;
    if !tm.fq.enabled {
        return Err(Error::Export(
            "model was trained without fake quantization; request post-training quantization explicitly".into(),
        ));
    }
    let e = activation_clip_exponent(tm.fq.act_clip)?;
    let input_q = tm.input_q()?;
    let b_a = tm.fq.activation_bits;
    let act_q = qformat(b_a.get() as i32 - e)?;
    let act = ActFormat { bits: b_a, q: act_q, zero_point: b_a.half_range() as i32 };
    let mut layers = Vec::with_capacity(tm.spec.blocks.len());
    for (i, conv) in tm.spec.blocks.iter().enumerate() {
        let w = tm.prequant_weights(i)?;
        let codes = w
            .iter()
            .map(|&x| quantize_unit(x, tm.fq.weight_bits).map(|c| c.value()))
            .collect::<Result<Vec<_>>>()?;
        let shape = vec![conv.out_channels, conv.in_channels, conv.kernel.0, conv.kernel.1];
        let weights = FxpTensor::new(shape, codes, tm.fq.weight_bits, tm.fq.weight_bits.unit_q())?;
        let acc_q = tm.accumulator_q(i)?;
        let bias = tm.prequant_bias(i)?.iter().map(|&b| bias_code(b, acc_q) as i32).collect();
        let input = if i == 0 {
            ActFormat { bits: tm.fq.input_bits, q: input_q, zero_point: 0 }
        } else {
            act
        };
        let output = (!tm.spec.is_classifier(i)).then_some(act);
        layers.push(FxpLayer { conv: *conv, weights, bias, acc_q, input, output });
    }
    let m = FxpModel {
        spec: tm.spec.clone(),
        mode: EngineMode::QatUniform,
        weight_bits: tm.fq.weight_bits,
        activation_bits: b_a,
        input_bits: tm.fq.input_bits,
        input_q,
        input_rounding: tm.fq.input_rounding,
        act_clip: tm.fq.act_clip,
        layers,
        accumulator: AccumulatorConfig::default(),
        stats: tm.stats.clone(),
    };
    m.validate()?;
    Ok(m)
}

/// Largest difference between exported weights (dequantized) and the weights
/// the fake-quantized forward pass uses.
pub fn export_error(tm: &TrainedModel, m: &FxpModel) -> Result<f64> {
    if m.layers.len() != tm.blocks.len() || m.mode != EngineMode::QatUniform {
        return Err(Error::Export("model pair does not match".into()));
    }
    let mut worst: f64 = 0.0;
    for (i, layer) in m.layers.iter().enumerate() {
        let (wq, bq) = tm.quantized_block(i)?;
        for (a, b) in layer.weights.dequantize().iter().zip(&wq) {
            worst = worst.max((a - b).abs());
        }
        let scale = (layer.acc_q as f64).exp2();
        for (&a, b) in layer.bias.iter().zip(&bq) {
            worst = worst.max((a as f64 / scale - b).abs());
        }
    }
    Ok(worst)
}

fn qformat(q: i32) -> Result<QFormat> {
    if q < 0 {
        return Err(Error::Export(format!("activation q-format {q} is negative; lower the activation clip")));
    }
    QFormat::new(q as u32).map_err(|_| Error::Export(format!("q-format {q} out of range")))
}

/// Post-training quantization settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PtqConfig {
    pub weight_bits: BitWidth,
    pub activation_bits: BitWidth,
    pub input_bits: BitWidth,
    /// Calibration inputs used to find activation ranges.
    pub calibration_limit: usize,
}

impl Default for PtqConfig {
    fn default() -> Self {
        let b8 = BitWidth::new(8).expect("8 bits");
        Self { weight_bits: b8, activation_bits: b8, input_bits: b8, calibration_limit: 256 }
    }
}

/// Per-layer fixed-point export of a model trained at full precision.
///
/// Weight q-formats come from each layer's folded weight range; each layer
/// requantizes its output to the q-format of its own calibrated range, and
/// the result is normalized to the shared q-format the next layer was
/// quantized for.
pub fn export_ptq(tm: &TrainedModel, calibration: &[Vec<f64>], cfg: &PtqConfig) -> Result<FxpModel> {
    tm.validate()?;
    if calibration.is_empty() {
        return Err(Error::Export("post-training quantization needs calibration inputs".into()));
    }
    let e = activation_clip_exponent(tm.fq.act_clip)?;
    let mut flp = tm.clone();
    let squashed = tm.fq.enabled;
    flp.fq = FakeQuantConfig { act_clip: tm.fq.act_clip, ..FakeQuantConfig::disabled() };
    if squashed {
        for b in &mut flp.blocks {
            b.weight.iter_mut().for_each(|w| *w = squash(*w));
        }
    }
    let blocks = tm.spec.blocks.len();
    let mut max_act = vec![0.0f64; blocks];
    let inputs = &calibration[..calibration.len().min(cfg.calibration_limit.max(1))];
    for chunk in inputs.chunks(32) {
        let refs: Vec<&[f64]> = chunk.iter().map(|v| &v[..]).collect();
        let pass = Pass::run(&flp, &refs, Mode::Eval, true)?;
        for (m, out) in max_act.iter_mut().zip(pass.outputs.expect("outputs kept")) {
            *m = out.data.iter().fold(*m, |a, v| a.max(v.abs()));
        }
    }
    let b_a = cfg.activation_bits;
    let floor = (-20f64).exp2();
    let native: Vec<QFormat> = max_act[..blocks - 1]
        .iter()
        .map(|&m| select_qformat(m.max(floor), b_a))
        .collect::<Result<_>>()?;
    let shared = native.iter().copied().min().unwrap_or(b_a.unit_q());
    let input_q = tm.stats.input_qformat(cfg.input_bits)?;
    let mut layers = Vec::with_capacity(blocks);
    for (i, conv) in tm.spec.blocks.iter().enumerate() {
        let p = &flp.blocks[i];
        let (w, b) = match &p.bn {
            Some(bn) => crate::graph::fold_batchnorm(&p.weight, &p.bias, bn)?,
            None => (p.weight.clone(), p.bias.clone()),
        };
        let input = if i == 0 {
            ActFormat { bits: cfg.input_bits, q: input_q, zero_point: 0 }
        } else {
            ActFormat { bits: b_a, q: shared, zero_point: 0 }
        };
        let q_x = input.q.get() as i32;
        let max_w = w.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(floor);
        let q_w = select_qformat(max_w, cfg.weight_bits)?.get().min((30 - q_x).max(0) as u32);
        let q_w = QFormat::new(q_w)?;
        let weights = FxpTensor::from_reals(
            vec![conv.out_channels, conv.in_channels, conv.kernel.0, conv.kernel.1],
            &w,
            cfg.weight_bits,
            q_w,
        )?;
        let acc_q = q_w.get() as i32 + q_x;
        let bias = b.iter().map(|&v| bias_code(v, acc_q) as i32).collect();
        let output = (!tm.spec.is_classifier(i)).then(|| ActFormat { bits: b_a, q: native[i], zero_point: 0 });
        if acc_q + e < 0 {
            return Err(Error::Export(format!("layer {i}: accumulator q-format {acc_q} cannot hold the clip")));
        }
        layers.push(FxpLayer { conv: *conv, weights, bias, acc_q, input, output });
    }
    let m = FxpModel {
        spec: tm.spec.clone(),
        mode: EngineMode::PtqPerLayer,
        weight_bits: cfg.weight_bits,
        activation_bits: b_a,
        input_bits: cfg.input_bits,
        input_q,
        input_rounding: RoundingConvention::HalfAway,
        act_clip: tm.fq.act_clip,
        layers,
        accumulator: AccumulatorConfig::wide(),
        stats: tm.stats.clone(),
    };
    m.validate()?;
    Ok(m)
}

/// Shift every code of `t` to `q_to` fractional bits (down-shifts only).
pub fn normalize_qformat(t: &FxpTensor, q_to: QFormat) -> Result<FxpTensor> {
    if q_to == t.q() {
        return Ok(t.clone());
    }
    let codes = t
        .codes()
        .iter()
        .map(|&c| {
            let code = crate::fxp_core::FxpCode::new(c as i64, t.bits(), t.q())?;
            Ok(rescale(code, t.bits(), q_to)?.value())
        })
        .collect::<Result<Vec<_>>>()?;
    FxpTensor::new(t.shape().to_vec(), codes, t.bits(), q_to)
}

/// Saturation counts of one layer for one or more inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerSaturation {
    pub activations: u64,
    /// Activations with at least one accumulator clamp in their MAC chain.
    pub corrupted: u64,
    pub acc_clamps: u64,
    pub buffer_saturations: u64,
}

impl LayerSaturation {
    fn add(&mut self, o: &LayerSaturation) {
        self.activations += o.activations;
        self.corrupted += o.corrupted;
        self.acc_clamps += o.acc_clamps;
        self.buffer_saturations += o.buffer_saturations;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub schema: String,
    pub cadence: Option<usize>,
    pub acc_bits: u32,
    pub buffer_bits: u32,
    pub inputs: u64,
    pub layers: Vec<LayerSaturation>,
    pub total_corrupted: u64,
    pub total_buffer_saturations: u64,
    /// Codes shifted by q-format normalization between layers.
    pub normalization_ops: u64,
}

impl SaturationReport {
    pub const SCHEMA: &'static str = "fxqat.saturation/1";

    fn empty(cfg: &AccumulatorConfig, layers: usize) -> Self {
        Self {
            schema: Self::SCHEMA.into(),
            cadence: cfg.flush_cadence,
            acc_bits: cfg.acc_bits,
            buffer_bits: cfg.buffer_bits,
            inputs: 0,
            layers: vec![LayerSaturation::default(); layers],
            total_corrupted: 0,
            total_buffer_saturations: 0,
            normalization_ops: 0,
        }
    }

    pub fn merge(&mut self, other: &SaturationReport) {
        self.inputs += other.inputs;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add(b);
        }
        self.total_corrupted += other.total_corrupted;
        self.total_buffer_saturations += other.total_buffer_saturations;
        self.normalization_ops += other.normalization_ops;
    }
}

/// Output of one integer layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOutput {
    /// Requantized activations `[C, H, W]`.
    Activations(FxpTensor),
    /// Raw accumulator sums of the classifier at `q` fractional bits.
    Logits { sums: Vec<i64>, q: i32 },
}

/// One integer convolution block.
pub fn conv_fxp(
    m: &FxpModel,
    layer: usize,
    input: &FxpTensor,
    cfg: &AccumulatorConfig,
) -> Result<(LayerOutput, LayerSaturation)> {
    cfg.validate()?;
    let l = m
        .layers
        .get(layer)
        .ok_or_else(|| Error::InvalidInput(format!("layer {layer} does not exist")))?;
    let conv = &l.conv;
    if input.q() != l.input.q {
        return Err(Error::QFormatMismatch {
            layer,
            expected: l.input.q.get() as i32,
            actual: input.q().get() as i32,
        });
    }
    let shape = input.shape();
    if shape.len() != 3 || shape[0] != conv.in_channels {
        return Err(Error::Shape(format!("layer {layer} input shape {shape:?}")));
    }
    let (c_in, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = crate::graph::conv::output_hw(conv, h, w)
        .ok_or_else(|| Error::Shape(format!("layer {layer} kernel does not fit {h}x{w}")))?;
    let (kh, kw) = conv.kernel;
    let (sh, sw) = conv.stride;
    let (ph, pw) = conv.padding;
    let fan = conv.fan_in();
    let pad = -l.input.zero_point;
    let offsets = l.offsets();
    let wcodes = l.weights.codes();
    let x = input.codes();
    let oc = conv.out_channels;
    let mut sums = vec![0i64; oc * oh * ow];
    let mut stats = LayerSaturation { activations: (oc * oh * ow) as u64, ..Default::default() };
    let mut patch = vec![0i32; fan];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut idx = 0;
            for c in 0..c_in {
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    for kx in 0..kw {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        patch[idx] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            x[(c * h + iy as usize) * w + ix as usize]
                        } else {
                            pad
                        };
                        idx += 1;
                    }
                }
            }
            for o in 0..oc {
                let r = mac_chain(&wcodes[o * fan..(o + 1) * fan], &patch, offsets[o], cfg);
                sums[(o * oh + oy) * ow + ox] = r.sum;
                if r.saturations > 0 {
                    stats.corrupted += 1;
                }
                stats.acc_clamps += r.saturations as u64;
                stats.buffer_saturations += r.buffer_saturations as u64;
            }
        }
    }
    let out = match l.output {
        None => LayerOutput::Logits { sums, q: l.acc_q },
        Some(fmt) => {
            let e = activation_clip_exponent(m.act_clip)?;
            let clip = 1i64 << (l.acc_q + e);
            let max_level = fmt.max_level();
            let codes = sums
                .iter()
                .map(|&s| {
                    let u = requantize(s.clamp(0, clip), l.acc_q, fmt.q.get() as i32).clamp(0, max_level);
                    (u - fmt.zero_point as i64) as i32
                })
                .collect();
            LayerOutput::Activations(FxpTensor::new(vec![oc, oh, ow], codes, fmt.bits, fmt.q)?)
        }
    };
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub posteriors: Vec<f64>,
    pub logits: Vec<f64>,
    pub report: SaturationReport,
    /// Per-layer outputs, kept when tracing.
    pub trace: Option<Vec<LayerOutput>>,
}

impl FxpModel {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.accumulator.validate()?;
        activation_clip_exponent(self.act_clip)?;
        if self.layers.len() != self.spec.blocks.len() {
            return Err(Error::Shape("layer count does not match the spec".into()));
        }
        for (i, (l, conv)) in self.layers.iter().zip(&self.spec.blocks).enumerate() {
            if l.conv != *conv || l.weights.len() != conv.weight_len() || l.bias.len() != conv.out_channels {
                return Err(Error::Shape(format!("layer {i} does not match the spec")));
            }
            if l.output.is_some() == self.spec.is_classifier(i) {
                return Err(Error::Shape(format!("layer {i} output format presence is wrong")));
            }
            let e = activation_clip_exponent(self.act_clip)?;
            if !(0..=60).contains(&l.acc_q) || l.acc_q + e < 0 {
                return Err(Error::Export(format!("layer {i}: accumulator q-format {} unsupported", l.acc_q)));
            }
            if i > 0 {
                let prev = self.layers[i - 1].output.expect("non-classifier");
                let same = prev.q == l.input.q && prev.zero_point == l.input.zero_point;
                match self.mode {
                    EngineMode::QatUniform if !same => {
                        return Err(Error::QFormatMismatch {
                            layer: i,
                            expected: l.input.q.get() as i32,
                            actual: prev.q.get() as i32,
                        })
                    }
                    EngineMode::PtqPerLayer if !same && (prev.zero_point != 0 || l.input.zero_point != 0) => {
                        return Err(Error::Export(format!("layer {i}: normalization needs zero-point-free codes")))
                    }
                    EngineMode::PtqPerLayer if prev.q < l.input.q => {
                        return Err(Error::Export(format!("layer {i}: normalization cannot up-shift")))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Quantize one standardized `(frames, bins)` input to feature codes.
    pub fn quantize_features(&self, features: &[f64]) -> Result<FxpTensor> {
        let (h, w, _) = self.spec.input_shape;
        if features.len() != h * w {
            return Err(Error::Shape(format!("{} feature values, model expects {h}x{w}", features.len())));
        }
        let codes = features
            .iter()
            .map(|&f| quantize_qformat_with(f, self.input_bits, self.input_q, self.input_rounding).map(|c| c.value()))
            .collect::<Result<Vec<_>>>()?;
        FxpTensor::new(vec![1, h, w], codes, self.input_bits, self.input_q)
    }

    pub fn infer(&self, features: &[f64]) -> Result<Inference> {
        self.infer_with(features, &self.accumulator, false)
    }

    pub fn infer_with(&self, features: &[f64], cfg: &AccumulatorConfig, keep_trace: bool) -> Result<Inference> {
        let mut x = self.quantize_features(features)?;
        let mut report = SaturationReport::empty(cfg, self.layers.len());
        report.inputs = 1;
        let mut trace = keep_trace.then(Vec::new);
        for i in 0..self.layers.len() {
            let (out, sat) = conv_fxp(self, i, &x, cfg)?;
            report.total_corrupted += sat.corrupted;
            report.total_buffer_saturations += sat.buffer_saturations;
            report.layers[i] = sat;
            if let Some(t) = trace.as_mut() {
                t.push(out.clone());
            }
            match out {
                LayerOutput::Activations(t) => {
                    x = t;
                    if self.mode == EngineMode::PtqPerLayer {
                        x = normalize_qformat(&x, self.layers[i + 1].input.q)?;
                        report.normalization_ops += x.len() as u64;
                    }
                }
                LayerOutput::Logits { sums, q } => {
                    let scale = (q as f64).exp2();
                    let logits: Vec<f64> = sums.iter().map(|&s| s as f64 / scale).collect();
                    return Ok(Inference { posteriors: softmax(&logits), logits, report, trace });
                }
            }
        }
        unreachable!("the last layer is the classifier")
    }

    /// Dequantized weights of every layer.
    pub fn dequantized_weights(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.weights.dequantize()).collect()
    }
}

/// Compare the integer trace against the fake-quantized float forward pass.
///
/// Returns the first `(layer, index)` whose code differs, or `None` when every
/// layer matches exactly.
pub fn first_divergence(tm: &TrainedModel, m: &FxpModel, features: &[f64], cfg: &AccumulatorConfig) -> Result<Option<(usize, usize)>> {
    let reference = tm.trace(features)?;
    let run = m.infer_with(features, cfg, true)?;
    for (i, (out, real)) in run.trace.expect("trace kept").iter().zip(&reference).enumerate() {
        match out {
            LayerOutput::Activations(t) => {
                let fmt = m.layers[i].output.expect("activation layer");
                for (j, (&c, &r)) in t.codes().iter().zip(real).enumerate() {
                    if fmt.to_real(c as i64) != r {
                        return Ok(Some((i, j)));
                    }
                }
            }
            LayerOutput::Logits { sums, q } => {
                let scale = (*q as f64).exp2();
                for (j, (&s, &r)) in sums.iter().zip(real).enumerate() {
                    if s as f64 / scale != r {
                        return Ok(Some((i, j)));
                    }
                }
            }
        }
    }
    Ok(None)
}
