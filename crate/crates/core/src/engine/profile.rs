//! Saturation tables and the analytic instruction-count model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AccumulatorConfig, EngineMode, FxpModel, SaturationReport};
use crate::error::{Error, Result};
use crate::graph::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CadenceColumn {
    pub cadence: Option<usize>,
    pub report: SaturationReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaturationTableRow {
    pub layer: usize,
    /// `(h, w, in_channels)`.
    pub kernel: (usize, usize, usize),
    pub macs_per_activation: usize,
    /// Activations per input.
    pub activations: usize,
    /// Corrupted activations summed over all inputs, one entry per cadence.
    pub corrupted: Vec<u64>,
}

/// Corrupted activations per layer and flush cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationTable {
    pub schema: String,
    pub acc_bits: u32,
    pub buffer_bits: u32,
    pub inputs: u64,
    pub cadences: Vec<Option<usize>>,
    pub rows: Vec<SaturationTableRow>,
    pub totals: Vec<u64>,
    pub buffer_saturations: Vec<u64>,
    pub columns: Vec<CadenceColumn>,
}

fn cadence_label(c: Option<usize>) -> String {
    match c {
        None => "None".into(),
        Some(k) => format!("{k} MACs"),
    }
}

impl SaturationTable {
    pub const SCHEMA: &'static str = "fxqat.saturation-table/1";

    /// Totals never increase from one column to the next.
    pub fn is_non_increasing(&self) -> bool {
        self.totals.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn to_text(&self) -> String {
        let mut head = vec!["layer".to_string(), "kernel size".into(), "# MACs/act".into(), "# activations".into()];
        head.extend(self.cadences.iter().map(|&c| cadence_label(c)));
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut v = vec![
                    (r.layer + 1).to_string(),
                    format!("({},{},{})", r.kernel.0, r.kernel.1, r.kernel.2),
                    r.macs_per_activation.to_string(),
                    r.activations.to_string(),
                ];
                v.extend(r.corrupted.iter().map(u64::to_string));
                v
            })
            .collect();
        let total_acts: usize = self.rows.iter().map(|r| r.activations).sum();
        let mut total = vec!["TOTAL".to_string(), String::new(), String::new(), total_acts.to_string()];
        total.extend(self.totals.iter().map(u64::to_string));
        rows.push(total);
        let mut out = format!(
            "corrupted activations over {} inputs, {}-bit accumulator, {}-bit buffer\n",
            self.inputs, self.acc_bits, self.buffer_bits
        );
        out.push_str(&render(&head, &rows));
        out
    }
}

/// Right-aligned columns under a header and a rule.
fn render(head: &[String], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = head.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            let _ = write!(s, "{c:>w$}");
        }
        s.push('\n');
        s
    };
    let mut out = line(head);
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (width.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

/// Run every input at every cadence and tabulate corrupted activations.
pub fn profile_saturations(
    m: &FxpModel,
    inputs: &[Vec<f64>],
    cadences: &[Option<usize>],
    base: &AccumulatorConfig,
) -> Result<SaturationTable> {
    if cadences.is_empty() {
        return Err(Error::InvalidInput("no cadences to profile".into()));
    }
    let counts = m.spec.activation_counts()?;
    let mut columns = Vec::with_capacity(cadences.len());
    for &c in cadences {
        let cfg = base.with_cadence(c);
        cfg.validate()?;
        let mut report = SaturationReport::empty(&cfg, m.layers.len());
        for x in inputs {
            report.merge(&m.infer_with(x, &cfg, false)?.report);
        }
        columns.push(CadenceColumn { cadence: c, report });
    }
    let rows = m
        .spec
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| SaturationTableRow {
            layer: i,
            kernel: b.kernel_size(),
            macs_per_activation: b.macs_per_activation(),
            activations: counts[i],
            corrupted: columns.iter().map(|c| c.report.layers[i].corrupted).collect(),
        })
        .collect();
    Ok(SaturationTable {
        schema: SaturationTable::SCHEMA.into(),
        acc_bits: base.acc_bits,
        buffer_bits: base.buffer_bits,
        inputs: inputs.len() as u64,
        cadences: cadences.to_vec(),
        rows,
        totals: columns.iter().map(|c| c.report.total_corrupted).collect(),
        buffer_saturations: columns.iter().map(|c| c.report.total_buffer_saturations).collect(),
        columns,
    })
}

/// Cycles charged per instruction category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleWeights {
    pub mac: f64,
    pub load_store: f64,
    pub flush: f64,
    pub rescale: f64,
    /// Scalar shift, saturate, and store-back of one activation.
    pub normalization: f64,
}

impl Default for CycleWeights {
    fn default() -> Self {
        Self { mac: 1.0, load_store: 1.0, flush: 1.0, rescale: 1.0, normalization: 4.0 }
    }
}

/// Modeled instruction counts for a number of inferences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionProfile {
    pub schema: String,
    /// `None` for the floating-point reference.
    pub mode: Option<EngineMode>,
    pub inputs: u64,
    /// Lanes per vector instruction for MACs, loads/stores and flushes.
    pub parallel_degree: u32,
    pub flush_cadence: Option<usize>,
    pub mac_ops: u64,
    pub load_store_ops: u64,
    pub flush_ops: u64,
    pub rescale_ops: u64,
    pub normalization_ops: u64,
    pub weights: CycleWeights,
    pub modeled_cycles: f64,
    pub normalization_share: f64,
}

impl InstructionProfile {
    pub const SCHEMA: &'static str = "fxqat.instructions/1";

    /// Modeled execution time relative to `baseline`.
    pub fn relative_to(&self, baseline: &InstructionProfile) -> f64 {
        self.modeled_cycles / baseline.modeled_cycles
    }

    pub fn to_text(&self) -> String {
        let mode = match self.mode {
            None => "flp",
            Some(EngineMode::QatUniform) => "qat_uniform",
            Some(EngineMode::PtqPerLayer) => "ptq_per_layer",
        };
        let head = vec!["category".to_string(), "ops".into(), "cycles/op".into(), "lanes".into()];
        let d = self.parallel_degree.to_string();
        let w = &self.weights;
        let rows = vec![
            vec!["mac".into(), self.mac_ops.to_string(), w.mac.to_string(), d.clone()],
            vec!["load/store".into(), self.load_store_ops.to_string(), w.load_store.to_string(), d.clone()],
            vec!["flush".into(), self.flush_ops.to_string(), w.flush.to_string(), d],
            vec!["rescale".into(), self.rescale_ops.to_string(), w.rescale.to_string(), "1".into()],
            vec!["normalization".into(), self.normalization_ops.to_string(), w.normalization.to_string(), "1".into()],
        ];
        format!(
            "instruction model ({mode}, {} inputs, flush {})\n{}modeled cycles: {:.0}\nnormalization share: {:.2}%\n",
            self.inputs,
            cadence_label(self.flush_cadence),
            render(&head, &rows),
            self.modeled_cycles,
            100.0 * self.normalization_share
        )
    }
}

/// Analytic counts for `spec` at a given lane width.
pub fn model_instructions(
    spec: &ModelSpec,
    mode: Option<EngineMode>,
    parallel_degree: u32,
    flush_cadence: Option<usize>,
    input_count: u64,
    weights: &CycleWeights,
) -> Result<InstructionProfile> {
    if parallel_degree == 0 || flush_cadence == Some(0) {
        return Err(Error::Config("parallel degree and cadence must be positive".into()));
    }
    let counts = spec.activation_counts()?;
    let (mut mac, mut flush, mut acts, mut norm) = (0u64, 0u64, 0u64, 0u64);
    for (i, (b, &n)) in spec.blocks.iter().zip(&counts).enumerate() {
        let macs = b.macs_per_activation() as u64;
        let n = n as u64;
        mac += n * macs;
        acts += n;
        if let Some(k) = flush_cadence {
            flush += n * macs.div_ceil(k as u64);
        }
        if mode == Some(EngineMode::PtqPerLayer) && !spec.is_classifier(i) {
            norm += n;
        }
    }
    let k = input_count;
    let (mac, flush, acts, norm) = (mac * k, flush * k, acts * k, norm * k);
    let load_store = 2 * mac + acts;
    let lanes = parallel_degree as f64;
    let vector = (mac as f64 * weights.mac + load_store as f64 * weights.load_store + flush as f64 * weights.flush) / lanes;
    let norm_cycles = norm as f64 * weights.normalization;
    let cycles = vector + acts as f64 * weights.rescale + norm_cycles;
    Ok(InstructionProfile {
        schema: InstructionProfile::SCHEMA.into(),
        mode,
        inputs: input_count,
        parallel_degree,
        flush_cadence,
        mac_ops: mac,
        load_store_ops: load_store,
        flush_ops: flush,
        rescale_ops: acts,
        normalization_ops: norm,
        weights: *weights,
        modeled_cycles: cycles,
        normalization_share: if cycles > 0.0 { norm_cycles / cycles } else { 0.0 },
    })
}

/// Lanes per vector instruction: 8 for 8-bit operands into a 16-bit
/// accumulator, 4 otherwise.
pub fn parallel_degree(m: &FxpModel, cfg: &AccumulatorConfig) -> u32 {
    let operand = m.weight_bits.get().max(m.activation_bits.get()).max(m.input_bits.get());
    if cfg.acc_bits <= 16 && operand <= 8 {
        8
    } else {
        4
    }
}

pub fn instruction_profile(
    m: &FxpModel,
    input_count: u64,
    cfg: &AccumulatorConfig,
    weights: &CycleWeights,
) -> Result<InstructionProfile> {
    model_instructions(&m.spec, Some(m.mode), parallel_degree(m, cfg), cfg.flush_cadence, input_count, weights)
}

/// Scalar floating-point reference: one lane, no flushing, no normalization.
pub fn flp_reference_profile(spec: &ModelSpec, input_count: u64, weights: &CycleWeights) -> Result<InstructionProfile> {
    model_instructions(spec, None, 1, None, input_count, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ConvSpec;

    fn wide_spec() -> ModelSpec {
        ModelSpec {
            blocks: vec![
                ConvSpec { kernel: (4, 4), in_channels: 1, out_channels: 256, stride: (4, 4), padding: (0, 0) },
                ConvSpec { kernel: (1, 1), in_channels: 256, out_channels: 512, stride: (1, 1), padding: (0, 0) },
                ConvSpec { kernel: (1, 1), in_channels: 512, out_channels: 4, stride: (1, 1), padding: (0, 0) },
            ],
            num_classes: 4,
            input_shape: (4, 4, 1),
        }
    }

    #[test]
    fn flush_ops_scale_with_cadence() {
        let w = CycleWeights::default();
        let s = wide_spec();
        // Block one needs 16 MACs, the others multiples of 256.
        let a = model_instructions(&s, Some(EngineMode::QatUniform), 8, Some(16), 1, &w).unwrap();
        let b = model_instructions(&s, Some(EngineMode::QatUniform), 8, Some(256), 1, &w).unwrap();
        assert_eq!(a.flush_ops, 256 + 512 * 16 + 4 * 32);
        let s2 = ModelSpec { blocks: s.blocks[1..].to_vec(), input_shape: (1, 1, 256), ..s.clone() };
        let a2 = model_instructions(&s2, Some(EngineMode::QatUniform), 8, Some(16), 1, &w).unwrap();
        let b2 = model_instructions(&s2, Some(EngineMode::QatUniform), 8, Some(256), 1, &w).unwrap();
        assert_eq!(a2.flush_ops as f64 / b2.flush_ops as f64, 16.0);
        assert!(a.flush_ops > b.flush_ops);
    }

    #[test]
    fn normalization_only_in_ptq() {
        let w = CycleWeights::default();
        let s = ModelSpec::reference(35);
        let q = model_instructions(&s, Some(EngineMode::QatUniform), 8, None, 1, &w).unwrap();
        assert_eq!(q.normalization_ops, 0);
        let p = model_instructions(&s, Some(EngineMode::PtqPerLayer), 8, None, 1, &w).unwrap();
        assert_eq!(p.normalization_ops, 10880 + 1120 + 128 + 160);
        assert!(p.normalization_share > 0.02 && p.normalization_share < 0.15);
        assert_eq!(p.mac_ops, 10880 * 12 + 1120 * 512 + 128 * 1120 + 160 * 128 + 35 * 160);
    }

    #[test]
    fn counts_scale_with_inputs() {
        let w = CycleWeights::default();
        let s = ModelSpec::desk(4);
        let one = flp_reference_profile(&s, 1, &w).unwrap();
        let ten = flp_reference_profile(&s, 10, &w).unwrap();
        assert_eq!(ten.mac_ops, 10 * one.mac_ops);
        assert!((ten.modeled_cycles - 10.0 * one.modeled_cycles).abs() < 1e-6);
    }
}
