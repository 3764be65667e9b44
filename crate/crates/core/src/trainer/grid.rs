//! Accuracy over a grid of weight and activation precisions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, TrainConfig, TrainData};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::graph::ModelSpec;
use crate::qat::{FakeQuantConfig, QatMethod};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub schema: String,
    pub method: QatMethod,
    pub flp_accuracy: f64,
    pub weight_bits: Vec<u32>,
    pub act_bits: Vec<u32>,
    /// `accuracy[i][j]` for `weight_bits[i]` and `act_bits[j]`.
    pub accuracy: Vec<Vec<f64>>,
}

impl GridResult {
    pub const SCHEMA: &'static str = "fxqat.grid/1";

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:?} accuracy (%) by weight (w) and activation (a) bits; full precision: {:.1}\n",
            self.method,
            100.0 * self.flp_accuracy
        );
        let _ = write!(out, "{:>6}", "w \\ a");
        for a in &self.act_bits {
            let _ = write!(out, "{a:>8}");
        }
        out.push('\n');
        for (w, row) in self.weight_bits.iter().zip(&self.accuracy) {
            let _ = write!(out, "{w:>6}");
            for acc in row {
                let _ = write!(out, "{:>8.1}", 100.0 * acc);
            }
            out.push('\n');
        }
        out
    }
}

/// Train one model per cell with the same seed, plus a full-precision reference.
pub fn eval_grid(
    spec: &ModelSpec,
    data: &TrainData,
    test: &FeatureSet,
    weight_bits: &[u32],
    act_bits: &[u32],
    method: QatMethod,
    base: &TrainConfig,
) -> Result<GridResult> {
    if weight_bits.is_empty() || act_bits.is_empty() {
        return Err(Error::InvalidInput("empty precision grid".into()));
    }
    let flp_cfg = TrainConfig { fq: FakeQuantConfig { act_clip: base.fq.act_clip, ..FakeQuantConfig::disabled() }, ..base.clone() };
    let flp = train(spec, data, &flp_cfg)?;
    let flp_accuracy = evaluate(&flp.model, test)?;
    let mut accuracy = Vec::with_capacity(weight_bits.len());
    for &w in weight_bits {
        let mut row = Vec::with_capacity(act_bits.len());
        for &a in act_bits {
            let mut fq = FakeQuantConfig::qat(method, w, a)?;
            fq.act_clip = base.fq.act_clip;
            fq.input_bits = base.fq.input_bits;
            if base.fq.enabled && base.fq.method == method {
                fq.lambda_reg = base.fq.lambda_reg;
            }
            let run = train(spec, data, &TrainConfig { fq, ..base.clone() })?;
            let acc = evaluate(&run.model, test)?;
            log::info!("{method:?} w{w} a{a}: {:.2}%", 100.0 * acc);
            row.push(acc);
        }
        accuracy.push(row);
    }
    Ok(GridResult {
        schema: GridResult::SCHEMA.into(),
        method,
        flp_accuracy,
        weight_bits: weight_bits.to_vec(),
        act_bits: act_bits.to_vec(),
        accuracy,
    })
}
