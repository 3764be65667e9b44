//! `FXPM` files: magic, u16 version, u32 header length, JSON header, then
//! little-endian integer blobs at the offsets the header declares.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AccumulatorConfig, ActFormat, EngineMode, FxpLayer, FxpModel};
use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::features::DatasetStats;
use crate::fxp_core::{BitWidth, FxpTensor, QFormat, RoundingConvention};
use crate::graph::{ConvSpec, ModelSpec};

const MAGIC: &[u8; 4] = b"FXPM";
const VERSION: u16 = 1;
const SCHEMA: &str = "fxqat.fxpm/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    Int8,
    Int16,
    Int32,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::Int8 => 1,
            Dtype::Int16 => 2,
            Dtype::Int32 => 4,
        }
    }

    fn for_bits(bits: BitWidth) -> Self {
        if bits.get() <= 8 {
            Dtype::Int8
        } else {
            Dtype::Int16
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Blob {
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerHeader {
    conv: ConvSpec,
    weight_bits: BitWidth,
    weight_q: QFormat,
    weights: Blob,
    bias: Blob,
    acc_q: i32,
    input: ActFormat,
    output: Option<ActFormat>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    spec: ModelSpec,
    mode: EngineMode,
    weight_bits: BitWidth,
    activation_bits: BitWidth,
    input_bits: BitWidth,
    input_q: QFormat,
    input_rounding: RoundingConvention,
    act_clip: f64,
    accumulator: AccumulatorConfig,
    stats: DatasetStats,
    layers: Vec<LayerHeader>,
}

fn push(body: &mut Vec<u8>, dtype: Dtype, values: &[i32]) -> Result<usize> {
    let offset = body.len();
    for &v in values {
        match dtype {
            Dtype::Int8 => body.extend_from_slice(
                &i8::try_from(v).map_err(|_| Error::Export(format!("{v} does not fit int8")))?.to_le_bytes(),
            ),
            Dtype::Int16 => body.extend_from_slice(
                &i16::try_from(v).map_err(|_| Error::Export(format!("{v} does not fit int16")))?.to_le_bytes(),
            ),
            Dtype::Int32 => body.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(offset)
}

fn take(body: &[u8], blob: &Blob) -> Result<Vec<i32>> {
    let n: usize = blob.shape.iter().product();
    let size = blob.dtype.size();
    let end = blob
        .offset
        .checked_add(n * size)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Format { what: "FXPM", detail: "tensor extends past the end of the file".into() })?;
    Ok(body[blob.offset..end]
        .chunks_exact(size)
        .map(|c| match blob.dtype {
            Dtype::Int8 => c[0] as i8 as i32,
            Dtype::Int16 => i16::from_le_bytes([c[0], c[1]]) as i32,
            Dtype::Int32 => i32::from_le_bytes([c[0], c[1], c[2], c[3]]),
        })
        .collect())
}

pub fn write_model<W: Write>(m: &FxpModel, mut w: W) -> Result<()> {
    m.validate()?;
    let mut body = Vec::new();
    let mut layers = Vec::with_capacity(m.layers.len());
    for l in &m.layers {
        let wd = Dtype::for_bits(l.weights.bits());
        let woff = push(&mut body, wd, l.weights.codes())?;
        let boff = push(&mut body, Dtype::Int32, &l.bias)?;
        layers.push(LayerHeader {
            conv: l.conv,
            weight_bits: l.weights.bits(),
            weight_q: l.weights.q(),
            weights: Blob { dtype: wd, shape: l.weights.shape().to_vec(), offset: woff },
            bias: Blob { dtype: Dtype::Int32, shape: vec![l.bias.len()], offset: boff },
            acc_q: l.acc_q,
            input: l.input,
            output: l.output,
        });
    }
    let header = Header {
        schema: SCHEMA.into(),
        spec: m.spec.clone(),
        mode: m.mode,
        weight_bits: m.weight_bits,
        activation_bits: m.activation_bits,
        input_bits: m.input_bits,
        input_q: m.input_q,
        input_rounding: m.input_rounding,
        act_clip: m.act_clip,
        accumulator: m.accumulator,
        stats: m.stats.clone(),
        layers,
    };
    let json = serde_json::to_vec_pretty(&header)?;
    write_container(&mut w, MAGIC, VERSION, &json, &body)
}

pub fn read_model<R: Read>(r: R) -> Result<FxpModel> {
    let (header, body) = read_container(r, MAGIC, VERSION, "FXPM")?;
    let bad = |detail: String| Error::Format { what: "FXPM", detail };
    let h: Header = serde_json::from_slice(&header).map_err(|e| bad(format!("header: {e}")))?;
    if h.schema != SCHEMA {
        return Err(bad(format!("unknown schema `{}`", h.schema)));
    }
    let mut layers = Vec::with_capacity(h.layers.len());
    for l in h.layers {
        let codes = take(&body, &l.weights)?;
        let weights = FxpTensor::new(l.weights.shape.clone(), codes, l.weight_bits, l.weight_q)?;
        if l.bias.dtype != Dtype::Int32 {
            return Err(bad("bias tensors must be int32".into()));
        }
        let bias = take(&body, &l.bias)?;
        layers.push(FxpLayer { conv: l.conv, weights, bias, acc_q: l.acc_q, input: l.input, output: l.output });
    }
    let m = FxpModel {
        spec: h.spec,
        mode: h.mode,
        weight_bits: h.weight_bits,
        activation_bits: h.activation_bits,
        input_bits: h.input_bits,
        input_q: h.input_q,
        input_rounding: h.input_rounding,
        act_clip: h.act_clip,
        layers,
        accumulator: h.accumulator,
        stats: h.stats,
    };
    m.validate()?;
    Ok(m)
}

pub fn save_model(m: &FxpModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_model(m, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FxpModel> {
    read_model(fs::File::open(path)?)
}
