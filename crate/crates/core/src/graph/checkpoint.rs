//! Model checkpoints: `FXCK`, a little-endian u16 version, a u32 header
//! length, a JSON header, then every parameter tensor as little-endian f32 in
//! declaration order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BatchNormParams, BlockParams, ModelSpec, TrainedModel};
use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::features::DatasetStats;
use crate::qat::FakeQuantConfig;

const MAGIC: &[u8; 4] = b"FXCK";
const VERSION: u16 = 1;
const SCHEMA: &str = "fxqat.checkpoint/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    spec: ModelSpec,
    fq: FakeQuantConfig,
    stats: DatasetStats,
    bn_stats_ready: bool,
    bn_eps: Vec<Option<f64>>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    len: usize,
}

fn tensors(model: &TrainedModel) -> Vec<(String, &[f64])> {
    let mut out = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        out.push((format!("block{i}.weight"), &b.weight[..]));
        out.push((format!("block{i}.bias"), &b.bias[..]));
        if let Some(bn) = &b.bn {
            out.push((format!("block{i}.bn.gamma"), &bn.gamma[..]));
            out.push((format!("block{i}.bn.beta"), &bn.beta[..]));
            out.push((format!("block{i}.bn.running_mean"), &bn.running_mean[..]));
            out.push((format!("block{i}.bn.running_var"), &bn.running_var[..]));
        }
    }
    out
}

pub fn write_checkpoint<W: Write>(model: &TrainedModel, mut w: W) -> Result<()> {
    model.validate()?;
    let list = tensors(model);
    let header = Header {
        schema: SCHEMA.into(),
        spec: model.spec.clone(),
        fq: model.fq.clone(),
        stats: model.stats.clone(),
        bn_stats_ready: model.bn_stats_ready,
        bn_eps: model.blocks.iter().map(|b| b.bn.as_ref().map(|bn| bn.eps)).collect(),
        tensors: list.iter().map(|(name, t)| TensorEntry { name: name.clone(), len: t.len() }).collect(),
    };
    let mut body = Vec::new();
    for (_, t) in &list {
        for &v in *t {
            body.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_container(&mut w, MAGIC, VERSION, &serde_json::to_vec(&header)?, &body)
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<TrainedModel> {
    let (header, body) = read_container(r, MAGIC, VERSION, "checkpoint")?;
    let bad = |detail: String| Error::Format { what: "checkpoint", detail };
    let header: Header = serde_json::from_slice(&header).map_err(|e| bad(format!("header: {e}")))?;
    if header.schema != SCHEMA {
        return Err(bad(format!("unknown schema `{}`", header.schema)));
    }
    header.spec.validate()?;
    if header.bn_eps.len() != header.spec.blocks.len() {
        return Err(bad("batch-norm table does not match the block count".into()));
    }
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if body.len() != 4 * total {
        return Err(bad(format!("expected {} parameter bytes, found {}", 4 * total, body.len())));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut entries = header.tensors.iter();
    let mut take = |name: String, len: usize| -> Result<Vec<f64>> {
        match entries.next() {
            Some(e) if e.name == name && e.len == len => Ok(values.by_ref().take(len).collect()),
            Some(e) => Err(bad(format!("expected tensor {name} ({len}), found {} ({})", e.name, e.len))),
            None => Err(bad(format!("missing tensor {name}"))),
        }
    };
    let mut blocks = Vec::with_capacity(header.spec.blocks.len());
    for (i, (conv, eps)) in header.spec.blocks.iter().zip(&header.bn_eps).enumerate() {
        let weight = take(format!("block{i}.weight"), conv.weight_len())?;
        let bias = take(format!("block{i}.bias"), conv.out_channels)?;
        let bn = match eps {
            Some(eps) => {
                let c = conv.out_channels;
                Some(BatchNormParams {
                    gamma: take(format!("block{i}.bn.gamma"), c)?,
                    beta: take(format!("block{i}.bn.beta"), c)?,
                    running_mean: take(format!("block{i}.bn.running_mean"), c)?,
                    running_var: take(format!("block{i}.bn.running_var"), c)?,
                    eps: *eps,
                })
            }
            None => None,
        };
        blocks.push(BlockParams { weight, bias, bn });
    }
    if entries.next().is_some() {
        return Err(bad("unexpected extra tensors".into()));
    }
    let model = TrainedModel {
        spec: header.spec,
        blocks,
        stats: header.stats,
        fq: header.fq,
        bn_stats_ready: header.bn_stats_ready,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    read_checkpoint(fs::File::open(path)?)
}
