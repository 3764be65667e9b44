//! Desk-scale training: Adam under a warmup-then-linear-decay schedule, cross
//! entropy plus the configured quantization regularizer.

mod grid;
pub mod metrics;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DatasetStats, FeatureSet};
use crate::graph::{save_checkpoint, Gradients, Mode, ModelSpec, Pass, TrainedModel};
use crate::qat::{acr_reg_grad, acr_reg_loss, sqwd_reg_grad, sqwd_reg_loss, squash, FakeQuantConfig, QatMethod};

pub use grid::{eval_grid, GridResult};
pub use metrics::{accuracy, confusion, det_curve, det_metrics, DetPoint, EvalResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_fraction: f64,
    pub fq: FakeQuantConfig,
    pub seed: u64,
    /// Validation accuracy is computed every this many steps (0 disables).
    pub eval_every: usize,
    /// Log a record every this many steps.
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 5000,
            batch_size: 32,
            peak_lr: 1e-3,
            final_lr: 1e-5,
            warmup_fraction: 0.10,
            fq: FakeQuantConfig::disabled(),
            seed: 0,
            eval_every: 500,
            log_every: 50,
            checkpoint_every: 1000,
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction)));
        }
        if !(self.final_lr >= 0.0 && self.final_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return Err(Error::Config("need 0 <= final_lr <= peak_lr".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        self.fq.validate()
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to `final_lr` at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidStep { step, total: cfg.total_steps });
    }
    let total = cfg.total_steps as f64;
    let warm = cfg.warmup_fraction * total;
    let s = step as f64;
    Ok(if s < warm {
        cfg.peak_lr * s / warm
    } else {
        cfg.peak_lr + (cfg.final_lr - cfg.peak_lr) * (s - warm) / (total - warm)
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Value of the configured regularizer (including `lambda_reg`).
pub fn regularizer_value(model: &TrainedModel) -> Result<f64> {
    let fq = &model.fq;
    Ok(match fq.method {
        QatMethod::None => 0.0,
        QatMethod::Sqwd => sqwd_reg_loss(&model.all_raw_weights(), fq.lambda_reg),
        QatMethod::Acr => acr_reg_loss(&acr_targets(model)?, fq.weight_bits, fq.lambda_reg),
    })
}

/// Weights the ACR penalty sees: the quantizer input when fake quantization is on, raw weights otherwise.
fn acr_targets(model: &TrainedModel) -> Result<Vec<f64>> {
    if !model.fq.enabled {
        return Ok(model.all_raw_weights());
    }
    let mut out = Vec::new();
    for i in 0..model.blocks.len() {
        out.extend(model.prequant_weights(i)?);
    }
    Ok(out)
}

/// Add the regularizer gradient to `grads`; returns the regularizer value.
fn add_regularizer(model: &TrainedModel, grads: &mut Gradients) -> Result<f64> {
    let fq = &model.fq;
    if !fq.regularized() {
        return Ok(0.0);
    }
    let count: usize = model.blocks.iter().map(|b| b.weight.len()).sum();
    match fq.method {
        QatMethod::None => {}
        QatMethod::Sqwd => {
            for (b, g) in model.blocks.iter().zip(&mut grads.blocks) {
                for (gw, &w) in g.weight.iter_mut().zip(&b.weight) {
                    *gw += sqwd_reg_grad(w, fq.lambda_reg, count);
                }
            }
        }
        QatMethod::Acr => {
            for (i, (b, g)) in model.blocks.iter().zip(&mut grads.blocks).enumerate() {
                if !fq.enabled {
                    for (gw, &w) in g.weight.iter_mut().zip(&b.weight) {
                        *gw += acr_reg_grad(w, fq.weight_bits, fq.lambda_reg, count);
                    }
                    continue;
                }
                let fan = model.spec.blocks[i].fan_in();
                let scales = match &b.bn {
                    Some(bn) => Some(bn.scales()?),
                    None => None,
                };
                for (j, (gw, &w)) in g.weight.iter_mut().zip(&b.weight).enumerate() {
                    let c = j / fan;
                    let t = squash(w);
                    let s = scales.as_ref().map_or(1.0, |s| s[c]);
                    let folded = t * s;
                    if folded.abs() > 1.0 {
                        continue;
                    }
                    let d = acr_reg_grad(folded, fq.weight_bits, fq.lambda_reg, count);
                    *gw += d * s * (1.0 - t * t);
                    if let Some(bn) = &b.bn {
                        if bn.gamma[c] != 0.0 {
                            g.gamma[c] += d * folded / bn.gamma[c];
                        }
                    }
                }
            }
        }
    }
    regularizer_value(model)
}

/// One JSON-lines training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub ce_loss: f64,
    pub reg_loss: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: TrainedModel,
    pub history: Vec<LogRecord>,
    /// Regularizer value of the freshly initialized model.
    pub initial_reg: f64,
    pub final_reg: f64,
}

/// Standardized splits plus the training statistics used to produce them.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub stats: DatasetStats,
    pub train: FeatureSet,
    pub validation: Option<FeatureSet>,
}

impl TrainData {
    /// Fit statistics on `train` and standardize both splits with them.
    pub fn prepare(train: &FeatureSet, validation: Option<&FeatureSet>) -> Result<Self> {
        let stats = DatasetStats::fit(train)?;
        Ok(Self {
            train: train.standardize(&stats)?,
            validation: validation.map(|v| v.standardize(&stats)).transpose()?,
            stats,
        })
    }
}

/// Evaluation-mode posteriors for a standardized feature set.
pub fn predict(model: &TrainedModel, set: &FeatureSet) -> Result<Vec<Vec<f64>>> {
    if !set.standardized {
        return Err(Error::Pipeline("features must be standardized with the training statistics".into()));
    }
    let refs: Vec<&[f64]> = set.inputs.iter().map(|v| &v[..]).collect();
    model.predict(&refs)
}

pub fn evaluate(model: &TrainedModel, set: &FeatureSet) -> Result<f64> {
    accuracy(&predict(model, set)?, &set.labels)
}

pub fn train(spec: &ModelSpec, data: &TrainData, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if !data.train.standardized {
        return Err(Error::Pipeline("training features must be standardized".into()));
    }
    if data.train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let mut model = TrainedModel::init(spec.clone(), data.stats.clone(), cfg.fq.clone(), cfg.seed)?;
    let shapes: Vec<usize> = model.parameters_mut().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(&shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_ba7c);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();
    let mut log = match &cfg.log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let initial_reg = regularizer_value(&model)?;
    let mut history = Vec::new();
    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let inputs: Vec<&[f64]> = batch.iter().map(|&i| &data.train.inputs[i][..]).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| data.train.labels[i]).collect();
        let pass = Pass::run(&model, &inputs, Mode::Train, false)?;
        let (ce, dlogits) = pass.cross_entropy(&labels)?;
        let mut grads = pass.backward(&model, &dlogits)?;
        let reg = add_regularizer(&model, &mut grads)?;
        if !ce.is_finite() || !reg.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step, detail: format!("ce {ce}, reg {reg}") });
        }
        let lr = lr_at(step + 1, cfg)?;
        model.apply_stats(&pass.stats_updates);
        adam.step(&mut model.parameters_mut(), &grads.slices(), lr);

        let done = step + 1;
        let eval_now = cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.total_steps);
        if done % cfg.log_every == 0 || eval_now || step == 0 {
            let eval_accuracy = match (&data.validation, eval_now) {
                (Some(v), true) if !v.is_empty() => Some(evaluate(&model, v)?),
                _ => None,
            };
            let rec = LogRecord { step: done, lr, ce_loss: ce, reg_loss: reg, eval_accuracy };
            log::debug!("step {done}: ce {ce:.4} reg {reg:.3e} lr {lr:.2e}");
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            history.push(rec);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                save_checkpoint(&model, &dir.join(format!("step-{done:07}.fxck")))?;
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(&model, &dir.join("final.fxck"))?;
    }
    let final_reg = regularizer_value(&model)?;
    Ok(TrainRun { model, history, initial_reg, final_reg })
}
