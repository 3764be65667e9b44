//! Batched forward and backward passes.

use super::conv::{col2im, im2col, matmul, matmul_at, matmul_bt, softmax, Activations};
use super::{fake_quant_bias, fold_batchnorm, BatchNormParams, TrainedModel, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::qat::{fake_quant_activation, fake_quant_feature_with, fake_quant_unit, squash};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// New running batch-norm statistics produced by a training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsUpdate {
    pub block: usize,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
}

impl Gradients {
    pub fn zeros_like(model: &TrainedModel) -> Self {
        Self {
            blocks: model
                .blocks
                .iter()
                .map(|b| {
                    let bn = b.bn.as_ref().map_or(0, |bn| bn.channels());
                    BlockGrads {
                        weight: vec![0.0; b.weight.len()],
                        bias: vec![0.0; b.bias.len()],
                        gamma: vec![0.0; bn],
                        beta: vec![0.0; bn],
                    }
                })
                .collect(),
        }
    }

    /// Slices in the same order as [`TrainedModel::parameters_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.weight[..], &b.bias[..], &b.gamma[..], &b.beta[..]])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl TrainedModel {
    /// Mutable parameter slices: per block weight, bias, gamma, beta.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            match &mut b.bn {
                Some(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                None => {
                    out.push(&mut []);
                    out.push(&mut []);
                }
            }
        }
        out
    }

    pub fn apply_stats(&mut self, updates: &[StatsUpdate]) {
        for u in updates {
            if let Some(bn) = self.blocks[u.block].bn.as_mut() {
                bn.running_mean.clone_from(&u.running_mean);
                bn.running_var.clone_from(&u.running_var);
            }
        }
        if !updates.is_empty() {
            self.bn_stats_ready = true;
        }
    }

    /// Class posteriors for one standardized `(frames, bins)` input.
    ///
    /// Training mode normalizes with the statistics of this single input and
    /// does not touch the model.
    pub fn forward(&self, features: &[f64], train_mode: bool) -> Result<Vec<f64>> {
        let mode = if train_mode { Mode::Train } else { Mode::Eval };
        let pass = Pass::run(self, &[features], mode, false)?;
        Ok(pass.posteriors().remove(0))
    }

    /// Evaluation-mode posteriors for a batch of inputs.
    pub fn predict(&self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            out.extend(Pass::run(self, chunk, Mode::Eval, false)?.posteriors());
        }
        Ok(out)
    }

    /// Evaluation-mode output of every block for one input, each in `[C][H][W]`
    /// order; the last entry holds the logits.
    pub fn trace(&self, features: &[f64]) -> Result<Vec<Vec<f64>>> {
        let pass = Pass::run(self, &[features], Mode::Eval, true)?;
        Ok(pass.outputs.expect("outputs kept").iter().map(|a| a.sample(0)).collect())
    }
}

enum Norm {
    /// Batch norm (if any) folded with running statistics into `weights_used`.
    Folded { transformed: Vec<f64>, scales: Option<Vec<f64>>, squashed: bool },
    /// Batch statistics of the current batch.
    Batch { xhat: Vec<f64>, inv_std: Vec<f64> },
}

struct BlockTape {
    col: Vec<f64>,
    k: usize,
    cols: usize,
    in_dims: (usize, usize, usize, usize),
    weights_used: Vec<f64>,
    pre: Vec<f64>,
    norm: Norm,
}

/// One forward pass with the state needed for backward.
pub struct Pass {
    pub mode: Mode,
    pub batch: usize,
    /// `[classes][batch]`.
    pub logits: Vec<f64>,
    pub stats_updates: Vec<StatsUpdate>,
    pub outputs: Option<Vec<Activations>>,
    tape: Vec<BlockTape>,
}

fn updated_running(bn: &BatchNormParams, seeded: bool, mean: &[f64], var_biased: &[f64], m: usize) -> (Vec<f64>, Vec<f64>) {
    let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
    let mut rm = Vec::with_capacity(mean.len());
    let mut rv = Vec::with_capacity(mean.len());
    for c in 0..mean.len() {
        let v = var_biased[c] * unbias;
        if seeded {
            rm.push((1.0 - BN_MOMENTUM) * bn.running_mean[c] + BN_MOMENTUM * mean[c]);
            rv.push((1.0 - BN_MOMENTUM) * bn.running_var[c] + BN_MOMENTUM * v);
        } else {
            rm.push(mean[c]);
            rv.push(v);
        }
    }
    (rm, rv)
}

fn channel_moments(u: &[f64], oc: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; oc];
    let mut var = vec![0.0; oc];
    for c in 0..oc {
        let row = &u[c * cols..(c + 1) * cols];
        let m = row.iter().sum::<f64>() / cols as f64;
        mean[c] = m;
        var[c] = row.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / cols as f64;
    }
    (mean, var)
}

fn add_bias(z: &mut [f64], bias: &[f64], cols: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut z[c * cols..(c + 1) * cols] {
            *v += b;
        }
    }
}

impl Pass {
    pub fn run(model: &TrainedModel, inputs: &[&[f64]], mode: Mode, keep_outputs: bool) -> Result<Self> {
        let spec = &model.spec;
        let fq = &model.fq;
        let n = inputs.len();
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let (h0, w0, c0) = spec.input_shape;
        if c0 != 1 {
            return Err(Error::Shape("only single-channel inputs are supported".into()));
        }
        let mut x = Activations::zeros(1, n, h0, w0);
        for (i, inp) in inputs.iter().enumerate() {
            if inp.len() != h0 * w0 {
                return Err(Error::Shape(format!(
                    "input {i} has {} values, model expects {h0}x{w0}",
                    inp.len()
                )));
            }
            let dst = &mut x.data[i * h0 * w0..(i + 1) * h0 * w0];
            if fq.enabled {
                let q = model.input_q()?;
                for (d, &f) in dst.iter_mut().zip(inp.iter()) {
                    *d = fake_quant_feature_with(f, fq.input_bits, q, fq.input_rounding)?;
                }
            } else {
                dst.copy_from_slice(inp);
            }
        }

        let geometry = spec.geometry()?;
        let mut tape = Vec::with_capacity(spec.blocks.len());
        let mut stats_updates = Vec::new();
        let mut outputs = keep_outputs.then(Vec::new);
        for (i, (conv, params)) in spec.blocks.iter().zip(&model.blocks).enumerate() {
            let (col, oh, ow) = im2col(&x, conv, 0.0);
            let k = conv.fan_in();
            let oc = conv.out_channels;
            let cols = n * oh * ow;
            let in_dims = (x.channels, x.batch, x.height, x.width);
            debug_assert_eq!((oh, ow), geometry[i].out_hw);

            let (weights_used, pre, norm) = match (&params.bn, fq.enabled, mode) {
                (Some(bn), false, Mode::Train) => {
                    let mut u = matmul(&params.weight, &col, oc, k, cols);
                    add_bias(&mut u, &params.bias, cols);
                    let (mean, var) = channel_moments(&u, oc, cols);
                    let (rm, rv) = updated_running(bn, model.bn_stats_ready, &mean, &var, cols);
                    stats_updates.push(StatsUpdate { block: i, running_mean: rm, running_var: rv });
                    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + bn.eps).sqrt()).collect();
                    let mut xhat = u;
                    let mut y = vec![0.0; oc * cols];
                    for c in 0..oc {
                        for j in 0..cols {
                            let idx = c * cols + j;
                            xhat[idx] = (xhat[idx] - mean[c]) * inv_std[c];
                            y[idx] = bn.gamma[c] * xhat[idx] + bn.beta[c];
                        }
                    }
                    (params.weight.clone(), y, Norm::Batch { xhat, inv_std })
                }
                (bn, enabled, mode) => {
                    let transformed: Vec<f64> = if enabled {
                        params.weight.iter().map(|&w| squash(w)).collect()
                    } else {
                        params.weight.clone()
                    };
                    let mut live_bn = bn.clone();
                    if let (Some(bn), true, Mode::Train) = (bn, enabled, mode) {
                        let mut u = matmul(&transformed, &col, oc, k, cols);
                        add_bias(&mut u, &params.bias, cols);
                        let (mean, var) = channel_moments(&u, oc, cols);
                        let (rm, rv) = updated_running(bn, model.bn_stats_ready, &mean, &var, cols);
                        let live = live_bn.as_mut().expect("batch norm present");
                        live.running_mean.clone_from(&rm);
                        live.running_var.clone_from(&rv);
                        stats_updates.push(StatsUpdate { block: i, running_mean: rm, running_var: rv });
                    }
                    let (mut w, mut b, scales) = match &live_bn {
                        Some(bn) => {
                            let (w, b) = fold_batchnorm(&transformed, &params.bias, bn)?;
                            (w, b, Some(bn.scales()?))
                        }
                        None => (transformed.clone(), params.bias.clone(), None),
                    };
                    if enabled {
                        let q = model.accumulator_q(i)?;
                        for v in &mut w {
                            *v = fake_quant_unit(v.clamp(-1.0, 1.0), fq.weight_bits);
                        }
                        for v in &mut b {
                            *v = fake_quant_bias(*v, q);
                        }
                    }
                    let mut z = matmul(&w, &col, oc, k, cols);
                    add_bias(&mut z, &b, cols);
                    (w, z, Norm::Folded { transformed, scales, squashed: enabled })
                }
            };

            let mut out = Activations { channels: oc, batch: n, height: oh, width: ow, data: pre.clone() };
            if !spec.is_classifier(i) {
                let clip = fq.act_clip;
                for v in &mut out.data {
                    *v = if fq.enabled {
                        fake_quant_activation(*v, fq.activation_bits, clip)
                    } else {
                        v.clamp(0.0, clip)
                    };
                }
            }
            tape.push(BlockTape { col, k, cols, in_dims, weights_used, pre, norm });
            if let Some(o) = outputs.as_mut() {
                o.push(out.clone());
            }
            x = out;
        }
        Ok(Self { mode, batch: n, logits: x.data, stats_updates, outputs, tape })
    }

    pub fn posteriors(&self) -> Vec<Vec<f64>> {
        let classes = self.logits.len() / self.batch;
        (0..self.batch)
            .map(|n| {
                let z: Vec<f64> = (0..classes).map(|c| self.logits[c * self.batch + n]).collect();
                softmax(&z)
            })
            .collect()
    }

    /// Mean cross entropy over the batch and its gradient w.r.t. the logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        if labels.len() != self.batch {
            return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), self.batch)));
        }
        let classes = self.logits.len() / self.batch;
        let mut grad = vec![0.0; self.logits.len()];
        let mut loss = 0.0;
        for (n, (p, &y)) in self.posteriors().iter().zip(labels).enumerate() {
            if y >= classes {
                return Err(Error::Shape(format!("label {y} out of range for {classes} classes")));
            }
            loss -= p[y].max(1e-300).ln();
            for c in 0..classes {
                let target = if c == y { 1.0 } else { 0.0 };
                grad[c * self.batch + n] = (p[c] - target) / self.batch as f64;
            }
        }
        Ok((loss / self.batch as f64, grad))
    }

    /// Parameter gradients for an upstream gradient on the logits (`[classes][batch]`).
    ///
    /// Quantizers are straight-through; clipped ReLUs pass gradient only
    /// strictly inside `(0, c_a)`.
    pub fn backward(&self, model: &TrainedModel, dlogits: &[f64]) -> Result<Gradients> {
        if dlogits.len() != self.logits.len() {
            return Err(Error::Shape("logit gradient has the wrong length".into()));
        }
        let spec = &model.spec;
        let mut grads = Gradients::zeros_like(model);
        let mut upstream = dlogits.to_vec();
        for i in (0..spec.blocks.len()).rev() {
            let t = &self.tape[i];
            let conv = &spec.blocks[i];
            let params = &model.blocks[i];
            let oc = conv.out_channels;
            let mut dy = upstream;
            if !spec.is_classifier(i) {
                let clip = model.fq.act_clip;
                for (g, &y) in dy.iter_mut().zip(&t.pre) {
                    if !(y > 0.0 && y < clip) {
                        *g = 0.0;
                    }
                }
            }
            let g = &mut grads.blocks[i];
            let dz = match &t.norm {
                Norm::Batch { xhat, inv_std } => {
                    let bn = params.bn.as_ref().expect("batch statistics imply batch norm");
                    let m = t.cols as f64;
                    let mut du = vec![0.0; dy.len()];
                    for c in 0..oc {
                        let row = c * t.cols..(c + 1) * t.cols;
                        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                        for j in row.clone() {
                            sum_dy += dy[j];
                            sum_dy_xhat += dy[j] * xhat[j];
                        }
                        g.gamma[c] = sum_dy_xhat;
                        g.beta[c] = sum_dy;
                        let gamma = bn.gamma[c];
                        let (sdx, sdxx) = (gamma * sum_dy, gamma * sum_dy_xhat);
                        for j in row {
                            let dxhat = dy[j] * gamma;
                            du[j] = inv_std[c] / m * (m * dxhat - sdx - xhat[j] * sdxx);
                        }
                    }
                    let dw = matmul_bt(&du, &t.col, oc, t.cols, t.k);
                    g.weight.copy_from_slice(&dw);
                    for c in 0..oc {
                        g.bias[c] = du[c * t.cols..(c + 1) * t.cols].iter().sum();
                    }
                    du
                }
                Norm::Folded { transformed, scales, squashed } => {
                    let dw_eff = matmul_bt(&dy, &t.col, oc, t.cols, t.k);
                    let db_eff: Vec<f64> = (0..oc).map(|c| dy[c * t.cols..(c + 1) * t.cols].iter().sum()).collect();
                    let fan = t.k;
                    for c in 0..oc {
                        let s = scales.as_ref().map_or(1.0, |s| s[c]);
                        for j in 0..fan {
                            let idx = c * fan + j;
                            let dw_t = dw_eff[idx] * s;
                            g.weight[idx] = if *squashed {
                                let t = transformed[idx];
                                dw_t * (1.0 - t * t)
                            } else {
                                dw_t
                            };
                        }
                        g.bias[c] = db_eff[c] * s;
                    }
                    if let (Some(bn), Some(scales)) = (&params.bn, scales) {
                        for c in 0..oc {
                            let inv_sigma = scales[c] / bn.gamma[c];
                            let inv_sigma = if inv_sigma.is_finite() {
                                inv_sigma
                            } else {
                                1.0 / (bn.running_var[c] + bn.eps).sqrt()
                            };
                            let row = &transformed[c * fan..(c + 1) * fan];
                            let dw_row = &dw_eff[c * fan..(c + 1) * fan];
                            let dot: f64 = row.iter().zip(dw_row).map(|(a, b)| a * b).sum();
                            g.gamma[c] = inv_sigma * (dot + db_eff[c] * (params.bias[c] - bn.running_mean[c]));
                            g.beta[c] = db_eff[c];
                        }
                    }
                    dy
                }
            };
            if i == 0 {
                break;
            }
            let dcol = matmul_at(&t.weights_used, &dz, oc, t.k, t.cols);
            let (c, n, h, w) = t.in_dims;
            upstream = col2im(&dcol, conv, c, n, h, w).data;
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::DatasetStats;
    use crate::graph::{ConvSpec, ModelSpec};
    use crate::qat::{FakeQuantConfig, QatMethod};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            blocks: vec![
                ConvSpec { kernel: (3, 3), in_channels: 1, out_channels: 4, stride: (2, 2), padding: (1, 1) },
                ConvSpec { kernel: (4, 4), in_channels: 4, out_channels: 3, stride: (1, 1), padding: (0, 0) },
            ],
            num_classes: 3,
            input_shape: (8, 8, 1),
        }
    }

    fn stats(bins: usize) -> DatasetStats {
        DatasetStats { mean: vec![0.0; bins], std: vec![1.0; bins], max_abs: 4.0 }
    }

    fn random_inputs(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect()
    }

    #[test]
    fn zero_model_gives_uniform_posterior() {
        let spec = ModelSpec::desk(4);
        let mut m = TrainedModel::init(spec, stats(64), FakeQuantConfig::disabled(), 1).unwrap();
        for b in &mut m.blocks {
            b.weight.iter_mut().for_each(|w| *w = 0.0);
        }
        let x = random_inputs(1, 76 * 64, 3).remove(0);
        let p = m.forward(&x, false).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn posteriors_sum_to_one() {
        let m = TrainedModel::init(ModelSpec::desk(4), stats(64), FakeQuantConfig::qat(QatMethod::Acr, 6, 6).unwrap(), 5).unwrap();
        for x in random_inputs(5, 76 * 64, 9) {
            for train in [false, true] {
                let p = m.forward(&x, train).unwrap();
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = TrainedModel::init(ModelSpec::desk(4), stats(64), FakeQuantConfig::disabled(), 1).unwrap();
        assert!(matches!(m.forward(&[0.0; 10], false), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = TrainedModel::init(tiny_spec(), stats(8), FakeQuantConfig::disabled(), 2).unwrap();
        let xs = random_inputs(3, 64, 4);
        let refs: Vec<&[f64]> = xs.iter().map(|v| &v[..]).collect();
        let pass = Pass::run(&m, &refs, Mode::Train, false).unwrap();
        let g = pass.backward(&m, &vec![0.0; pass.logits.len()]).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    fn loss_of(m: &TrainedModel, refs: &[&[f64]], labels: &[usize]) -> f64 {
        Pass::run(m, refs, Mode::Train, false).unwrap().cross_entropy(labels).unwrap().0
    }

    #[test]
    fn flp_gradients_match_finite_differences() {
        let mut m = TrainedModel::init(tiny_spec(), stats(8), FakeQuantConfig::disabled(), 11).unwrap();
        m.fq.act_clip = 4.0;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for b in &mut m.blocks {
            for v in &mut b.bias {
                *v = rng.gen_range(-0.2..0.2);
            }
            if let Some(bn) = &mut b.bn {
                for v in &mut bn.gamma {
                    *v = rng.gen_range(0.5..1.5);
                }
                for v in &mut bn.beta {
                    *v = rng.gen_range(0.5..1.0);
                }
            }
        }
        let xs = random_inputs(4, 64, 13);
        let refs: Vec<&[f64]> = xs.iter().map(|v| &v[..]).collect();
        let labels = [0, 2, 1, 2];
        let pass = Pass::run(&m, &refs, Mode::Train, false).unwrap();
        let (_, dl) = pass.cross_entropy(&labels).unwrap();
        let g = pass.backward(&m, &dl).unwrap();
        let analytic: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (si, grads) in analytic.iter().enumerate() {
            for (j, &an) in grads.iter().enumerate() {
                let mut plus = m.clone();
                plus.parameters_mut()[si][j] += h;
                let mut minus = m.clone();
                minus.parameters_mut()[si][j] -= h;
                let fd = (loss_of(&plus, &refs, &labels) - loss_of(&minus, &refs, &labels)) / (2.0 * h);
                // Conv biases ahead of batch statistics have zero true gradient.
                if fd.abs().max(an.abs()) < 1e-8 {
                    continue;
                }
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn quantized_gradient_is_flp_gradient_at_quantized_weight_times_tanh_prime() {
        // One 1x1 conv, one input value, two classes.
        let spec = ModelSpec {
            blocks: vec![ConvSpec { kernel: (1, 1), in_channels: 1, out_channels: 2, stride: (1, 1), padding: (0, 0) }],
            num_classes: 2,
            input_shape: (1, 1, 1),
        };
        let mut fq = FakeQuantConfig::qat(QatMethod::None, 6, 6).unwrap();
        fq.input_q = Some(crate::fxp_core::QFormat::new(4).unwrap());
        let mut q = TrainedModel::init(spec, stats(1), fq, 3).unwrap();
        q.blocks[0].weight = vec![0.37, -0.81];
        let x = [0.6875];
        let pq = Pass::run(&q, &[&x[..]], Mode::Train, false).unwrap();
        let (_, dl) = pq.cross_entropy(&[1]).unwrap();
        let gq = pq.backward(&q, &dl).unwrap();

        let (wq, bq) = q.quantized_block(0).unwrap();
        let mut f = q.clone();
        f.fq = FakeQuantConfig::disabled();
        f.blocks[0].weight = wq;
        f.blocks[0].bias = bq;
        let pf = Pass::run(&f, &[&x[..]], Mode::Train, false).unwrap();
        let (_, dlf) = pf.cross_entropy(&[1]).unwrap();
        let gf = pf.backward(&f, &dlf).unwrap();
        for j in 0..2 {
            let raw = q.blocks[0].weight[j];
            let want = gf.blocks[0].weight[j] * (1.0 - raw.tanh().powi(2));
            assert!((gq.blocks[0].weight[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn sixteen_bit_fake_quant_tracks_float_forward() {
        let mut fq = FakeQuantConfig::qat(QatMethod::None, 16, 16).unwrap();
        fq.input_bits = crate::fxp_core::BitWidth::new(16).unwrap();
        let st = stats(64);
        let q = TrainedModel::init(ModelSpec::desk(4), st.clone(), fq, 21).unwrap();
        // The same function without quantizers: squash the latent weights up front.
        let mut f = q.clone();
        f.fq = FakeQuantConfig::disabled();
        for b in &mut f.blocks {
            b.weight.iter_mut().for_each(|w| *w = w.tanh());
        }
        let mut worst: f64 = 0.0;
        for x in random_inputs(10, 76 * 64, 22) {
            let pq = q.forward(&x, false).unwrap();
            let pf = f.forward(&x, false).unwrap();
            for (a, b) in pq.iter().zip(&pf) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-3, "L-inf posterior gap {worst}");
    }
}
