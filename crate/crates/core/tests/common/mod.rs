#![allow(dead_code)]

use std::sync::OnceLock;

use fxqat::features::{synth_dataset, FeatureSet, Split};
use fxqat::graph::{ModelSpec, TrainedModel};
use fxqat::qat::{FakeQuantConfig, QatMethod};
use fxqat::trainer::{train, TrainConfig, TrainData};

pub struct Fixture {
    pub data: TrainData,
    pub test: FeatureSet,
}

/// A small synthetic task, standardized with its training statistics.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let ds = synth_dataset(3, 30, 4).unwrap();
        let train_set = FeatureSet::extract(&ds, Split::Train).unwrap();
        let val = FeatureSet::extract(&ds, Split::Validation).unwrap();
        let test = FeatureSet::extract(&ds, Split::Test).unwrap();
        let data = TrainData::prepare(&train_set, Some(&val)).unwrap();
        let test = test.standardize(&data.stats).unwrap();
        Fixture { data, test }
    })
}

pub fn quick_config(fq: FakeQuantConfig, steps: usize) -> TrainConfig {
    TrainConfig { total_steps: steps, eval_every: 0, log_every: 10, seed: 11, fq, ..Default::default() }
}

pub fn quick_train(fq: FakeQuantConfig, steps: usize) -> TrainedModel {
    train(&ModelSpec::desk(4), &fixture().data, &quick_config(fq, steps)).unwrap().model
}

/// An 8-bit ACR model trained briefly; shared by the export tests.
pub fn qat8() -> &'static TrainedModel {
    static M: OnceLock<TrainedModel> = OnceLock::new();
    M.get_or_init(|| quick_train(FakeQuantConfig::qat(QatMethod::Acr, 8, 8).unwrap(), 300))
}

pub fn flp() -> &'static TrainedModel {
    static M: OnceLock<TrainedModel> = OnceLock::new();
    M.get_or_init(|| quick_train(FakeQuantConfig::disabled(), 300))
}

/// Check the unit quantizer at `bits` on `n` seeded random values plus every
/// grid point; returns the first violated property.
pub fn quantizer_violation(bits: u32, n: usize, seed: u64) -> Option<String> {
    use fxqat::fxp_core::{dequantize_unit, quantize_unit, BitWidth, FxpCode};
    use rand::{Rng, SeedableRng};

    let b = BitWidth::new(bits).unwrap();
    let step = 1.0 / b.half_range() as f64;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ bits as u64);
    let mut xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    xs.extend([-1.0, 1.0, 0.0]);
    for &w in &xs {
        let c = quantize_unit(w, b).unwrap();
        let back = dequantize_unit(c);
        if (back - w).abs() > step {
            return Some(format!("b={bits}: |deq(q({w})) - {w}| = {} > {step}", (back - w).abs()));
        }
        if quantize_unit(back, b).unwrap() != c {
            return Some(format!("b={bits}: quantizing the grid value of {w} moved it"));
        }
    }
    xs.sort_by(f64::total_cmp);
    for pair in xs.windows(2) {
        let (a, c) = (quantize_unit(pair[0], b).unwrap(), quantize_unit(pair[1], b).unwrap());
        if a.value() > c.value() {
            return Some(format!("b={bits}: not monotone between {} and {}", pair[0], pair[1]));
        }
    }
    for v in b.min_code()..=b.max_code() {
        let c = FxpCode::new(v, b, b.unit_q()).unwrap();
        if quantize_unit(dequantize_unit(c), b).unwrap() != c {
            return Some(format!("b={bits}: grid code {v} does not round-trip"));
        }
    }
    None
}
