mod common;

use std::fs;

use common::{fixture, qat8, quick_config};
use fxqat::engine::{export_model, AccumulatorConfig};
use fxqat::features::{clip_features, AudioClip};
use fxqat::graph::{load_checkpoint, save_checkpoint, ModelSpec};
use fxqat::qat::{FakeQuantConfig, QatMethod};
use fxqat::trainer::{train, LogRecord};

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec::desk(4);
    let fq = FakeQuantConfig::qat(QatMethod::Sqwd, 8, 8).unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let mut cfg = quick_config(fq.clone(), 60);
        cfg.checkpoint_dir = Some(dir.path().join(format!("run{run}")));
        cfg.checkpoint_every = 30;
        train(&spec, &fixture().data, &cfg).unwrap();
        let ckpt = cfg.checkpoint_dir.unwrap();
        assert!(ckpt.join("step-0000030.fxck").exists());
        bytes.push(fs::read(ckpt.join("final.fxck")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn acr_with_zero_strength_is_plain_fake_quant() {
    let spec = ModelSpec::desk(4);
    let mut acr = FakeQuantConfig::qat(QatMethod::Acr, 8, 8).unwrap();
    acr.lambda_reg = 0.0;
    let none = FakeQuantConfig::qat(QatMethod::None, 8, 8).unwrap();
    let a = train(&spec, &fixture().data, &quick_config(acr, 40)).unwrap();
    let b = train(&spec, &fixture().data, &quick_config(none, 40)).unwrap();
    assert_eq!(a.model.blocks, b.model.blocks);
    assert!(a.history.iter().all(|r| r.reg_loss == 0.0));
}

#[test]
fn log_is_json_lines_with_finite_losses() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(FakeQuantConfig::qat(QatMethod::Acr, 8, 8).unwrap(), 40);
    cfg.log_path = Some(dir.path().join("train.jsonl"));
    cfg.eval_every = 20;
    let run = train(&ModelSpec::desk(4), &fixture().data, &cfg).unwrap();
    let text = fs::read_to_string(cfg.log_path.unwrap()).unwrap();
    let records: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records, run.history);
    assert!(records.iter().all(|r| r.ce_loss.is_finite() && r.reg_loss.is_finite() && r.reg_loss > 0.0));
    assert_eq!(records.iter().filter(|r| r.eval_accuracy.is_some()).count(), 2);
}

#[test]
fn checkpoint_reload_keeps_export_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fxck");
    save_checkpoint(qat8(), &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let m = export_model(&back).unwrap();
    let wide = AccumulatorConfig::wide();
    for x in fixture().test.inputs.iter().take(8) {
        assert_eq!(fxqat::engine::first_divergence(&back, &m, x, &wide).unwrap(), None);
    }
}

#[test]
fn silence_gives_the_same_posterior_in_float_and_integer() {
    let tm = qat8();
    let m = export_model(tm).unwrap();
    let raw = clip_features(&AudioClip::new(vec![0; 16_000])).unwrap();
    let x = tm.stats.standardize(raw.as_slice()).unwrap();
    let float = tm.forward(&x, false).unwrap();
    let int = m.infer_with(&x, &AccumulatorConfig::wide(), false).unwrap();
    assert_eq!(int.posteriors, float);
    assert!((float.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
