mod common;

use common::{fixture, flp, qat8};
use fxqat::engine::{
    conv_fxp, export_error, export_model, export_ptq, first_divergence, read_model, write_model, AccumulatorConfig,
    ActFormat, EngineMode, FxpLayer, FxpModel, LayerOutput, PtqConfig,
};
use fxqat::fxp_core::{BitWidth, FxpTensor, QFormat, RoundingConvention};
use fxqat::graph::{ConvSpec, ModelSpec};
use fxqat::trainer::{accuracy, predict};
use fxqat::Error;

#[test]
fn export_is_lossless() {
    let tm = qat8();
    let m = export_model(tm).unwrap();
    assert_eq!(export_error(tm, &m).unwrap(), 0.0);
    assert_eq!(m.mode, EngineMode::QatUniform);
}

#[test]
fn full_precision_checkpoint_needs_ptq() {
    assert!(matches!(export_model(flp()), Err(Error::Export(_))));
}

#[test]
fn integer_inference_matches_fake_quant_on_every_test_input() {
    let tm = qat8();
    let m = export_model(tm).unwrap();
    let wide = AccumulatorConfig::wide();
    for (i, x) in fixture().test.inputs.iter().enumerate() {
        assert_eq!(first_divergence(tm, &m, x, &wide).unwrap(), None, "input {i}");
    }
}

#[test]
fn integer_accuracy_equals_fake_quant_accuracy() {
    let tm = qat8();
    let m = export_model(tm).unwrap();
    let test = &fixture().test;
    let fq = accuracy(&predict(tm, test).unwrap(), &test.labels).unwrap();
    let wide = AccumulatorConfig::wide();
    let int: Vec<Vec<f64>> = test.inputs.iter().map(|x| m.infer_with(x, &wide, false).unwrap().posteriors).collect();
    assert_eq!(accuracy(&int, &test.labels).unwrap(), fq);
}

#[test]
fn fxpm_round_trip_is_exact() {
    let m = export_model(qat8()).unwrap();
    let mut buf = Vec::new();
    write_model(&m, &mut buf).unwrap();
    let back = read_model(&buf[..]).unwrap();
    assert_eq!(back, m);
    let mut again = Vec::new();
    write_model(&back, &mut again).unwrap();
    assert_eq!(again, buf);
}

#[test]
fn fxpm_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fxpm");
    let m = export_ptq(flp(), &fixture().data.train.inputs, &PtqConfig::default()).unwrap();
    fxqat::engine::save_model(&m, &path).unwrap();
    assert_eq!(fxqat::engine::load_model(&path).unwrap(), m);
}

#[test]
fn corrupt_fxpm_is_rejected() {
    let m = export_model(qat8()).unwrap();
    let mut buf = Vec::new();
    write_model(&m, &mut buf).unwrap();
    let mut bad_magic = buf.clone();
    bad_magic[0] = b'X';
    assert!(matches!(read_model(&bad_magic[..]), Err(Error::Format { .. })));
    let truncated = &buf[..buf.len() - 3];
    assert!(matches!(read_model(truncated), Err(Error::Format { .. }) | Err(Error::Io(_))));
    let mut bad_version = buf.clone();
    bad_version[4] = 9;
    assert!(matches!(read_model(&bad_version[..]), Err(Error::Format { .. })));
    assert!(read_model(&b"FXPM"[..]).is_err());
}

#[test]
fn ptq_normalizes_between_layers() {
    let tm = flp();
    let m = export_ptq(tm, &fixture().data.train.inputs, &PtqConfig::default()).unwrap();
    assert_eq!(m.mode, EngineMode::PtqPerLayer);
    let run = m.infer(&fixture().test.inputs[0]).unwrap();
    let counts = m.spec.activation_counts().unwrap();
    let expected: usize = counts[..counts.len() - 1].iter().sum();
    assert_eq!(run.report.normalization_ops, expected as u64);
    // Integer PTQ should track the float model closely on this easy task.
    let test = &fixture().test;
    let float = accuracy(&predict(tm, test).unwrap(), &test.labels).unwrap();
    let int: Vec<Vec<f64>> = test.inputs.iter().map(|x| m.infer(x).unwrap().posteriors).collect();
    assert!((accuracy(&int, &test.labels).unwrap() - float).abs() <= 0.1);
}

#[test]
fn ptq_with_uniform_formats_equals_the_uniform_engine() {
    let mut m = export_ptq(flp(), &fixture().data.train.inputs, &PtqConfig::default()).unwrap();
    let shared = m.layers[1].input;
    for l in m.layers.iter_mut() {
        if l.output.is_some() {
            l.output = Some(shared);
        }
    }
    let mut uniform = m.clone();
    uniform.mode = EngineMode::QatUniform;
    uniform.validate().unwrap();
    for x in fixture().test.inputs.iter().take(10) {
        let a = m.infer(x).unwrap();
        let b = uniform.infer(x).unwrap();
        assert_eq!(a.logits, b.logits);
        assert!(a.report.normalization_ops > 0);
        assert_eq!(b.report.normalization_ops, 0);
    }
}

fn single_layer(conv: ConvSpec, weights: Vec<i32>, bias: Vec<i32>, classifier: bool) -> FxpModel {
    let b8 = BitWidth::new(8).unwrap();
    let q7 = QFormat::new(7).unwrap();
    let q4 = QFormat::new(4).unwrap();
    let act_in = ActFormat { bits: b8, q: q4, zero_point: 0 };
    let out = ActFormat { bits: b8, q: QFormat::new(6).unwrap(), zero_point: 128 };
    let mut blocks = vec![conv];
    let mut layers = vec![FxpLayer {
        conv,
        weights: FxpTensor::new(vec![conv.out_channels, conv.in_channels, conv.kernel.0, conv.kernel.1], weights, b8, q7)
            .unwrap(),
        bias,
        acc_q: 11,
        input: act_in,
        output: (!classifier).then_some(out),
    }];
    if !classifier {
        let head = ConvSpec { kernel: (1, 1), in_channels: conv.out_channels, out_channels: 2, stride: (1, 1), padding: (0, 0) };
        blocks.push(head);
        layers.push(FxpLayer {
            conv: head,
            weights: FxpTensor::zeros(vec![2, conv.out_channels, 1, 1], b8, q7),
            bias: vec![0, 0],
            acc_q: 13,
            input: out,
            output: None,
        });
    }
    let spec = ModelSpec { blocks, num_classes: 2, input_shape: (2, 2, 1) };
    let stats = fixture().data.stats.clone();
    FxpModel {
        spec,
        mode: EngineMode::QatUniform,
        weight_bits: b8,
        activation_bits: b8,
        input_bits: b8,
        input_q: q4,
        input_rounding: RoundingConvention::HalfAway,
        act_clip: 2.0,
        layers,
        accumulator: AccumulatorConfig::default(),
        stats,
    }
}

fn one_by_one(out_channels: usize) -> ConvSpec {
    ConvSpec { kernel: (1, 1), in_channels: 1, out_channels, stride: (1, 1), padding: (0, 0) }
}

fn input(codes: Vec<i32>) -> FxpTensor {
    FxpTensor::new(vec![1, 2, 2], codes, BitWidth::new(8).unwrap(), QFormat::new(4).unwrap()).unwrap()
}

#[test]
fn identity_kernel_passes_activations_through() {
    // w = 127/128 is the closest code to one; logits come back at q11.
    let m = single_layer(one_by_one(1), vec![127], vec![0], true);
    let (out, sat) = conv_fxp(&m, 0, &input(vec![16, -8, 3, 0]), &AccumulatorConfig::default()).unwrap();
    assert_eq!(sat.corrupted, 0);
    match out {
        LayerOutput::Logits { sums, q } => {
            assert_eq!(q, 11);
            assert_eq!(sums, vec![16 * 127, -8 * 127, 3 * 127, 0]);
        }
        _ => panic!("classifier returns logits"),
    }
}

#[test]
fn zero_weights_give_relu_of_bias() {
    // Bias 0.75 at q11 is 1536; at q6 that is 48, stored as 48 - 128.
    // A negative bias clips to zero, stored as -128.
    let m = single_layer(one_by_one(2), vec![0, 0], vec![1536, -700], false);
    let (out, _) = conv_fxp(&m, 0, &input(vec![100, -100, 5, 7]), &AccumulatorConfig::default()).unwrap();
    match out {
        LayerOutput::Activations(t) => {
            assert_eq!(t.codes(), &[-80, -80, -80, -80, -128, -128, -128, -128]);
            assert_eq!(m.layers[0].output.unwrap().to_real(t.codes()[0] as i64), 0.75);
        }
        _ => panic!("hidden layer returns activations"),
    }
}

#[test]
fn wide_accumulator_never_saturates_where_narrow_does() {
    let conv = ConvSpec { kernel: (2, 2), in_channels: 1, out_channels: 1, stride: (1, 1), padding: (0, 0) };
    let m = single_layer(conv, vec![127, 127, 127, 127], vec![0], true);
    let x = input(vec![127, 127, 127, 127]);
    let (narrow, s16) = conv_fxp(&m, 0, &x, &AccumulatorConfig::default()).unwrap();
    let (wide, s32) = conv_fxp(&m, 0, &x, &AccumulatorConfig::new(32, 40, None).unwrap()).unwrap();
    assert_eq!(s16.corrupted, 1);
    assert_eq!(s32.corrupted, 0);
    match (narrow, wide) {
        (LayerOutput::Logits { sums: a, .. }, LayerOutput::Logits { sums: b, .. }) => {
            assert_eq!(b, vec![4 * 127 * 127]);
            assert_eq!(a, vec![i16::MAX as i64]);
        }
        _ => panic!("classifier returns logits"),
    }
}

#[test]
fn wrong_input_qformat_is_rejected() {
    let m = single_layer(one_by_one(1), vec![127], vec![0], true);
    let x = FxpTensor::new(vec![1, 2, 2], vec![0; 4], BitWidth::new(8).unwrap(), QFormat::new(5).unwrap()).unwrap();
    assert!(matches!(
        conv_fxp(&m, 0, &x, &AccumulatorConfig::default()),
        Err(Error::QFormatMismatch { layer: 0, expected: 4, actual: 5 })
    ));
}
