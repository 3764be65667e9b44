mod data;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fxqat::engine::{
    export_error, export_model, export_ptq, first_divergence, flp_reference_profile, instruction_profile, load_model,
    profile_saturations, save_model, AccumulatorConfig, CycleWeights, FxpModel, LayerOutput, PtqConfig,
};
use fxqat::features::{write_feature_cache, Split};
use fxqat::fxp_core::BitWidth;
use fxqat::graph::{load_checkpoint, TrainedModel};
use fxqat::qat::{FakeQuantConfig, QatMethod};
use fxqat::trainer::{det_metrics, eval_grid, evaluate, predict, train, TrainConfig, TrainData};
use serde::Serialize;
use serde_json::json;

use data::{cache_file, standardized, DataArgs};

/// A check the command was asked to make did not hold.
#[derive(Debug)]
struct AssertionFailed(String);

impl std::fmt::Display for AssertionFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for AssertionFailed {}

#[derive(Parser)]
#[command(name = "fxqat", version, about = "Fixed-point QAT, export, and bit-exact integer inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a JSON-lines log.
    Train(TrainArgs),
    /// Export a checkpoint to an integer model file and verify it.
    Export(ExportArgs),
    /// Run integer inference over a split.
    Infer(InferArgs),
    /// Saturation table over flush cadences and the instruction model.
    Profile(ProfileArgs),
    /// Accuracy over a grid of weight and activation precisions.
    EvalGrid(GridArgs),
    /// Extract features once and write a cache per split.
    Features(FeaturesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    /// Full precision, no quantizer nodes.
    Flp,
    Sqwd,
    Acr,
    None,
}

impl MethodArg {
    fn qat(self) -> Option<QatMethod> {
        match self {
            MethodArg::Flp => None,
            MethodArg::Sqwd => Some(QatMethod::Sqwd),
            MethodArg::Acr => Some(QatMethod::Acr),
            MethodArg::None => Some(QatMethod::None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cadence(Option<usize>);

impl FromStr for Cadence {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(Cadence(None));
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(Cadence(Some(k))),
            _ => Err(format!("cadence must be `none` or a positive MAC count, got `{s}`")),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Weight bits.
    #[arg(long)]
    bw: Option<u32>,
    /// Activation bits.
    #[arg(long)]
    ba: Option<u32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Regularizer strength.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    act_clip: Option<f64>,
    /// JSON training configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for checkpoints, log and summary.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Post-training quantization with per-layer formats.
    #[arg(long)]
    ptq: bool,
    /// PTQ weight bits.
    #[arg(long)]
    bw: Option<u32>,
    /// PTQ activation bits.
    #[arg(long)]
    ba: Option<u32>,
    #[arg(long, default_value_t = 256)]
    calibration_limit: usize,
    /// Write the verification report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct AccArgs {
    #[arg(long)]
    acc_bits: Option<u32>,
    #[arg(long)]
    buffer_bits: Option<u32>,
}

impl AccArgs {
    fn apply(&self, base: AccumulatorConfig) -> Result<AccumulatorConfig> {
        let acc = self.acc_bits.unwrap_or(base.acc_bits);
        let buffer = self.buffer_bits.unwrap_or_else(|| base.buffer_bits.max(acc + 8).min(63));
        Ok(AccumulatorConfig::new(acc, buffer, base.flush_cadence)?)
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Checkpoint the model was exported from; needed by --oracle.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Compare every layer against the fake-quantized float forward pass.
    #[arg(long, requires = "checkpoint")]
    oracle: bool,
    /// Flush cadence in MACs, or `none`.
    #[arg(long)]
    cadence: Option<Cadence>,
    #[command(flatten)]
    acc: AccArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated flush cadences.
    #[arg(long, value_delimiter = ',', default_value = "none,512,256,128,64,1")]
    cadence: Vec<Cadence>,
    #[command(flatten)]
    acc: AccArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 100)]
    limit: usize,
    /// Fail unless corrupted totals never increase across the cadence list.
    #[arg(long)]
    check: bool,
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, value_enum, default_value = "acr")]
    method: MethodArg,
    #[arg(long, value_delimiter = ',', default_value = "4,8")]
    bw: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "4,8")]
    ba: Vec<u32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Directory for `train.fxft`, `validation.fxft` and `test.fxft`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<Option<TrainConfig>> {
    let Some(p) = path else { return Ok(None) };
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let cfg = serde_json::from_str(&text)
        .map_err(|e| fxqat::Error::Config(format!("{}: {e}", p.display())))?;
    Ok(Some(cfg))
}

fn with_method(fq: &FakeQuantConfig, method: MethodArg) -> Result<FakeQuantConfig> {
    let mut out = match method.qat() {
        None => FakeQuantConfig::disabled(),
        Some(m) => FakeQuantConfig::qat(m, fq.weight_bits.get(), fq.activation_bits.get())?,
    };
    out.act_clip = fq.act_clip;
    out.input_bits = fq.input_bits;
    out.input_q = fq.input_q;
    out.input_rounding = fq.input_rounding;
    Ok(out)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match read_config(a.config.as_deref())? {
        Some(c) => c,
        None => TrainConfig { fq: FakeQuantConfig::qat(QatMethod::Acr, 8, 8)?, ..TrainConfig::default() },
    };
    if let Some(m) = a.method {
        cfg.fq = with_method(&cfg.fq, m)?;
    }
    if let Some(b) = a.bw {
        cfg.fq.weight_bits = BitWidth::new(b)?;
    }
    if let Some(b) = a.ba {
        cfg.fq.activation_bits = BitWidth::new(b)?;
    }
    if let Some(l) = a.lambda {
        cfg.fq.lambda_reg = l;
    }
    if let Some(c) = a.act_clip {
        cfg.fq.act_clip = c;
    }
    if let Some(s) = a.steps {
        cfg.total_steps = s;
        cfg.checkpoint_every = cfg.checkpoint_every.min(s);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.checkpoint_dir = Some(a.out.join("checkpoints"));
    cfg.log_path = Some(a.out.join("train.jsonl"));
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    log::info!("effective config: {}", serde_json::to_string(&cfg)?);

    let splits = a.data.load()?;
    let data = TrainData::prepare(&splits.train, Some(&splits.validation))?;
    let test = splits.test.standardize(&data.stats)?;
    let spec = a.data.model_spec(splits.label_names.len());
    let run = train(&spec, &data, &cfg)?;
    let checkpoint = a.out.join("checkpoints").join("final.fxck");
    let test_accuracy = if test.is_empty() { None } else { Some(evaluate(&run.model, &test)?) };
    let summary = json!({
        "schema": "fxqat.train/1",
        "checkpoint": checkpoint,
        "labels": splits.label_names,
        "test_accuracy": test_accuracy,
        "initial_reg": run.initial_reg,
        "final_reg": run.final_reg,
        "config": cfg,
    });
    fs::write(a.out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    println!("checkpoint: {}", checkpoint.display());
    if let Some(acc) = test_accuracy {
        println!("test accuracy: {:.2}%", 100.0 * acc);
    }
    Ok(())
}

fn format_table(m: &FxpModel) -> String {
    let mut s = String::from("layer  weight q  input q  input zp  output q  acc q\n");
    for (i, l) in m.layers.iter().enumerate() {
        let out = l.output.map_or("-".to_string(), |o| o.q.to_string());
        let _ = writeln!(
            s,
            "{:>5}  {:>8}  {:>7}  {:>8}  {:>8}  {:>5}",
            i + 1,
            l.weights.q(),
            l.input.q,
            l.input.zero_point,
            out,
            l.acc_q
        );
    }
    s
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let tm = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (m, max_error) = if a.ptq {
        let splits = a.data.load()?;
        let calibration = standardized(&splits, Split::Train, &tm.stats, Some(a.calibration_limit))?;
        let mut cfg = PtqConfig { calibration_limit: a.calibration_limit, ..PtqConfig::default() };
        if let Some(b) = a.bw {
            cfg.weight_bits = BitWidth::new(b)?;
        }
        if let Some(b) = a.ba {
            cfg.activation_bits = BitWidth::new(b)?;
        }
        (export_ptq(&tm, &calibration.inputs, &cfg)?, None)
    } else {
        let m = export_model(&tm)?;
        let err = export_error(&tm, &m)?;
        (m, Some(err))
    };
    save_model(&m, &a.out)?;
    let reloaded = load_model(&a.out)?;
    let round_trip = reloaded == m;
    print!("{}", format_table(&m));
    println!("mode: {:?}", m.mode);
    if let Some(e) = max_error {
        println!("max export error: {e}");
    }
    println!("round trip exact: {round_trip}");
    let report = json!({
        "schema": "fxqat.export/1",
        "model": a.out,
        "mode": m.mode,
        "max_export_error": max_error,
        "round_trip_exact": round_trip,
        "layers": m.layers.iter().map(|l| json!({
            "weight_q": l.weights.q(),
            "input": l.input,
            "output": l.output,
            "acc_q": l.acc_q,
        })).collect::<Vec<_>>(),
    });
    write_json(a.json.as_deref(), &report)?;
    if !round_trip || max_error.is_some_and(|e| e != 0.0) {
        return Err(AssertionFailed("exported model does not reproduce the trained model exactly".into()).into());
    }
    Ok(())
}

fn divergence_dump(tm: &TrainedModel, m: &FxpModel, x: &[f64], cfg: &AccumulatorConfig, layer: usize, idx: usize) -> Result<String> {
    let reference = tm.trace(x)?;
    let run = m.infer_with(x, cfg, true)?;
    let trace = run.trace.expect("trace kept");
    let int_value = match &trace[layer] {
        LayerOutput::Activations(t) => m.layers[layer].output.expect("activation layer").to_real(t.codes()[idx] as i64),
        LayerOutput::Logits { sums, q } => sums[idx] as f64 / (*q as f64).exp2(),
    };
    Ok(format!(
        "first divergence at layer {}, index {idx}: integer {int_value}, float {}; layer corrupted activations {}",
        layer + 1,
        reference[layer][idx],
        run.report.layers[layer].corrupted
    ))
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let m = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let mut cfg = if a.oracle && a.acc.acc_bits.is_none() { AccumulatorConfig::wide() } else { m.accumulator };
    cfg = a.acc.apply(cfg)?;
    if let Some(c) = a.cadence {
        cfg = cfg.with_cadence(c.0);
    }
    let tm = a
        .checkpoint
        .as_deref()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let splits = a.data.load()?;
    let set = standardized(&splits, a.split.into(), &m.stats, a.limit)?;
    let mut posteriors = Vec::with_capacity(set.len());
    let mut report = None;
    for x in &set.inputs {
        let r = m.infer_with(x, &cfg, false)?;
        match report.as_mut() {
            None => report = Some(r.report),
            Some(acc) => acc.merge(&r.report),
        }
        posteriors.push(r.posteriors);
    }
    let report = report.expect("non-empty split");
    let eval = det_metrics(&posteriors, &set.labels, None).ok();
    let accuracy = fxqat::trainer::accuracy(&posteriors, &set.labels)?;
    println!("inputs: {}", set.len());
    println!("integer accuracy: {:.2}%", 100.0 * accuracy);
    println!(
        "accumulator: {} bits, buffer {} bits, cadence {:?}; corrupted activations: {}",
        cfg.acc_bits, cfg.buffer_bits, cfg.flush_cadence, report.total_corrupted
    );
    let mut oracle = None;
    if a.oracle {
        let tm = tm.as_ref().expect("clap requires --checkpoint");
        let float_accuracy = fxqat::trainer::accuracy(&predict(tm, &set)?, &set.labels)?;
        let mut first = None;
        let mut mismatches = 0usize;
        for (i, x) in set.inputs.iter().enumerate() {
            if let Some((layer, idx)) = first_divergence(tm, &m, x, &cfg)? {
                mismatches += 1;
                if first.is_none() {
                    first = Some(format!("input {i}: {}", divergence_dump(tm, &m, x, &cfg, layer, idx)?));
                }
            }
        }
        println!("bit-exact: {}", mismatches == 0);
        println!("fake-quant accuracy: {:.2}%", 100.0 * float_accuracy);
        oracle = Some(json!({
            "bit_exact": mismatches == 0,
            "mismatches": mismatches,
            "first_divergence": first,
            "fake_quant_accuracy": float_accuracy,
        }));
        if let Some(f) = &first {
            eprintln!("{f}");
        }
    }
    let out = json!({
        "schema": "fxqat.infer/1",
        "model": a.model,
        "accumulator": cfg,
        "inputs": set.len(),
        "accuracy": accuracy,
        "evaluation": eval,
        "saturation": report,
        "oracle": oracle,
    });
    write_json(a.json.as_deref(), &out)?;
    if oracle.as_ref().is_some_and(|o| o["bit_exact"] == false) {
        return Err(AssertionFailed("integer inference diverged from the fake-quantized reference".into()).into());
    }
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> Result<()> {
    let m = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let base = a.acc.apply(AccumulatorConfig::default())?;
    let splits = a.data.load()?;
    let set = standardized(&splits, a.split.into(), &m.stats, Some(a.limit))?;
    let cadences: Vec<Option<usize>> = a.cadence.iter().map(|c| c.0).collect();
    let table = profile_saturations(&m, &set.inputs, &cadences, &base)?;
    let weights = CycleWeights::default();
    let n = set.len() as u64;
    let flp = flp_reference_profile(&m.spec, n, &weights)?;
    let profiles = cadences
        .iter()
        .map(|&c| instruction_profile(&m, n, &base.with_cadence(c), &weights))
        .collect::<fxqat::Result<Vec<_>>>()?;
    print!("{}", table.to_text());
    println!();
    if let Some(p) = profiles.first() {
        print!("{}", p.to_text());
        println!("modeled time vs float reference: {:.3}", p.relative_to(&flp));
    }
    let monotone = table.is_non_increasing();
    let out = json!({
        "schema": "fxqat.profile/1",
        "model": a.model,
        "non_increasing": monotone,
        "saturation": table,
        "instructions": profiles,
        "flp_reference": flp,
    });
    write_json(a.json.as_deref(), &out)?;
    if a.check && !monotone {
        return Err(AssertionFailed(format!("corrupted totals increase across cadences: {:?}", table.totals)).into());
    }
    Ok(())
}

fn cmd_eval_grid(a: GridArgs) -> Result<()> {
    let Some(method) = a.method.qat() else {
        return Err(fxqat::Error::Config("the grid needs a QAT method".into()).into());
    };
    let mut base = read_config(a.config.as_deref())?.unwrap_or_default();
    base.fq = FakeQuantConfig::qat(method, 8, 8)?;
    if let Some(l) = a.lambda {
        base.fq.lambda_reg = l;
    }
    if let Some(s) = a.steps {
        base.total_steps = s;
    }
    if let Some(s) = a.seed {
        base.seed = s;
    }
    base.checkpoint_dir = None;
    base.log_path = None;
    base.eval_every = 0;
    base.validate()?;
    log::info!("effective config: {}", serde_json::to_string(&base)?);
    let splits = a.data.load()?;
    let data = TrainData::prepare(&splits.train, None)?;
    let test = splits.test.standardize(&data.stats)?;
    let spec = a.data.model_spec(splits.label_names.len());
    let grid = eval_grid(&spec, &data, &test, &a.bw, &a.ba, method, &base)?;
    print!("{}", grid.to_text());
    write_json(a.json.as_deref(), &grid)?;
    Ok(())
}

fn cmd_features(a: FeaturesArgs) -> Result<()> {
    let splits = a.data.load()?;
    fs::create_dir_all(&a.out)?;
    for split in [Split::Train, Split::Validation, Split::Test] {
        let path = cache_file(&a.out, split);
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_feature_cache(splits.get(split), &splits.label_names, std::io::BufWriter::new(file))?;
        println!("{}: {} inputs", path.display(), splits.get(split).len());
    }
    Ok(())
}

/// 1 for usage and configuration problems, 2 for data problems, 3 for failed checks.
fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<AssertionFailed>().is_some() {
        return 3;
    }
    match e.downcast_ref::<fxqat::Error>() {
        Some(
            fxqat::Error::Config(_)
            | fxqat::Error::InvalidBitWidth(_)
            | fxqat::Error::InvalidQFormat(_)
            | fxqat::Error::Export(_),
        ) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Export(a) => cmd_export(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Profile(a) => cmd_profile(a),
        Command::EvalGrid(a) => cmd_eval_grid(a),
        Command::Features(a) => cmd_features(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
