mod overrides;
mod run_dir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use mactn::data::{
    load_bundles, load_checkpoint, load_segments, save_checkpoint, save_segments, synth_generate, write_bundles,
    ClassBand, RatingDimension, SegmentSet, SynthProfile,
};
use mactn::explain::{
    compose_kernels, export_features, extract_channel_attention, extract_self_attention, segment_id,
    write_channel_attention, write_features, write_kernels, write_self_attention, FeatureStage,
};
use mactn::model::count_flops;
use mactn::preprocess::{preprocess_pipeline, PipelineConfig};
use mactn::train::{cross_validate, evaluate, make_splits, MetricsReport, SplitParams, SplitScheme, TrainConfig};
use mactn::{ModelConfig, Tensor};

use overrides::{apply_overrides, UsageError};
use run_dir::RunDir;

#[derive(Parser, Debug)]
#[command(name = "mactn", version, about = "EEG emotion recognition: synthesis, preprocessing, training, evaluation and explanation")]
struct Cli {
    /// Root under which timestamped run directories are created.
    #[arg(long, global = true, env = "MACTN_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic class-band EEG bundles.
    Synth(SynthArgs),
    /// Turn raw bundles into normalized, labelled segments.
    Preprocess(PreprocessArgs),
    /// Cross-validate a freshly initialized model.
    Train(TrainArgs),
    /// Score a checkpoint on a segment set.
    Eval(EvalArgs),
    /// Export attention, kernel and feature tables for a checkpoint.
    Explain(ExplainArgs),
    /// Tabulate per-sample forward flops against window length.
    Flops(FlopsArgs),
    /// Print the fold plan of a cross-validation scheme.
    Splits(SplitsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 12)]
    subjects: usize,
    /// Classes; up to three use the 6/10/20 Hz bands, more are spread over 6-40 Hz.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    trials_per_class: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 20.0)]
    trial_len_s: f64,
    #[arg(long, default_value_t = 125.0)]
    sample_rate: f64,
    /// RMS of the class signal; 0 gives label-free noise.
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.3)]
    subject_variability: f64,
    #[arg(long, default_value_t = 0.0)]
    line_noise: f64,
    /// Output directory (default: `<run>/bundles`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataProfile {
    #[value(name = "thu_ep", alias = "thu-ep")]
    ThuEp,
    Deap,
    Custom,
}

impl DataProfile {
    fn name(self) -> &'static str {
        match self {
            Self::ThuEp => "thu_ep",
            Self::Deap => "deap",
            Self::Custom => "custom",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dimension {
    Arousal,
    Valence,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Directory of `subject_<id>` bundles.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "thu_ep")]
    profile: DataProfile,
    #[arg(long)]
    window_s: Option<f64>,
    #[arg(long)]
    step_s: Option<f64>,
    /// Rating dimension binarized for the deap profile.
    #[arg(long, value_enum, default_value = "arousal")]
    dimension: Dimension,
    /// Override any pipeline key, e.g. `--set bandpass_hz=[1,40]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (default: `<run>/segments`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelProfile {
    #[value(name = "thu_ep", alias = "thu-ep")]
    ThuEp,
    Deap,
    Miniature,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scheme {
    Csv10,
    Loso,
    Loto,
    Ctv10,
}

impl From<Scheme> for SplitScheme {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Csv10 => SplitScheme::Csv10,
            Scheme::Loso => SplitScheme::Loso,
            Scheme::Loto => SplitScheme::Loto,
            Scheme::Ctv10 => SplitScheme::Ctv10,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory written by `preprocess`.
    #[arg(long)]
    segments: PathBuf,
    /// Architecture preset; channel count, length, rate and classes follow the data.
    #[arg(long, value_enum, default_value = "thu_ep")]
    profile: ModelProfile,
    #[arg(long, value_enum, default_value = "csv10")]
    scheme: Scheme,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.0001)]
    weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    plateau_patience: usize,
    #[arg(long, default_value_t = 0.1)]
    plateau_factor: f64,
    #[arg(long, default_value_t = 1.3)]
    flooding_b: f64,
    #[arg(long, default_value_t = 15)]
    early_stop_patience: usize,
    /// Parallel fold jobs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Override a `model.*`, `train.*` or `split.*` key, e.g. `--set model.ablation.sk_attention=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    segments: PathBuf,
    /// Restrict to these subject ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    subjects: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ExplainKind {
    ChannelAttention,
    SelfAttention,
    Kernels,
    Features,
    All,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    segments: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    kind: ExplainKind,
    /// Segment index for the self-attention trace.
    #[arg(long, default_value_t = 0)]
    segment: usize,
    #[arg(long, default_value = "post_gtfe")]
    stage: String,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long, value_enum, default_value = "thu_ep")]
    profile: ModelProfile,
    /// Window length in seconds, or a sweep `start..end:step`.
    #[arg(long, default_value = "4..18:2")]
    window_s: String,
}

#[derive(Args, Debug)]
struct SplitsArgs {
    #[arg(long, value_enum, default_value = "loso")]
    scheme: Scheme,
    /// Number of synthetic ids (`s01`, `s02`, ...) when no segment set is given.
    #[arg(long, default_value_t = 80)]
    ids: usize,
    /// Split the subjects (or one subject's trials) of a segment set instead.
    #[arg(long)]
    segments: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    n_folds: usize,
    #[arg(long)]
    val_fraction: Option<f64>,
}

/// 2 usage, 3 missing input, 4 invariant violation, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<mactn::Error>() {
            return match e {
                mactn::Error::MissingFile(_) => 3,
                mactn::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
                mactn::Error::Config(_) | mactn::Error::UnknownChannel(_) => 2,
                mactn::Error::Contract(_)
                | mactn::Error::Dimension(_)
                | mactn::Error::NonFinite { .. }
                | mactn::Error::Degenerate(_) => 4,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let category = match code {
                2 => "usage error",
                3 => "missing input",
                4 => "invariant violation",
                _ => "error",
            };
            eprintln!("{category}: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(mactn::Error::MissingFile(path.to_path_buf())).with_context(|| format!("{what} not found"));
    }
    Ok(())
}

fn run(cli: Cli, argv: &[String]) -> Result<()> {
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Preprocess(_) => "preprocess",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Explain(_) => "explain",
        Command::Flops(_) => "flops",
        Command::Splits(_) => "splits",
    };
    // validate inputs before creating the run directory
    match &cli.command {
        Command::Preprocess(a) => require_dir(&a.input, "bundle directory")?,
        Command::Train(a) => require_dir(&a.segments, "segment directory")?,
        Command::Eval(a) => {
            require_dir(&a.checkpoint, "checkpoint")?;
            require_dir(&a.segments, "segment directory")?
        }
        Command::Explain(a) => {
            require_dir(&a.checkpoint, "checkpoint")?;
            require_dir(&a.segments, "segment directory")?
        }
        Command::Splits(SplitsArgs { segments: Some(s), .. }) => require_dir(s, "segment directory")?,
        _ => {}
    }
    let run = RunDir::create(&cli.output_root, name, cli.seed, argv)?;
    match cli.command {
        Command::Synth(a) => synth(&run, cli.seed, a),
        Command::Preprocess(a) => preprocess(&run, a),
        Command::Train(a) => train(&run, cli.seed, a),
        Command::Eval(a) => eval(&run, a),
        Command::Explain(a) => explain(&run, a),
        Command::Flops(a) => flops(&run, a),
        Command::Splits(a) => splits(&run, cli.seed, a),
    }?;
    println!("run directory: {}", run.path().display());
    Ok(())
}

fn synth(run: &RunDir, seed: u64, a: SynthArgs) -> Result<()> {
    let defaults = [6.0, 10.0, 20.0];
    let centers: Vec<f64> = if a.classes <= defaults.len() {
        defaults[..a.classes].to_vec()
    } else {
        (0..a.classes)
            .map(|i| 6.0 + 34.0 * i as f64 / (a.classes - 1) as f64)
            .collect()
    };
    let profile = SynthProfile {
        n_subjects: a.subjects,
        n_trials_per_class: a.trials_per_class,
        n_channels: a.channels,
        trial_len_s: a.trial_len_s,
        sample_rate_hz: a.sample_rate,
        class_bands: centers
            .into_iter()
            .map(|c| ClassBand {
                center_hz: c,
                bandwidth_hz: 2.0,
                amplitude: a.amplitude,
            })
            .collect(),
        subject_variability: a.subject_variability,
        noise_level: a.noise,
        line_noise_amplitude: a.line_noise,
    };
    run.record(&json!({ "synth": profile }))?;
    let bundles = synth_generate(&profile, seed)?;
    let out = a.out.unwrap_or_else(|| run.path().join("bundles"));
    write_bundles(&bundles, &out)?;
    println!(
        "{} subjects x {} trials written to {}",
        bundles.len(),
        bundles.first().map_or(0, |b| b.trials.len()),
        out.display()
    );
    Ok(())
}

fn preprocess(run: &RunDir, a: PreprocessArgs) -> Result<()> {
    let mut cfg = match a.profile {
        DataProfile::Deap => PipelineConfig::deap(match a.dimension {
            Dimension::Arousal => RatingDimension::Arousal,
            Dimension::Valence => RatingDimension::Valence,
        }),
        p => PipelineConfig::for_profile(p.name())?,
    };
    if let Some(w) = a.window_s {
        cfg.window_s = w;
    }
    if let Some(s) = a.step_s {
        cfg.step_s = s;
    }
    let cfg: PipelineConfig = apply_overrides(&cfg, &a.sets, "")?;
    run.record(&json!({ "pipeline": cfg }))?;
    let bundles = load_bundles(&a.input)?;
    let set = preprocess_pipeline(&bundles, &cfg)?;
    for w in &set.warnings {
        eprintln!("warning: {w}");
    }
    let out = a.out.unwrap_or_else(|| run.path().join("segments"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    save_segments(&set, &out)?;
    let shape = set.segment_shape()?;
    println!(
        "{} segments of {}x{} from {} subjects, {} classes -> {}",
        set.len(),
        shape[0],
        shape[1],
        set.subjects().len(),
        set.n_classes,
        out.display()
    );
    Ok(())
}

fn model_preset(p: ModelProfile, set: Option<&SegmentSet>) -> Result<ModelConfig> {
    let mut cfg = match p {
        ModelProfile::ThuEp => ModelConfig::thu_ep(),
        ModelProfile::Deap => ModelConfig::deap(),
        ModelProfile::Miniature => ModelConfig::miniature(8, 500, 3),
    };
    if let Some(set) = set {
        let [c, t] = set.segment_shape()?;
        cfg.n_channels = c;
        cfg.input_len = t;
        cfg.sample_rate_hz = set.sample_rate_hz;
        cfg.n_classes = set.n_classes;
    }
    Ok(cfg)
}

#[derive(Serialize, serde::Deserialize)]
struct TrainResolved {
    model: ModelConfig,
    train: TrainConfig,
    split: SplitParams,
}

fn train(run: &RunDir, seed: u64, a: TrainArgs) -> Result<()> {
    let set = load_segments(&a.segments)?;
    let resolved = TrainResolved {
        model: model_preset(a.profile, Some(&set))?,
        train: TrainConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            batch_size: a.batch_size,
            max_epochs: a.epochs,
            plateau_patience: a.plateau_patience,
            plateau_factor: a.plateau_factor,
            flooding_b: a.flooding_b,
            early_stop_patience: a.early_stop_patience,
            seed,
            ..TrainConfig::default()
        },
        split: SplitParams::default(),
    };
    let resolved: TrainResolved = apply_overrides(&resolved, &a.sets, "")?;
    resolved.model.validate()?;
    resolved.train.validate()?;
    let scheme = SplitScheme::from(a.scheme);
    run.record(&json!({ "scheme": scheme, "workers": a.workers, "config": resolved }))?;

    let out = cross_validate(&set, &resolved.model, &resolved.train, scheme, &resolved.split, a.workers)?;
    let table = out.report.to_table();
    print!("{table}");
    run.write("report.txt", &table)?;
    run.write("report.json", &serde_json::to_string_pretty(&out)?)?;
    for (fold, model) in out.folds.iter().zip(&out.models) {
        let dir = run.path().join("checkpoints").join(fold.name.replace('/', "_"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        save_checkpoint(model, Some(seed), None, &dir)?;
    }
    Ok(())
}

fn eval(run: &RunDir, a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let set = load_segments(&a.segments)?;
    let idx: Vec<usize> = (0..set.len())
        .filter(|&i| a.subjects.is_empty() || a.subjects.contains(&set.segments[i].subject_id))
        .collect();
    if idx.is_empty() {
        bail!(UsageError("no segments match the requested subjects".into()));
    }
    run.record(&json!({ "checkpoint": a.checkpoint, "segments": a.segments, "subjects": a.subjects }))?;
    let (metrics, predictions) = evaluate(&ck.model, &set, &idx)?;
    let report = MetricsReport::new(vec!["eval".into()], vec![metrics.clone()])?;
    let table = report.to_table();
    print!("{table}");
    println!("confusion (rows true, columns predicted):");
    for row in &metrics.confusion {
        println!("  {row:?}");
    }
    run.write("report.txt", &table)?;
    run.write(
        "report.json",
        &serde_json::to_string_pretty(&json!({ "metrics": metrics, "indices": idx, "predictions": predictions }))?,
    )?;
    Ok(())
}

fn explain(run: &RunDir, a: ExplainArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let set = load_segments(&a.segments)?;
    if a.segment >= set.len() {
        bail!(UsageError(format!("segment {} out of range ({} segments)", a.segment, set.len())));
    }
    let stage: FeatureStage = a.stage.parse().map_err(|e: mactn::Error| UsageError(e.to_string()))?;
    run.record(&json!({ "checkpoint": a.checkpoint, "segments": a.segments, "kind": format!("{:?}", a.kind), "segment": a.segment, "stage": stage }))?;
    let model = &ck.model;
    let dir = run.path();
    let all: Vec<usize> = (0..set.len()).collect();
    let want = |k: ExplainKind| a.kind == k || a.kind == ExplainKind::All;
    let mut written = Vec::new();
    if want(ExplainKind::ChannelAttention) {
        let x = set.batch(&all)?;
        let ca = extract_channel_attention(model, &x, &set.channel_names)?;
        written.extend(write_channel_attention(&ca, dir, "all")?);
    }
    if want(ExplainKind::SelfAttention) {
        let seg: &Tensor = &set.segments[a.segment].data;
        let tr = extract_self_attention(model, seg)?;
        written.extend(write_self_attention(&tr, dir, &segment_id(&set, a.segment))?);
    }
    if want(ExplainKind::Kernels) {
        let ck = compose_kernels(model, "depth.conv1", "depth.conv2")?;
        written.extend(write_kernels(&ck, dir, "depth")?);
    }
    if want(ExplainKind::Features) {
        let t = export_features(model, &set, &all, stage)?;
        written.push(write_features(&t, dir, "all")?);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

/// Parses `x` or `start..end:step` (inclusive end).
fn parse_range(s: &str) -> Result<Vec<f64>> {
    let bad = || UsageError(format!("`{s}` is neither a number nor start..end:step"));
    let Some((start, rest)) = s.split_once("..") else {
        return Ok(vec![s.trim().parse().map_err(|_| bad())?]);
    };
    let (end, step) = rest.split_once(':').unwrap_or((rest, "1"));
    let (start, end, step): (f64, f64, f64) = (
        start.trim().parse().map_err(|_| bad())?,
        end.trim().parse().map_err(|_| bad())?,
        step.trim().parse().map_err(|_| bad())?,
    );
    if !(step > 0.0) || end < start {
        bail!(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + step * i as f64).collect())
}

fn flops(run: &RunDir, a: FlopsArgs) -> Result<()> {
    let windows = parse_range(&a.window_s)?;
    let base = model_preset(a.profile, None)?;
    run.record(&json!({ "model": base, "window_s": windows }))?;
    let mut rows = Vec::new();
    let mut text = format!("{:>9}  {:>9}  {:>6}  {:>16}  {:>8}\n", "window_s", "input_len", "d_seq", "flops", "GFLOPs");
    for &w in &windows {
        let len = (w * base.sample_rate_hz).round() as usize;
        let cfg = base.clone().with_input_len(len);
        cfg.validate().with_context(|| format!("window {w} s"))?;
        let f = count_flops(&cfg);
        text += &format!("{w:>9}  {len:>9}  {:>6}  {f:>16}  {:>8.3}\n", cfg.d_seq(), f as f64 / 1e9);
        rows.push((w, len, cfg.d_seq(), f));
    }
    if rows.len() >= 3 {
        let xs: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.3 as f64).collect();
        text += &format!("linear fit R^2 = {:.5}\n", r_squared(&xs, &ys));
    }
    print!("{text}");
    run.write("flops.txt", &text)?;
    let mut csv = String::from("window_s,input_len,d_seq,flops\n");
    for (w, len, d, f) in rows {
        csv += &format!("{w},{len},{d},{f}\n");
    }
    run.write("flops.csv", &csv)?;
    Ok(())
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

fn splits(run: &RunDir, seed: u64, a: SplitsArgs) -> Result<()> {
    let scheme = SplitScheme::from(a.scheme);
    let params = SplitParams {
        n_folds: a.n_folds,
        val_fraction: a.val_fraction,
        ..SplitParams::default()
    };
    let ids: Vec<String> = match &a.segments {
        Some(dir) => {
            let set = load_segments(dir)?;
            if scheme.is_subject_level() {
                set.subjects()
            } else {
                let first = set.subjects().into_iter().next().unwrap_or_default();
                set.trials_of(&first).iter().map(|t| t.to_string()).collect()
            }
        }
        None => (1..=a.ids).map(|i| format!("s{i:02}")).collect(),
    };
    run.record(&json!({ "scheme": scheme, "params": params, "n_ids": ids.len() }))?;
    let plan = make_splits(scheme, &ids, seed, &params)?;
    println!("{} folds ({scheme})", plan.folds.len());
    for (k, f) in plan.folds.iter().enumerate() {
        println!(
            "fold{:02}: train {:>3}  val {:>3}  test {:>3}  [{}]",
            k + 1,
            f.train.len(),
            f.val.len(),
            f.test.len(),
            f.test.join(",")
        );
    }
    run.write("splits.json", &serde_json::to_string_pretty(&plan)?)?;
    Ok(())
}
