use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edgecnn_core::config::{Settings, SettingsBuilder, DEFAULT_SOURCE_SIDE};
use edgecnn_core::dataset::{load_image_vec, read_ppm, DatasetIndex, Split, SynthSpec};
use edgecnn_core::forward::{Net, ResizePlan};
use edgecnn_core::numcore::argmax;
use edgecnn_core::oracle::{gradient_check, GradCheckReport};
use edgecnn_core::params::ARRAY_NAMES;
use edgecnn_core::trainer::{evaluate, BatchRecord, EvalResult, TrainObserver, Trainer};
use edgecnn_core::weightstore::{
    array_stats, default_weights_dir, export_header, he_init, resolve_weights, save_binary,
    BakedWeights, WeightOrigin, WeightSet, BINARY_FILE, HEADER_FILE, WEIGHTS_DIR,
};
use edgecnn_core::{ConfigError, Error, Exec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static BAKED_BYTES: &[u8] = include_bytes!(concat!(env!("OUT_DIR"), "/baked.bin"));
const BAKED_ID: &str = env!("EDGECNN_BAKED_ID");

const EXIT_CONFIG: u8 = 2;
const EXIT_DATASET: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_IO: u8 = 5;

/// Train, run and inspect the two-layer image classifier.
#[derive(Debug, Parser)]
#[command(name = "edgecnn", version)]
struct Cli {
    /// KEY=VALUE configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a folder-per-class PPM dataset and save the weights.
    Train(TrainArgs),
    /// Classify one image.
    Infer(InferArgs),
    /// Measure accuracy on a dataset split.
    Eval(EvalArgs),
    /// Write the weights as a C header.
    Export(ExportArgs),
    /// Per-array statistics of the resolved weights.
    Inspect(WeightArgs),
    /// Time resize + normalize + forward over repeated frames.
    Bench(BenchArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic solid-colour dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Clone)]
struct NetArgs {
    /// Network input side in pixels.
    #[arg(long)]
    input_size: Option<usize>,
    /// Seed for shuffling and He initialisation.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Clone)]
struct WeightArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Weight binary; defaults to <data>/header/myWeights.bin.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Dataset root, used to locate the default weight directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Ignore any weights embedded at build time.
    #[arg(long)]
    no_baked: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    w: WeightArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Images per class held out for validation (0 disables).
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    no_shuffle: bool,
    /// Line-delimited JSON batch log; defaults to train_log.jsonl next to the weights.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    w: WeightArgs,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    w: WeightArgs,
    #[arg(long, value_enum, default_value = "validation")]
    split: SplitArg,
    #[arg(long)]
    val: Option<usize>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    w: WeightArgs,
    /// Header path; defaults to myWeights.h beside the binary.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    w: WeightArgs,
    /// PPM frame to process; a mid-grey frame is used when absent.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    frames: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    input_size: usize,
    #[arg(long, default_value_t = 20)]
    draws: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    #[arg(long, default_value_t = DEFAULT_SOURCE_SIDE)]
    side: usize,
    /// Per-pixel noise amplitude as a fraction of full scale.
    #[arg(long, default_value_t = 0.1)]
    noise: f32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) | Error::ClassIndex { .. } | Error::Shape { .. } => {
                (EXIT_CONFIG, "config")
            }
            Error::Dataset(_) => (EXIT_DATASET, "dataset"),
            Error::Numeric(_) => (EXIT_NUMERIC, "numeric"),
            Error::Weights(_) => (EXIT_IO, "weights"),
        };
        Self::new(code, format!("{kind} error: {e}"))
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Error::from(e).into()
    }
}

impl From<edgecnn_core::DatasetError> for Failure {
    fn from(e: edgecnn_core::DatasetError) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

struct Ctx {
    config: Option<PathBuf>,
    exec: Exec,
}

impl Ctx {
    fn settings(&self, overrides: &[(&str, String)]) -> CliResult<Settings> {
        let mut b = SettingsBuilder::new();
        if let Some(path) = &self.config {
            b.apply_file(path)?;
        }
        for (k, v) in overrides {
            b.set(k, v)?;
        }
        Ok(b.build()?)
    }

    fn net_settings(&self, net: &NetArgs, extra: &[(&str, String)]) -> CliResult<Settings> {
        let mut o: Vec<(&str, String)> = extra.to_vec();
        if let Some(s) = net.input_size {
            o.push(("input_size", s.to_string()));
        }
        if let Some(s) = net.seed {
            o.push(("shuffle_seed", s.to_string()));
        }
        self.settings(&o)
    }
}

impl WeightArgs {
    fn binary_path(&self) -> PathBuf {
        match (&self.weights, &self.data) {
            (Some(p), _) => p.clone(),
            (None, Some(root)) => default_weights_dir(root).join(BINARY_FILE),
            (None, None) => Path::new(WEIGHTS_DIR).join(BINARY_FILE),
        }
    }

    fn resolve(&self, settings: &Settings) -> CliResult<(WeightSet, WeightOrigin)> {
        let baked = (!self.no_baked && !BAKED_BYTES.is_empty()).then_some(BakedWeights {
            id: BAKED_ID,
            bytes: BAKED_BYTES,
        });
        let path = self.binary_path();
        let seed = settings.train.shuffle_seed;
        Ok(resolve_weights(Some(&path), baked, &settings.dims(), seed)?)
    }

    fn data_root(&self) -> CliResult<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Failure::new(EXIT_CONFIG, "config error: --data is required"))
    }
}

fn print_origin(origin: &WeightOrigin) {
    println!("Weights: {}", origin.describe());
    if let WeightOrigin::FromHeInit { seed } = origin {
        eprintln!(
            "warning: no saved or baked weights found; using He initialisation (seed {seed})"
        );
    }
}

struct CliObserver {
    interrupt: Arc<AtomicBool>,
    log: BufWriter<File>,
    log_path: PathBuf,
    error: Option<Failure>,
}

impl TrainObserver for CliObserver {
    fn on_epoch_start(&mut self, epoch: usize, epochs: usize) {
        println!("Epoch {epoch}/{epochs}");
    }

    fn on_batch(&mut self, record: &BatchRecord) {
        println!("{}", record.log_line());
        if self.error.is_none() {
            let line = serde_json::to_string(record).expect("record serializes");
            if let Err(e) = writeln!(self.log, "{line}") {
                self.error = Some(Failure::io(&self.log_path, e));
            }
        }
    }

    fn poll_interrupt(&mut self) -> bool {
        self.interrupt.load(Ordering::SeqCst)
    }
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> CliResult {
    let mut o = Vec::new();
    if let Some(v) = a.epochs {
        o.push(("epochs", v.to_string()));
    }
    if let Some(v) = a.batch {
        o.push(("batch_size", v.to_string()));
    }
    if let Some(v) = a.lr {
        o.push(("learning_rate", v.to_string()));
    }
    if let Some(v) = a.val {
        o.push(("validation_images", v.to_string()));
    }
    if a.no_shuffle {
        o.push(("shuffle_enabled", "false".to_string()));
    }
    let settings = ctx.net_settings(&a.w.net, &o)?;
    let root = a.w.data_root()?;
    let index = DatasetIndex::scan(root, &settings.classes, settings.train.validation_images)?;

    let (weights, origin) = a.w.resolve(&settings)?;
    println!("{}", origin.banner());
    print_origin(&origin);
    let bin = a.w.binary_path();
    let dir = bin.parent().map(Path::to_path_buf).unwrap_or_default();
    let log_path = a
        .report
        .clone()
        .unwrap_or_else(|| dir.join("train_log.jsonl"));
    if let Some(parent) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
    }
    let log = File::create(&log_path).map_err(|e| Failure::io(&log_path, e))?;

    let interrupt = Arc::new(AtomicBool::new(false));
    let flag = interrupt.clone();
    // a second handler registration (e.g. in tests) is harmless to skip
    let _ = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst));

    let mut trainer = Trainer::new(&settings, weights, origin)?.with_exec(ctx.exec);
    let mut observer = CliObserver {
        interrupt,
        log: BufWriter::new(log),
        log_path: log_path.clone(),
        error: None,
    };
    // a numeric fault returns here, before anything is written over good weights
    let report = trainer.train(&index, &mut observer)?;
    if let Some(e) = observer.error.take() {
        return Err(e);
    }
    observer
        .log
        .flush()
        .map_err(|e| Failure::io(&log_path, e))?;

    if report.interrupted {
        println!("Training interrupted; keeping weights from the last completed batch");
    } else {
        println!("--- Training Complete ---");
        match report.validation_accuracy() {
            Some(acc) => println!("Validation Accuracy: {acc:.1}"),
            None => println!("Validation disabled (validation_images = 0)"),
        }
    }
    save_binary(&trainer.weights, &bin)?;
    let header = dir.join(HEADER_FILE);
    export_header(
        &trainer.weights,
        &trainer.net.dims,
        &settings.classes,
        &header,
    )?;
    println!("Saved {} and {}", bin.display(), header.display());
    println!("Batch log: {}", log_path.display());
    Ok(())
}

fn cmd_infer(ctx: &Ctx, a: &InferArgs) -> CliResult {
    let settings = ctx.net_settings(&a.w.net, &[])?;
    let (weights, origin) = a.w.resolve(&settings)?;
    print_origin(&origin);
    let d = settings.dims();
    let plan = ResizePlan::new(d.input_size, DEFAULT_SOURCE_SIDE.max(d.input_size))?;
    let input = load_image_vec(&a.image, &plan)?;
    let net = Net::new(d, settings.policy).with_exec(ctx.exec);
    let mut acts = net.activations::<f32>();
    let probs = net.forward(&weights, &input, &mut acts)?;
    let best = argmax(probs);
    let label = |i: usize| settings.classes.label(i).unwrap_or("?");
    println!("Pred: {} ({:.1}%)", label(best), probs[best] * 100.0);
    for (i, p) in probs.iter().enumerate() {
        println!("  {}: {:.1}%", label(i), p * 100.0);
    }
    Ok(())
}

fn print_confusion(settings: &Settings, r: &EvalResult) {
    let labels = settings.classes.labels();
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(4).max(6);
    print!("{:>width$}", "true\\pred");
    for l in labels {
        print!(" {l:>width$}");
    }
    println!();
    for (l, row) in labels.iter().zip(&r.confusion) {
        print!("{l:>width$}");
        for c in row {
            print!(" {c:>width$}");
        }
        println!();
    }
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> CliResult {
    let mut o = Vec::new();
    if let Some(v) = a.val {
        o.push(("validation_images", v.to_string()));
    }
    let settings = ctx.net_settings(&a.w.net, &o)?;
    let root = a.w.data_root()?;
    let index = DatasetIndex::scan(root, &settings.classes, settings.train.validation_images)?;
    let (split, name) = match a.split {
        SplitArg::Train => (Split::Train, "Train"),
        SplitArg::Validation => (Split::Validation, "Validation"),
        SplitArg::All => (Split::All, "Overall"),
    };
    if matches!(split, Split::Validation) && index.validation_images == 0 {
        println!("Validation disabled (validation_images = 0)");
        return Ok(());
    }
    let (weights, origin) = a.w.resolve(&settings)?;
    print_origin(&origin);
    let d = settings.dims();
    let plan = ResizePlan::new(d.input_size, DEFAULT_SOURCE_SIDE.max(d.input_size))?;
    let net = Net::new(d, settings.policy).with_exec(ctx.exec);
    let result = evaluate(&net, &plan, &weights, &index.samples(split))?;
    match result.accuracy() {
        Some(acc) => println!(
            "{name} Accuracy: {acc:.1} ({}/{})",
            result.correct, result.total
        ),
        None => println!("{name} split is empty"),
    }
    print_confusion(&settings, &result);
    Ok(())
}

fn cmd_export(ctx: &Ctx, a: &ExportArgs) -> CliResult {
    let settings = ctx.net_settings(&a.w.net, &[])?;
    let (weights, origin) = a.w.resolve(&settings)?;
    print_origin(&origin);
    let out = a.output.clone().unwrap_or_else(|| {
        a.w.binary_path()
            .parent()
            .map(|p| p.join(HEADER_FILE))
            .unwrap_or_else(|| PathBuf::from(HEADER_FILE))
    });
    export_header(&weights, &settings.dims(), &settings.classes, &out)?;
    println!("Wrote {}", out.display());
    Ok(())
}

fn cmd_inspect(ctx: &Ctx, a: &WeightArgs) -> CliResult {
    let settings = ctx.net_settings(&a.net, &[])?;
    let (weights, origin) = a.resolve(&settings)?;
    print_origin(&origin);
    let d = settings.dims();
    println!(
        "input {0}x{0}, {1} classes, {2} parameters ({3} bytes)",
        d.input_size,
        d.num_classes,
        d.total_params,
        d.total_params * 4
    );
    let fan_ins = d.fan_ins();
    println!(
        "{:<10} {:>7} {:>11} {:>11} {:>11} {:>11} {:>11}",
        "array", "len", "min", "max", "mean", "std", "he std"
    );
    for (i, (name, arr)) in ARRAY_NAMES.iter().zip(weights.arrays()).enumerate() {
        let s = array_stats(arr);
        let he = if i % 2 == 0 {
            format!("{:.5}", (2.0 / fan_ins[i / 2] as f64).sqrt())
        } else {
            "-".to_string()
        };
        println!(
            "{:<10} {:>7} {:>11.5} {:>11.5} {:>11.5} {:>11.5} {:>11}",
            name, s.len, s.min, s.max, s.mean, s.std, he
        );
    }
    Ok(())
}

fn cmd_bench(ctx: &Ctx, a: &BenchArgs) -> CliResult {
    if a.frames == 0 {
        return Err(Failure::new(
            EXIT_CONFIG,
            "config error: --frames must be at least 1",
        ));
    }
    let settings = ctx.net_settings(&a.w.net, &[])?;
    let (weights, origin) = a.w.resolve(&settings)?;
    print_origin(&origin);
    let d = settings.dims();
    let frame = match &a.image {
        Some(p) => read_ppm(p)?.center_crop_square(),
        None => {
            let side = DEFAULT_SOURCE_SIDE.max(d.input_size);
            edgecnn_core::dataset::RgbImage::new(side, side, vec![128; side * side * 3])
        }
    };
    let plan = ResizePlan::new(d.input_size, frame.width)?;
    let net = Net::new(d, settings.policy).with_exec(ctx.exec);
    let mut acts = net.activations::<f32>();
    let mut times = Vec::with_capacity(a.frames);
    for k in 1..=a.frames {
        let start = Instant::now();
        plan.resize_normalize(&frame.pixels, &mut acts.input)?;
        net.forward_loaded(&weights, &mut acts)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        println!("Frame {k}: {ms:.3} ms ({:.1} FPS)", 1e3 / ms);
        times.push(ms);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    let max = times.iter().copied().fold(0.0, f64::max);
    println!(
        "{} frames: mean {mean:.3} ms ({:.1} FPS), min {min:.3} ms, max {max:.3} ms",
        times.len(),
        1e3 / mean
    );
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> CliResult {
    let settings = ctx.settings(&[("input_size", a.input_size.to_string())])?;
    let d = settings.dims();
    let net = Net::new(d, settings.policy).with_exec(ctx.exec);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut reports = Vec::with_capacity(a.draws);
    for draw in 0..a.draws {
        let w = he_init(&d, rng.gen()).cast::<f64>();
        let input: Vec<f64> = (0..d.input_len())
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        let class = rng.gen_range(0..d.num_classes);
        let r = gradient_check(&net, &w, &input, class, a.step)?;
        println!(
            "draw {:>3}: max rel err {:.3e} ({} checked, {} masked)",
            draw + 1,
            r.max_rel_err,
            r.checked,
            r.masked
        );
        reports.push(r);
    }
    let all = GradCheckReport::merge(&reports);
    let pass = all.passes(1e-3);
    println!(
        "{} parameters, {} draws: max relative error {:.3e} -> {}",
        d.total_params,
        a.draws,
        all.max_rel_err,
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_NUMERIC,
            "numeric error: gradient check exceeded 1e-3",
        ))
    }
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> CliResult {
    let settings = ctx.settings(&[])?;
    let mut spec = SynthSpec::new(settings.classes.len());
    spec.per_class = a.per_class;
    spec.side = a.side;
    spec.noise = a.noise;
    spec.seed = a.seed;
    spec.write(&a.output, &settings.classes)
        .map_err(|e| Failure::io(&a.output, e))?;
    println!(
        "Wrote {} images per class for {} classes under {}",
        a.per_class,
        settings.classes.len(),
        a.output.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    let ctx = Ctx {
        config: cli.config.clone(),
        exec: if cli.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        },
    };
    match &cli.command {
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Infer(a) => cmd_infer(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Export(a) => cmd_export(&ctx, a),
        Command::Inspect(a) => cmd_inspect(&ctx, a),
        Command::Bench(a) => cmd_bench(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
