//! `dianet` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};

use dianet::data::{load_dataset, load_manifest, load_sequence, synth_generate, write_dataset, Dataset, SynthConfig};
use dianet::dynimg::{export_png, normalize, write_dir1, NormalizeMode, Phase};
use dianet::harness::{
    dynamic_image, emit_report, gradcheck_model, render_report, run_ablation, run_lambda_sweep, run_loso, train_all,
    Report, ReportFormat, RunOptions, TrainConfig,
};
use dianet::model::{save_checkpoint, BackboneConfig, ConvStage, ModelConfig};
use dianet::ndcore::GradCheckOptions;
use dianet::objective::LAMBDA_SWEEP;

#[derive(Debug, Parser)]
#[command(
    name = "dianet",
    version,
    about = "Phase-aware dynamic images and dual-stream micro-expression recognition"
)]
struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for LOSO folds (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute dynamic images for every sequence of a manifest.
    Di(DiArgs),
    /// Write a synthetic corpus (frames + manifest).
    Synth(SynthArgs),
    /// Train one model on a whole corpus and save a checkpoint.
    Train(RunArgs),
    /// Leave-one-subject-out evaluation.
    Loso(LosoArgs),
    /// Fusion and input-mode ablation tables.
    Ablate(RunArgs),
    /// Finite-difference gradient check of the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Onset,
    Offset,
    Full,
    All,
}

impl PhaseArg {
    fn phases(self) -> Vec<Phase> {
        match self {
            PhaseArg::Onset => vec![Phase::OnsetApex],
            PhaseArg::Offset => vec![Phase::ApexOffset],
            PhaseArg::Full => vec![Phase::Full],
            PhaseArg::All => vec![Phase::OnsetApex, Phase::ApexOffset, Phase::Full],
        }
    }
}

#[derive(Debug, Args)]
struct DiArgs {
    /// Manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = PhaseArg::All)]
    phase: PhaseArg,
    /// Store min-max normalised rasters instead of raw sums.
    #[arg(long)]
    normalize: bool,
    /// Also write an 8-bit PNG next to each DIR1 file.
    #[arg(long)]
    png: bool,
    /// Stop at the first failing sequence.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Clone, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    #[arg(long = "samples-per-subject", default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long = "frame-size", default_value_t = 16)]
    frame_size: usize,
    #[arg(long = "sequence-length", default_value_t = 12)]
    length: usize,
    #[arg(long = "noise-std", default_value_t = 0.05)]
    noise: f64,
}

impl SynthArgs {
    fn config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_subjects: self.subjects,
            samples_per_subject: self.samples,
            n_classes: self.classes,
            frame_size: self.frame_size,
            sequence_length: self.length,
            noise_std: self.noise,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Text,
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Text => ReportFormat::Text,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    /// Manifest CSV of an on-disk corpus.
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    manifest: Option<PathBuf>,
    /// Generate the corpus in memory instead (seeded by --seed).
    #[arg(long)]
    synth: bool,
    #[command(flatten)]
    synth_args: SynthArgs,
    /// Drop classes with fewer samples than this.
    #[arg(long, default_value_t = 0)]
    min_class_count: usize,
    /// TrainConfig as JSON; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Square network input side (default: frame size).
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    /// dual-phase, dual-full, single-full, single-onset or single-offset.
    #[arg(long)]
    stream_mode: Option<String>,
    /// cross or simple.
    #[arg(long)]
    attention: Option<String>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    n_tokens: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    tie_backbones: bool,
    /// Report format printed to stdout; JSON is always written too.
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    format: FormatArg,
}

#[derive(Debug, Args)]
struct LosoArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Repeat the evaluation for each λ in the default sweep.
    #[arg(long, conflicts_with = "lambda")]
    lambda_sweep: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Bits {
    #[value(name = "32")]
    B32,
    #[value(name = "64")]
    B64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Floating-point width of the check.
    #[arg(long, value_enum, default_value_t = Bits::B64)]
    bits: Bits,
    /// ModelConfig as JSON (default: 3 classes, 16×16, d=32).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Check at most this many coordinates per parameter tensor.
    #[arg(long)]
    max_coords: Option<usize>,
}

/// Errors that are the caller's fault map to exit code 2.
struct Usage(String);

impl std::fmt::Debug for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::new()
        .parse_filters(level)
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            let is_usage = e.downcast_ref::<Usage>().is_some()
                || e.downcast_ref::<dianet::Error>().is_some_and(|d| !d.is_domain());
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    if cli.threads == Some(0) {
        return Err(usage("--threads must be at least 1"));
    }
    match &cli.command {
        Command::Di(a) => cmd_di(cli, a),
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Loso(a) => cmd_loso(cli, a),
        Command::Ablate(a) => cmd_ablate(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn prepare_out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn cmd_di(cli: &Cli, a: &DiArgs) -> anyhow::Result<ExitCode> {
    require_file(&a.manifest, "manifest")?;
    prepare_out_dir(&cli.out_dir)?;
    let manifest = load_manifest(&a.manifest)?;
    let phases = a.phase.phases();
    let mut failures = Vec::new();
    let mut written = 0;
    for entry in &manifest.entries {
        let result = (|| -> dianet::Result<usize> {
            let seq = load_sequence(&manifest, entry)?;
            let dir = cli.out_dir.join(&seq.id);
            fs::create_dir_all(&dir).map_err(|e| dianet::Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let mut n = 0;
            for &phase in &phases {
                let di = dynamic_image(&seq, phase)?;
                let raster = if a.normalize {
                    normalize(&di.raster, NormalizeMode::MinMaxPerChannel)
                } else {
                    di.raster
                };
                write_dir1(&dir.join(format!("{}.dir1", phase.label())), &raster)?;
                if a.png {
                    export_png(
                        &dir.join(format!("{}.png", phase.label())),
                        &raster,
                        NormalizeMode::MinMaxPerChannel,
                    )?;
                }
                n += 1;
            }
            Ok(n)
        })();
        match result {
            Ok(n) => written += n,
            Err(e) => {
                if a.strict {
                    return Err(anyhow!(e).context(format!("sequence {}", entry.dir)));
                }
                failures.push((entry.dir.clone(), e));
            }
        }
    }
    println!("wrote {written} dynamic images to {}", cli.out_dir.display());
    if failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    eprintln!("{} sequence(s) failed:", failures.len());
    for (dir, e) in &failures {
        eprintln!("  {dir}: {e}");
    }
    Ok(ExitCode::from(1))
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> anyhow::Result<ExitCode> {
    let cfg = a.config(cli.seed);
    cfg.validate()?;
    prepare_out_dir(&cli.out_dir)?;
    let ds = synth_generate(&cfg)?;
    let manifest = write_dataset(&ds, &cli.out_dir)?;
    println!("wrote {} sequences; manifest {}", ds.len(), manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn load_data(cli: &Cli, a: &RunArgs) -> anyhow::Result<(Dataset, String)> {
    let (ds, name) = match &a.manifest {
        Some(path) => {
            let manifest = load_manifest(path)?;
            let name = path
                .parent()
                .and_then(Path::file_name)
                .map_or_else(|| "corpus".to_string(), |n| n.to_string_lossy().into_owned());
            (load_dataset(&manifest)?, name)
        }
        None => {
            let cfg = a.synth_args.config(cli.seed);
            (synth_generate(&cfg)?, "synthetic".to_string())
        }
    };
    let ds = if a.min_class_count > 0 {
        ds.filter_min_class_count(a.min_class_count)
    } else {
        ds
    };
    if ds.is_empty() {
        bail!("dataset is empty");
    }
    Ok((ds, name))
}

fn train_config(cli: &Cli, a: &RunArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = cli.seed;
    macro_rules! set {
        ($($field:ident <- $value:expr),* $(,)?) => {
            $(if let Some(v) = $value.clone() { cfg.$field = v; })*
        };
    }
    set!(
        lr <- a.lr,
        batch_size <- a.batch_size,
        max_epochs <- a.epochs,
        patience <- a.patience,
        lambda <- a.lambda,
        stream_mode <- a.stream_mode,
        attention <- a.attention,
        n_tokens <- a.n_tokens,
        dropout <- a.dropout,
    );
    if a.input_size.is_some() {
        cfg.input_size = a.input_size;
    }
    if a.hidden.is_some() {
        cfg.hidden = a.hidden;
    }
    if let Some(d) = a.feature_dim {
        cfg.backbone.feature_dim = d;
    }
    if a.no_augment {
        cfg.augment = false;
    }
    if a.tie_backbones {
        cfg.tie_backbones = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_run_paths(cli: &Cli, a: &RunArgs) -> anyhow::Result<()> {
    if let Some(m) = &a.manifest {
        require_file(m, "manifest")?;
    }
    if let Some(c) = &a.config {
        require_file(c, "config")?;
    }
    prepare_out_dir(&cli.out_dir)
}

fn write_reports<R: Report + ?Sized>(cli: &Cli, report: &R, stem: &str, format: FormatArg) -> anyhow::Result<()> {
    let format = ReportFormat::from(format);
    print!("{}", render_report(report, format)?);
    for f in [format, ReportFormat::Json] {
        let path = cli.out_dir.join(format!("{stem}.{}", f.extension()));
        emit_report(report, f, &path)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn run_options(cli: &Cli) -> RunOptions {
    RunOptions {
        threads: cli.threads,
        fold_order: None,
    }
}

fn cmd_train(cli: &Cli, a: &RunArgs) -> anyhow::Result<ExitCode> {
    check_run_paths(cli, a)?;
    let cfg = train_config(cli, a)?;
    let (ds, _) = load_data(cli, a)?;
    let (model, history) = train_all(&ds, &cfg)?;
    let dir = cli.out_dir.join("checkpoint");
    save_checkpoint(&dir, &model, &ds.class_names, cfg.seed)?;
    let path = cli.out_dir.join("history.json");
    fs::write(&path, serde_json::to_string_pretty(&history)?).with_context(|| format!("writing {}", path.display()))?;
    let last = history.epochs.last().ok_or_else(|| anyhow!("no epochs ran"))?;
    println!(
        "trained {} epochs (best {}), train accuracy {:.4}; checkpoint {}",
        history.epochs.len(),
        history.best_epoch,
        last.train_accuracy,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_loso(cli: &Cli, a: &LosoArgs) -> anyhow::Result<ExitCode> {
    check_run_paths(cli, &a.run)?;
    let cfg = train_config(cli, &a.run)?;
    let (ds, name) = load_data(cli, &a.run)?;
    if a.lambda_sweep {
        let reports = run_lambda_sweep(&ds, &name, &cfg, &LAMBDA_SWEEP, &run_options(cli))?;
        write_reports(cli, reports.as_slice(), "lambda_sweep", a.run.format)?;
    } else {
        let report = run_loso(&ds, &name, &cfg, &run_options(cli))?;
        write_reports(cli, &report, "loso", a.run.format)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(cli: &Cli, a: &RunArgs) -> anyhow::Result<ExitCode> {
    check_run_paths(cli, a)?;
    let cfg = train_config(cli, a)?;
    let (ds, name) = load_data(cli, a)?;
    let report = run_ablation(&ds, &name, &cfg, &run_options(cli))?;
    if !report.dual_phase_beats_single_full {
        warn!("directional check: dual-phase scored below single full DI");
    }
    write_reports(cli, &report, "ablation", a.format)?;
    Ok(ExitCode::SUCCESS)
}

/// 3 classes, 16×16 single-channel input, d = 32.
fn gradcheck_default_config(seed: u64) -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        input_size: 16,
        backbone: BackboneConfig {
            stages: vec![
                ConvStage {
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                },
                ConvStage {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                },
            ],
            feature_dim: 32,
            flatten: true,
        },
        n_classes: 3,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> anyhow::Result<ExitCode> {
    let config = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => gradcheck_default_config(0),
    };
    let opts = if a.bits == Bits::B64 {
        GradCheckOptions {
            max_coords_per_input: a.max_coords,
            ..GradCheckOptions::default()
        }
    } else {
        // analytic gradients carry float-32 rounding
        GradCheckOptions {
            tolerance: 1e-3,
            floor: 1e-4,
            max_coords_per_input: a.max_coords,
            ..GradCheckOptions::default()
        }
    };
    let report = if a.bits == Bits::B64 {
        gradcheck_model(&config, a.batch, a.lambda, 0, opts)?
    } else {
        dianet::harness::gradcheck_model_f32(&config, a.batch, a.lambda, 0, opts)?
    };
    println!(
        "gradcheck {}-bit: {} coordinates ({} skipped on ReLU kinks), max relative error {:.3e} (tolerance {:.0e})",
        if a.bits == Bits::B64 { 64 } else { 32 },
        report.coords_checked,
        report.kinks,
        report.max_rel_error,
        report.tolerance
    );
    if let Some((input, coord, an, nu)) = &report.worst {
        println!("worst: input {input} coordinate {coord}: analytic {an:.6e} numeric {nu:.6e}");
    }
    if report.passed() {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        error!("gradient check failed");
        println!("FAIL");
        Ok(ExitCode::from(1))
    }
}
