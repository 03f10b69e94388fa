//! `derain` subcommands. Exit codes: 0 success, 1 usage, 2 data or
//! configuration, 3 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use derain_core::evaluation::{cross_domain_sweep, evaluate_dir, export_embeddings, EmbeddingOptions, GeneratorRestorer, IdentityRestorer, Restorer};
use derain_core::image::{load_image, save_image};
use derain_core::networks::{translate_image, Direction};
use derain_core::rain::{write_synthetic_dataset, write_training_layout, RainSynthesisParams, SplitCounts};
use derain_core::training::{fit, load_model, FitOptions, TrainConfig};
use derain_core::{DerainError, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "derain", version, about = "Unpaired single-image deraining")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write procedural scenes with synthetic rain.
    Synth(SynthArgs),
    /// Train from a configuration file plus overrides.
    #[command(after_help = TrainConfig::help_text())]
    Train(TrainArgs),
    /// Derain every image of a directory.
    Infer(InferArgs),
    /// Score a model against reference images.
    Eval(EvalArgs),
    /// Evaluate one model on several datasets in order.
    Sweep(SweepArgs),
    /// Write projected codes of rainy and clean images as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Paired scenes written to clean/, rainy/ and streaks/.
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Unpaired layout `RAINY,CLEAN,TEST` into trainR/, trainN/, testR/, testGT/ instead.
    #[arg(long, value_parser = parse_split)]
    split: Option<SplitCounts>,
    /// Streak count range `MIN,MAX`.
    #[arg(long, value_parser = parse_pair::<u32>)]
    streaks: Option<(u32, u32)>,
    /// Streak intensity range `MIN,MAX`.
    #[arg(long, value_parser = parse_pair::<f64>)]
    intensity: Option<(f64, f64)>,
    /// Streak length range `MIN,MAX` in pixels.
    #[arg(long, value_parser = parse_pair::<u32>)]
    length: Option<(u32, u32)>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `training.seed=7` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Shorthand for `--set training.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    stop_after_epoch: Option<usize>,
    #[arg(long)]
    max_iterations: Option<u64>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelChoice {
    /// Checkpoint directory.
    #[arg(long, required_unless_present = "identity")]
    checkpoint: Option<PathBuf>,
    /// Score the unrestored inputs instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    identity: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelChoice,
    #[arg(long)]
    rainy: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelChoice,
    /// `NAME=RAINY_DIR:GT_DIR`, in sweep order (repeatable).
    #[arg(long = "dataset", value_parser = parse_dataset)]
    datasets: Vec<(String, PathBuf, PathBuf)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    rainy: PathBuf,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long, default_value_t = 16)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tap layer to export; the deepest tap by default.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> std::result::Result<(T, T), String> {
    let (a, b) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let parse = |v: &str| v.trim().parse::<T>().map_err(|_| format!("cannot parse {v:?}"));
    Ok((parse(a)?, parse(b)?))
}

fn parse_split(s: &str) -> std::result::Result<SplitCounts, String> {
    let parts: Vec<usize> = s.split(',').map(|v| v.trim().parse::<usize>().map_err(|_| format!("cannot parse {v:?}"))).collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [train_rainy, train_clean, test] => Ok(SplitCounts { train_rainy, train_clean, test }),
        _ => Err("expected RAINY,CLEAN,TEST".into()),
    }
}

fn parse_dataset(s: &str) -> std::result::Result<(String, PathBuf, PathBuf), String> {
    let (name, dirs) = s.split_once('=').ok_or("expected NAME=RAINY_DIR:GT_DIR")?;
    let (rainy, gt) = dirs.split_once(':').ok_or("expected NAME=RAINY_DIR:GT_DIR")?;
    Ok((name.to_string(), PathBuf::from(rainy), PathBuf::from(gt)))
}

/// Parses `args` (program name first), dispatches and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_env("DERAIN_LOG").try_init();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                EXIT_INPUT
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => {
            let (written, skipped) = infer(&a.checkpoint, &a.input, &a.out)?;
            println!("wrote {written} images, skipped {skipped}");
            Ok(())
        }
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::ExportEmbeddings(a) => export(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DerainError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| DerainError::io(path, e))
}

/// Snapshot of the configuration an output was produced with.
fn write_resolved(out: &Path, cfg: &TrainConfig) -> Result<()> {
    write_text(&out.join("resolved.cfg"), &cfg.to_toml_string())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut params = RainSynthesisParams { seed: a.seed, ..Default::default() };
    if let Some(r) = a.streaks {
        params.streak_count_range = r;
    }
    if let Some(r) = a.intensity {
        params.intensity_range = r;
    }
    if let Some(r) = a.length {
        params.streak_length_range = r;
    }
    let manifest = match a.split {
        Some(split) => write_training_layout(&a.out, split, a.size, &params)?,
        None => write_synthetic_dataset(&a.out, a.count, a.size, &params)?,
    };
    write_text(&a.out.join("resolved.cfg"), &format!("# synth\n{}\n", serde_json::to_string_pretty(&manifest.params).expect("params serialize")))?;
    println!("wrote {} scenes to {}", manifest.files.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut overrides = a.overrides;
    if let Some(seed) = a.seed {
        overrides.push(format!("training.seed={seed}"));
    }
    let cfg = TrainConfig::load(a.config.as_deref(), &overrides)?;
    let opts = FitOptions { out_dir: a.out, resume: a.resume, stop_after_epoch: a.stop_after_epoch, max_iterations: a.max_iterations };
    let outcome = fit(&cfg, &opts)?;
    println!("checkpoint {}", outcome.final_checkpoint.display());
    if let Some(m) = outcome.last_metrics {
        println!("iteration {} l_total {:.6}", m.iteration, m.l_total);
    }
    Ok(())
}

/// Derains every image in `input` into `out` under the same names.
/// Returns `(written, skipped)`; unreadable images are skipped with a warning.
pub fn infer(checkpoint: &Path, input: &Path, out: &Path) -> Result<(usize, usize)> {
    let (model, manifest) = load_model::<f32>(checkpoint, None)?;
    let files = derain_core::data::list_images(input)?;
    if files.is_empty() {
        return Err(DerainError::Config(format!("no images in {}", input.display())));
    }
    std::fs::create_dir_all(out).map_err(|e| DerainError::io(out, e))?;
    write_resolved(out, &manifest.config)?;
    let (mut written, mut skipped) = (0, 0);
    for file in files {
        let img = match load_image(&file) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                skipped += 1;
                continue;
            }
        };
        let derained = translate_image(&model, Direction::RainToClean, &img)?;
        save_image(&derained, &out.join(file.file_name().expect("listed files have names")))?;
        written += 1;
    }
    Ok((written, skipped))
}

fn restorer(choice: &ModelChoice) -> Result<(Box<dyn Restorer>, Option<TrainConfig>)> {
    match (&choice.checkpoint, choice.identity) {
        (_, true) => Ok((Box::new(IdentityRestorer), None)),
        (Some(dir), false) => {
            let r = GeneratorRestorer::from_checkpoint(dir)?;
            let (_, manifest) = load_model::<f32>(dir, None)?;
            Ok((Box::new(r), Some(manifest.config)))
        }
        (None, false) => Err(DerainError::Config("either --checkpoint or --identity is required".into())),
    }
}

fn write_model_snapshot(out: &Path, cfg: Option<&TrainConfig>) -> Result<()> {
    match cfg {
        Some(cfg) => write_resolved(out, cfg),
        None => write_text(&out.join("resolved.cfg"), "# identity restorer\n"),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let (restorer, cfg) = restorer(&a.model)?;
    let report = evaluate_dir(restorer.as_ref(), &a.rainy, &a.gt)?;
    report.write_json(&a.out.join("report.json"))?;
    report.write_csv(&a.out.join("report.csv"))?;
    write_model_snapshot(&a.out, cfg.as_ref())?;
    println!(
        "{} images: PSNR {:.3} dB (input {:.3} dB), SSIM {:.4} (input {:.4})",
        report.rows.len(),
        report.mean.psnr_db,
        report.mean.input_psnr_db,
        report.mean.ssim,
        report.mean.input_ssim
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (restorer, cfg) = restorer(&a.model)?;
    let table = cross_domain_sweep(restorer.as_ref(), &a.datasets)?;
    write_text(&a.out.join("report.json"), &serde_json::to_string_pretty(&table).expect("table serializes"))?;
    let markdown = table.to_markdown();
    write_text(&a.out.join("report.md"), &markdown)?;
    write_model_snapshot(&a.out, cfg.as_ref())?;
    print!("{markdown}");
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let (model, manifest) = load_model::<f32>(&a.checkpoint, None)?;
    let opts = EmbeddingOptions { n_samples: a.n_samples, seed: a.seed, layer: a.layer };
    let csv = export_embeddings(&model, &a.rainy, &a.clean, &opts)?;
    write_text(&a.out.join("embeddings.csv"), &csv)?;
    write_resolved(&a.out, &manifest.config)?;
    println!("wrote {} rows", csv.lines().count().saturating_sub(1));
    Ok(())
}
