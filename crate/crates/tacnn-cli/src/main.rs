//! Batch command-line surface over the tacnn engine.
//!
//! Exit codes: 0 success, 1 verification/numeric failure, 2 usage error,
//! 3 data or format error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use tacnn::augment::{apply_batch_mix, MixKind, MixPolicy};
use tacnn::data::{self, read_samples, write_samples, SkeletonSample};
use tacnn::gconv::equiv_report;
use tacnn::model::{attention_csv, export_attention, TaCnn};
use tacnn::profiler::{profile, render_report, ReportFormat};
use tacnn::train::{
    coord_scale_csv, coord_scale_experiment, evaluate, metrics_jsonl, train_loop,
};
use tacnn::{Error, ExperimentConfig, Result};

#[derive(Parser)]
#[command(
    name = "tacnn",
    about = "Skeleton action recognition engine: train, evaluate, profile, verify",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Text,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MixFlavor {
    Skeleton,
    Mixup,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint + metrics log.
    Train {
        /// Experiment config JSON (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset (.skb1 or .jsonl).
        #[arg(long)]
        data: PathBuf,
        /// Optional validation dataset.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory for checkpoint.tacn and metrics.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint: top-1 accuracy plus optional per-class CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-class accuracy CSV destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Static parameter / GFLOPs accounting for a configuration.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        persons: usize,
        #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
        format: OutputFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mix a dataset and write the augmented copy.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MixFlavor::Skeleton)]
        mix: MixFlavor,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Config supplying the body partition for non-default joint counts.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Randomized graph-convolution equivalence check; exit 1 on failure.
    EquivCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Coordinate-scaling sensitivity harness; emits trial CSV.
    CoordScale {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 18)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class mean attention gates of a checkpoint, as CSV.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert between dataset formats (.skeleton / .skb1 / .jsonl), or
    /// generate a synthetic dataset from a `synth:` source.
    Convert {
        /// Input: .skb1 / .jsonl file, a .skeleton file or directory, or
        /// `synth:classes=4,per_class=16,frames=16,joints=5,seed=0`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output frames for raw .skeleton ingestion.
        #[arg(long, default_value_t = 64)]
        frames: usize,
        /// Maximum persons kept per sample.
        #[arg(long, default_value_t = 2)]
        persons: usize,
        /// Class count for labels derived from .skeleton file names.
        #[arg(long, default_value_t = 60)]
        classes: usize,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Numeric(_) => 1,
        _ => 3,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => Ok(fs::write(path, content)?),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

/// Derives (id, class) from an NTU-style file name: the trailing
/// `A###` group is the 1-indexed class.
fn class_from_name(stem: &str, classes: usize) -> Result<usize> {
    let pos = stem
        .rfind(['A', 'a'])
        .ok_or_else(|| Error::format(format!("no action tag in file name '{stem}'")))?;
    let digits: String = stem[pos + 1..].chars().take_while(|c| c.is_ascii_digit()).collect();
    let n: usize = digits
        .parse()
        .map_err(|_| Error::format(format!("no class number after action tag in '{stem}'")))?;
    if n == 0 || n > classes {
        return Err(Error::format(format!(
            "class {n} out of range 1..={classes} in '{stem}'"
        )));
    }
    Ok(n - 1)
}

fn ingest_skeleton_file(
    path: &Path,
    frames: usize,
    persons: usize,
    classes: usize,
) -> Result<SkeletonSample> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::format(format!("bad file name {path:?}")))?;
    let class = class_from_name(stem, classes)?;
    let reader = std::io::BufReader::new(fs::File::open(path)?);
    let clip = data::parse_ntu_skeleton(reader)?;
    let opts = data::PreprocessOptions { frames, max_persons: persons, center_joint: 0 };
    data::preprocess(&clip, &opts, stem.to_string(), SkeletonSample::one_hot(classes, class)?)
}

fn ingest_skeletons(
    root: &Path,
    frames: usize,
    persons: usize,
    classes: usize,
) -> Result<Vec<SkeletonSample>> {
    let mut files: Vec<PathBuf> = if root.is_dir() {
        fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("skeleton"))
            .collect()
    } else {
        vec![root.to_path_buf()]
    };
    files.sort();
    if files.is_empty() {
        return Err(Error::input(format!("no .skeleton files under {root:?}")));
    }
    let threads = data::thread_budget().min(files.len());
    if threads <= 1 {
        return files.iter().map(|f| ingest_skeleton_file(f, frames, persons, classes)).collect();
    }
    // Chunked parallel parse; output order follows the sorted file list.
    let chunk = files.len().div_ceil(threads);
    let mut results: Vec<Result<Vec<SkeletonSample>>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for part in files.chunks(chunk) {
            handles.push(scope.spawn(move || {
                part.iter()
                    .map(|f| ingest_skeleton_file(f, frames, persons, classes))
                    .collect::<Result<Vec<_>>>()
            }));
        }
        for h in handles {
            results.push(h.join().expect("ingest worker panicked"));
        }
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config, data, val, out, seed } => {
            let cfg = load_config(&config)?;
            let mut train_cfg = cfg.train.clone();
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            let train_set = read_samples(&data)?;
            let val_set = val.as_deref().map(read_samples).transpose()?;
            let partition = cfg.effective_partition().ok();
            let mut model = TaCnn::<f32>::new(cfg.model.clone(), train_cfg.seed)?;
            fs::create_dir_all(&out)?;
            let result = train_loop(
                &mut model,
                &train_set,
                val_set.as_deref(),
                &train_cfg,
                &cfg.mix,
                partition.as_ref(),
            );
            // Persist whatever state we have (last finite state on divergence).
            model.save(&out.join("checkpoint.tacn"))?;
            match result {
                Ok(outcome) => {
                    fs::write(out.join("metrics.jsonl"), metrics_jsonl(&outcome.metrics)?)?;
                    let last = outcome.metrics.last();
                    println!(
                        "trained {} epochs{}; final train acc {:.4}",
                        outcome.metrics.len(),
                        if outcome.stopped_early { " (stopped early)" } else { "" },
                        last.map_or(0.0, |m| m.train_acc),
                    );
                    Ok(0)
                }
                Err(e) => Err(e),
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let model = TaCnn::<f32>::load(&checkpoint)?;
            let samples = read_samples(&data)?;
            let report = evaluate(&model, &samples)?;
            println!("top-1 accuracy: {:.4} ({} samples)", report.top1, samples.len());
            if out.is_some() {
                emit(&out, &report.per_class_csv())?;
            }
            Ok(0)
        }
        Command::Profile { config, persons, format, out } => {
            let cfg = load_config(&config)?;
            let report = profile(&cfg.model, persons)?;
            let rendered = render_report(
                &report,
                match format {
                    OutputFormat::Text => ReportFormat::Text,
                    OutputFormat::Csv => ReportFormat::Csv,
                },
            );
            emit(&out, &rendered)?;
            Ok(0)
        }
        Command::Augment { data, out, mix, lambda, alpha, seed, config } => {
            let cfg = load_config(&config)?;
            let samples = read_samples(&data)?;
            let mut policy = MixPolicy {
                kind: match mix {
                    MixFlavor::Skeleton => MixKind::Skeleton,
                    MixFlavor::Mixup => MixKind::Mixup,
                },
                ..cfg.mix.clone()
            };
            if let Some(l) = lambda {
                policy.lambda = l;
            }
            if let Some(a) = alpha {
                policy.alpha = a;
            }
            if let Some(s) = seed {
                policy.seed = s;
            }
            let joints = samples.first().map_or(cfg.model.joints, |s| s.joints());
            let partition = match &cfg.partition {
                Some(p) => p.clone(),
                None => tacnn::augment::BodyPartition::default_for_joints(joints).ok_or_else(
                    || {
                        Error::config(format!(
                            "no default body partition for {joints} joints; set one in the config"
                        ))
                    },
                )?,
            };
            let (mixed, count) = apply_batch_mix(&samples, &policy, &partition)?;
            write_samples(&out, &mixed)?;
            println!("mixed {count} of {} samples -> {}", samples.len(), out.display());
            Ok(0)
        }
        Command::EquivCheck { trials, seed } => {
            let single = equiv_report::<f32>(trials, 1e-5, seed)?;
            let double = equiv_report::<f64>(trials, 1e-12, seed)?;
            println!(
                "single precision: {} trials, max abs err {:.3e} (threshold {:.0e}), {} passed",
                single.trials, single.max_abs_err, single.threshold, single.passed
            );
            println!(
                "double precision: {} trials, max abs err {:.3e} (threshold {:.0e}), {} passed",
                double.trials, double.max_abs_err, double.threshold, double.passed
            );
            if single.all_passed() && double.all_passed() {
                println!("equivalence holds");
                Ok(0)
            } else {
                println!("equivalence FAILED");
                Ok(1)
            }
        }
        Command::CoordScale { checkpoint, data, trials, seed, out } => {
            let model = TaCnn::<f32>::load(&checkpoint)?;
            let samples = read_samples(&data)?;
            let rows = coord_scale_experiment(&model, &samples, trials, seed)?;
            emit(&out, &coord_scale_csv(&rows))?;
            Ok(0)
        }
        Command::ExportAttention { checkpoint, data, out } => {
            let model = TaCnn::<f32>::load(&checkpoint)?;
            let samples = read_samples(&data)?;
            let rows = export_attention(&model, &samples)?;
            emit(&out, &attention_csv(&rows))?;
            Ok(0)
        }
        Command::Convert { data, out, frames, persons, classes } => {
            let is_skeleton = data.is_dir()
                || data.extension().and_then(|e| e.to_str()) == Some("skeleton");
            let samples = if is_skeleton {
                ingest_skeletons(&data, frames, persons, classes)?
            } else {
                read_samples(&data)?
            };
            write_samples(&out, &samples)?;
            println!("wrote {} samples -> {}", samples.len(), out.display());
            Ok(0)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Explicit --help/--version succeed; everything else (including
            // a bare invocation) is a usage error.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
