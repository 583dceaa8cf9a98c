//! `rtfnet` command-line front end.
//!
//! Exit status: 0 on success (including `--help`), 1 on a usage error, 2 when
//! the command itself fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rtfnet::image::{read_image, write_atomic, write_image, ImageBuffer};
use rtfnet::metrics::{compare_report, psnr_u8, BaselineTable, MeasuredRow, IMAGES};
use rtfnet::model::{ArchConfig, ModelParams};
use rtfnet::noise::{add_salt_pepper, NoiseConfig};
use rtfnet::train::{denoise, fit, load_checkpoint, load_dir_paths, validation_seed, RunPaths, TrainConfig};
use rtfnet::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "rtfnet", version, about = "Salt-and-pepper denoising with RTF-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corrupt an image with salt-and-pepper noise.
    AddNoise(AddNoise),
    /// Train a model for one noise level.
    Train(Train),
    /// Restore a single noisy image.
    Denoise(Denoise),
    /// Corrupt and restore every image in a directory and report PSNR rows.
    Eval(Eval),
    /// Print the published PSNR table, optionally with measured rows.
    Compare(Compare),
}

#[derive(Args, Debug)]
struct AddNoise {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Corruption probability in [0, 1].
    #[arg(long)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct Train {
    /// Directory of clean training images (PGM/PPM).
    #[arg(long)]
    train_dir: PathBuf,
    /// Directory of clean validation images (PGM/PPM).
    #[arg(long)]
    val_dir: PathBuf,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training curves CSV written after every epoch.
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    level: f64,
    #[arg(long, default_value_t = 25)]
    epochs: u32,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    base_lr: f64,
    #[arg(long, default_value_t = 6)]
    step_size: u32,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 64)]
    patches_per_image: usize,
    #[arg(long, default_value_t = 64)]
    patch_size: usize,
    /// 1 for grayscale, 3 for RGB.
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct Denoise {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also write the intermediate image left by the noise suppression network.
    #[arg(long)]
    dump_nsn: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of clean images.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the rows here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Compare {
    /// Rows produced by `eval`; file stems matching a table image are merged.
    #[arg(long)]
    measured: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::AddNoise(a) => {
            let clean = read_image(&a.input)?;
            write_image(&add_salt_pepper(&clean, NoiseConfig::new(a.level, a.seed)?), &a.output)
        }
        Command::Train(t) => train(t),
        Command::Denoise(d) => {
            let mut params = load_checkpoint(&d.checkpoint)?.params;
            let (restored, transition) = denoise(&mut params, &read_image(&d.input)?)?;
            if let Some(path) = &d.dump_nsn {
                write_image(&transition, path)?;
            }
            write_image(&restored, &d.output)
        }
        Command::Eval(e) => {
            let params = load_checkpoint(&e.checkpoint)?.params;
            let rows = eval_rows(&params, &e.dir, e.level, e.seed)?;
            emit(&rows_to_csv(&rows)?, e.output.as_deref())
        }
        Command::Compare(c) => {
            let measured = match &c.measured {
                Some(path) => measured_rows(path)?,
                None => Vec::new(),
            };
            emit(&compare_report(&measured, &BaselineTable::published())?, c.output.as_deref())
        }
    }
}

fn train(t: Train) -> Result<()> {
    let config = TrainConfig {
        level: t.level,
        epochs: t.epochs,
        batch: t.batch,
        base_lr: t.base_lr,
        step_size: t.step_size,
        gamma: t.gamma,
        patches_per_image: t.patches_per_image,
        patch_size: t.patch_size,
        seed: t.seed,
        arch: ArchConfig {
            channels: t.channels,
            ..ArchConfig::default()
        },
    };
    let paths = RunPaths {
        train_dir: t.train_dir,
        val_dir: t.val_dir,
        checkpoint: Some(t.checkpoint),
        curves: t.curves,
        resume: t.resume,
    };
    let (_, records) = fit(&config, &paths)?;
    if let Some(last) = records.last() {
        log::info!("finished after epoch {}: val PSNR {:.2} dB", last.epoch, last.val_psnr);
    }
    Ok(())
}

/// PSNR of one evaluated image, before and after restoration.
#[derive(Clone, Debug, PartialEq)]
struct EvalRow {
    image: String,
    level: u32,
    noisy: f64,
    restored: f64,
}

fn threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("RTFNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(available, |n| n.min(available))
}

fn eval_one(params: &mut ModelParams<f32>, clean: &ImageBuffer, cfg: NoiseConfig) -> Result<(f64, f64)> {
    let noisy = add_salt_pepper(clean, cfg);
    let (restored, _) = denoise(params, &noisy)?;
    Ok((psnr_u8(&noisy, clean)?, psnr_u8(&restored, clean)?))
}

/// Images are visited in file-name order and image `i` gets the same noise
/// seed as validation image `i`, so rows do not depend on the thread count.
fn eval_rows(params: &ModelParams<f32>, dir: &Path, level: f64, seed: u64) -> Result<Vec<EvalRow>> {
    let files = load_dir_paths(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no PGM/PPM images in {}", dir.display())));
    }
    NoiseConfig::new(level, 0)?;
    let percent = (level * 100.0).round() as u32;
    let workers = threads().min(files.len());
    let mut results: Vec<Result<EvalRow>> = Vec::with_capacity(files.len());
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let files = &files;
                s.spawn(move || {
                    let mut params = params.clone();
                    let mut out = Vec::new();
                    for i in (w..files.len()).step_by(workers) {
                        let row = read_image(&files[i]).and_then(|clean| {
                            let (noisy, restored) =
                                eval_one(&mut params, &clean, NoiseConfig::new(level, validation_seed(seed, i))?)?;
                            Ok(EvalRow {
                                image: stem(&files[i]),
                                level: percent,
                                noisy,
                                restored,
                            })
                        });
                        out.push((i, row));
                    }
                    out
                })
            })
            .collect();
        let mut all: Vec<(usize, Result<EvalRow>)> =
            handles.into_iter().flat_map(|h| h.join().expect("eval worker panicked")).collect();
        all.sort_by_key(|(i, _)| *i);
        results.extend(all.into_iter().map(|(_, r)| r));
    });
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.image.cmp(&b.image));
    Ok(rows)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

const EVAL_HEADER: [&str; 4] = ["image", "level", "noisy_psnr", "restored_psnr"];

fn rows_to_csv(rows: &[EvalRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(EVAL_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.image.clone(),
            r.level.to_string(),
            format!("{:.4}", r.noisy),
            format!("{:.4}", r.restored),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Eval rows whose image name appears in the published table; others are
/// skipped with a warning.
fn measured_rows(path: &Path) -> Result<Vec<MeasuredRow>> {
    let bad = |m: String| Error::Config(format!("{}: {m}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().ne(EVAL_HEADER) {
        return Err(bad(format!("expected header {}", EVAL_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let image = &record[0];
        let level = record[1].parse::<u32>().map_err(|e| bad(e.to_string()))?;
        let psnr = record[3].parse::<f64>().map_err(|e| bad(e.to_string()))?;
        match IMAGES.iter().find(|k| k.eq_ignore_ascii_case(image)) {
            Some(name) => rows.push(MeasuredRow {
                image: name.to_string(),
                level,
                psnr,
            }),
            None => log::warn!("skipping `{image}`: not an image of the published table"),
        }
    }
    Ok(rows)
}

fn emit(text: &str, output: Option<&Path>) -> Result<()> {
    match output {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
