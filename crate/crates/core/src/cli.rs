//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{load_dataset, load_image, standardize, Dataset};
use crate::probe::{self, Family, MatchFeatures, ProbeConfig, ProbeReport};
use crate::raster::FloatImage;
use crate::trainer::{self, load_checkpoint, GradcheckOptions, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "gtsa", version, about = "Geometry-sensitive teacher/student pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct DataSource {
    /// Directory of PNG/PPM images.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use N generated scenes instead of a directory.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a student/teacher pair.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        source: DataSource,
        /// Output directory for checkpoints and metrics.csv.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// First seed of the synthetic scenes.
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    /// Output-variance sensitivity of a checkpoint's encoder.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        source: DataSource,
        /// color_jitter, four_fold_rotation, crop_multicrop, or all.
        #[arg(long)]
        family: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_views: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Probe the teacher encoder instead of the student's.
        #[arg(long)]
        teacher: bool,
        /// Render every view as the untransformed image.
        #[arg(long)]
        disable_transforms: bool,
    },
    /// Export top-K patch matches between two views of one image.
    Match {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        k: usize,
        /// Writes <out>.txt and <out>.png.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = FeatureArg::Encoder)]
        features: FeatureArg,
        #[arg(long)]
        no_overlay: bool,
    },
    /// Finite-difference check of the loss gradient.
    Gradcheck {
        /// Overrides on top of the tiny gradcheck configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write synthetic scenes as PNG files.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeatureArg {
    Encoder,
    Heads,
}

fn init_runtime() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let threads = std::env::var("GTSA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

/// Parses `argv` (including the program name) and runs the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_runtime();
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn load_source(source: &DataSource, size: usize, data_seed: u64) -> Result<Dataset> {
    match (&source.data, source.synthetic) {
        (Some(dir), _) => Ok(load_dataset(dir, size)?),
        (None, Some(n)) => Ok(Dataset::synthetic(n, size, data_seed)?),
        (None, None) => unreachable!("clap requires one source"),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain {
            config,
            source,
            out,
            resume,
            data_seed,
        } => {
            let cfg = TrainConfig::load(&config)?;
            log::info!("resolved config:\n{}", cfg.to_text());
            log::info!("seed {} data_seed {}", cfg.seed, data_seed);
            let dataset = load_source(&source, cfg.image_size, data_seed)?;
            log::info!(
                "{} images, {} steps",
                dataset.len(),
                cfg.total_steps(dataset.len())
            );
            let run = trainer::run_pretrain(&cfg, &dataset, &out, resume.as_deref())?;
            log::info!(
                "wrote {} and {}",
                run.final_checkpoint.display(),
                run.metrics_path.display()
            );
        }
        Command::Probe {
            ckpt,
            source,
            family,
            out,
            n_views,
            seed,
            data_seed,
            teacher,
            disable_transforms,
        } => {
            let families: Vec<Family> = if family == "all" {
                Family::ALL.to_vec()
            } else {
                vec![family.parse()?]
            };
            let (state, cfg) = load_checkpoint(&ckpt)?;
            log::info!("resolved config:\n{}", cfg.to_text());
            log::info!("seed {seed} data_seed {data_seed}");
            let dataset = load_source(&source, cfg.image_size, data_seed)?;
            let images: Vec<FloatImage> = (0..dataset.len()).map(|i| dataset.float_image(i)).collect();
            let probe_cfg = ProbeConfig {
                n_views,
                disabled: disable_transforms,
                ..ProbeConfig::from_train(&cfg)
            };
            let encoder = if teacher { &state.teacher } else { &state.student };
            let mut report = ProbeReport::default();
            for f in families {
                let entry = probe::sensitivity(encoder, &images, f, &probe_cfg, seed)?;
                log::info!("{}: mean variance {:.6e}", f, entry.mean_variance);
                report.entries.push(entry);
            }
            write_file(&out, report.to_csv().as_bytes())?;
        }
        Command::Match {
            ckpt,
            image,
            k,
            out,
            seed,
            features,
            no_overlay,
        } => {
            let (state, cfg) = load_checkpoint(&ckpt)?;
            log::info!("resolved config:\n{}", cfg.to_text());
            log::info!("seed {seed}");
            let img = FloatImage::from_rgb8(&standardize(&load_image(&image)?, cfg.image_size)?);
            let features = match features {
                FeatureArg::Encoder => MatchFeatures::Encoder,
                FeatureArg::Heads => MatchFeatures::Heads,
            };
            let (export, views) = probe::export_matches(&state.student, Some(&state.teacher), &img, &cfg.augment(), features, k, seed)?;
            probe::write_match_export(&export, &views, &out, !no_overlay)?;
            log::info!("{} matches written to {}", export.records.len(), out.with_extension("txt").display());
        }
        Command::Gradcheck { config } => {
            let mut cfg = trainer::gradcheck_config();
            if let Some(path) = config {
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                for line in text.lines() {
                    let line = line.split('#').next().unwrap_or("").trim();
                    if let Some((k, v)) = line.split_once('=') {
                        cfg.set(k.trim(), v.trim())?;
                    } else if !line.is_empty() {
                        anyhow::bail!("{}: expected `key = value`, got {line:?}", path.display());
                    }
                }
            }
            log::info!("resolved config:\n{}", cfg.to_text());
            log::info!("seed {}", cfg.seed);
            let report = trainer::gradcheck(&cfg, GradcheckOptions::default())?;
            for g in &report.groups {
                println!("{:<36} {:>6}/{:<6} max_rel_error {:.3e}", g.name, g.checked, g.size, g.max_rel_error);
            }
            println!("max relative error {:.3e} (tolerance {:.0e})", report.max_error(), report.tolerance);
            if !report.passed() {
                anyhow::bail!("gradient check failed");
            }
        }
        Command::Synth { n, size, seed, out } => {
            log::info!("seed {seed}");
            let dataset = Dataset::synthetic(n, size, seed)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for item in &dataset.items {
                let path = out.join(format!("{}.png", item.name));
                item.image.save(&path).with_context(|| format!("writing {}", path.display()))?;
            }
            log::info!("wrote {n} images to {}", out.display());
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
