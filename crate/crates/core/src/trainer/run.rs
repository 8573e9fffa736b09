use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::TrainConfig;
use super::step::{train_step, StepMetrics, TrainState};
use crate::data::Dataset;
use crate::error::{GtsaError, Result};
use crate::raster::FloatImage;
use crate::seed;

pub const FINAL_CHECKPOINT: &str = "final.gtsa";
pub const METRICS_FILE: &str = "metrics.csv";

pub struct RunOutput {
    pub state: TrainState,
    /// Metrics of the steps executed by this call.
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

/// Image visiting order for one epoch.
pub fn epoch_order(run_seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(&[run_seed, epoch, 0x5348_5546])));
    order
}

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.gtsa")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GtsaError + '_ {
    move |e| GtsaError::io(format!("writing {}", path.display()), e)
}

/// Rows of an existing metrics file for steps before `keep_below`.
fn existing_rows(path: &Path, keep_below: u64) -> Vec<String> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < keep_below)
        })
        .map(str::to_string)
        .collect()
}

/// Trains from scratch, or from `resume`, until the configured step budget.
///
/// Writes `metrics.csv`, optional per-epoch checkpoints and `final.gtsa` into
/// `out_dir`. When resuming into a directory that already holds metrics, rows
/// for steps before the resume point are kept.
pub fn run_pretrain(cfg: &TrainConfig, dataset: &Dataset, out_dir: &Path, resume: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(GtsaError::InvalidArgument("dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| GtsaError::io(format!("creating {}", out_dir.display()), e))?;

    let mut state = match resume {
        Some(path) => {
            let (state, saved) = load_checkpoint(path)?;
            if saved != *cfg {
                return Err(GtsaError::Config(format!(
                    "checkpoint {} was written with a different config",
                    path.display()
                )));
            }
            state
        }
        None => TrainState::new(cfg)?,
    };

    let images: Vec<FloatImage> = (0..dataset.len()).map(|i| dataset.float_image(i)).collect();
    let n = images.len();
    let spe = cfg.steps_per_epoch(n);
    let total = cfg.total_steps(n);

    let metrics_path = out_dir.join(METRICS_FILE);
    let kept = existing_rows(&metrics_path, state.step);
    let file = std::fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    let mut writer = std::io::BufWriter::new(file);
    writeln!(writer, "{}", StepMetrics::CSV_HEADER).map_err(io_err(&metrics_path))?;
    for row in &kept {
        writeln!(writer, "{row}").map_err(io_err(&metrics_path))?;
    }

    let mut metrics = Vec::new();
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    while state.step < total {
        let epoch = state.step / spe;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, n);
            order_epoch = epoch;
        }
        let pos = (state.step % spe) as usize * cfg.batch_size;
        let batch: Vec<(&FloatImage, u64)> = order[pos..(pos + cfg.batch_size).min(n)]
            .iter()
            .map(|&i| (&images[i], seed::sample_seed(cfg.seed, epoch, i as u64)))
            .collect();
        let m = train_step(&mut state, &batch, cfg, total)?;
        writeln!(writer, "{}", m.csv_row()).map_err(io_err(&metrics_path))?;
        writer.flush().map_err(io_err(&metrics_path))?;
        log::info!(
            "step {} loss {:.5} (overlap {:.5} pc {:.5} rp {:.5}) m {:.6} lr {:.3e}",
            m.step,
            m.loss.total,
            m.loss.overlap,
            m.loss.patch_corr,
            m.loss.rotation,
            m.momentum,
            m.lr
        );
        metrics.push(m);

        if state.step % spe == 0 {
            state.epoch = state.step / spe;
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(&state, cfg, &out_dir.join(epoch_checkpoint_name(state.epoch)))?;
            }
        }
    }

    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&state, cfg, &final_checkpoint)?;
    Ok(RunOutput {
        state,
        metrics,
        final_checkpoint,
        metrics_path,
    })
}
