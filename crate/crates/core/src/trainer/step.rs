use rayon::prelude::*;

use super::config::TrainConfig;
use super::optim::{clip_grad_norm, lr_at, AdamW};
use crate::augment::{sample_view_set, ViewSet};
use crate::error::{GtsaError, Result};
use crate::geometry::{overlap_region, FeatureMap};
use crate::losses::{total_loss, LossBreakdown, LossConfig, PairMatches, ViewOutputs};
use crate::model::{ema_update, init_model, momentum_at, ModelParams};
use crate::numeric::{c, Real};
use crate::raster::FloatImage;

/// Everything that determines the rest of a run besides the config and data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelParams<f32>,
    pub teacher: ModelParams<f32>,
    pub optim: AdamW<f32>,
    /// Completed optimizer steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Momentum used by the most recent EMA update (`m0` before any step).
    pub momentum: f64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let (student, teacher) = init_model(&cfg.model(), cfg.seed)?;
        Ok(Self {
            optim: AdamW::new(&student),
            student,
            teacher,
            step: 0,
            epoch: 0,
            momentum: cfg.m0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// 0-based index of the step these numbers describe.
    pub step: u64,
    pub loss: LossBreakdown,
    pub momentum: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss_total,loss_overlap,loss_pc,loss_rp,momentum,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss.total, self.loss.overlap, self.loss.patch_corr, self.loss.rotation, self.momentum, self.lr
        )
    }
}

/// Loss of one multi-crop sample, optionally with the student gradient.
pub struct SampleLoss<T> {
    pub breakdown: LossBreakdown,
    pub total: T,
    pub matches: PairMatches,
    pub grad: Option<ModelParams<T>>,
}

/// Teacher forward on the unrotated globals, student forward on every
/// (rotated) view, then the multi-crop total loss. With `frozen`, patch
/// matches are reused instead of recomputed.
pub fn sample_loss<T: Real>(
    student: &ModelParams<T>,
    teacher: &ModelParams<T>,
    views: &ViewSet,
    loss_cfg: &LossConfig,
    frozen: Option<&PairMatches>,
    want_grad: bool,
) -> Result<SampleLoss<T>> {
    let patch = student.config.patch;
    let globals: Vec<FloatImage> = views.globals().iter().map(|v| v.unrotated_image()).collect();
    let teacher_refs: Vec<&FloatImage> = globals.iter().collect();
    let teacher_tokens = teacher.teacher_pass(&teacher_refs)?;
    let teacher_maps: Vec<FeatureMap<T>> = (0..globals.len()).map(|g| teacher_tokens.feature_map(g)).collect();

    let student_refs: Vec<&FloatImage> = views.views.iter().map(|v| &v.image).collect();
    let pass = student.student_pass(&student_refs)?;
    let student_maps: Vec<FeatureMap<T>> = (0..views.len()).map(|v| pass.predicted.feature_map(v)).collect();

    let regions = views
        .globals()
        .iter()
        .map(|g| {
            let tview = g.params.unrotated();
            views
                .views
                .iter()
                .map(|s| overlap_region(&s.params, &tview, patch, patch))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = views.views.iter().map(|v| v.params.rot_k.k() as usize).collect();

    let out = total_loss(
        &ViewOutputs {
            student: &student_maps,
            teacher: &teacher_maps,
            regions: &regions,
            logits: &pass.logits,
            labels: &labels,
        },
        loss_cfg,
        frozen,
    )?;

    let grad = if want_grad {
        let mut dz = pass.predicted.zeros_like();
        for (v, map) in out.dz.iter().enumerate() {
            dz.set_from_map(v, map);
        }
        let mut grad = student.zeros_like();
        student.student_backward(&pass, &dz, &out.dlogits, &mut grad);
        Some(grad)
    } else {
        None
    };
    Ok(SampleLoss {
        breakdown: out.breakdown,
        total: out.total,
        matches: out.matches,
        grad,
    })
}

fn check_finite(b: &LossBreakdown, step: u64) -> Result<()> {
    for (term, v) in [
        ("overlap", b.overlap),
        ("patch_corr", b.patch_corr),
        ("rotation", b.rotation),
        ("total", b.total),
    ] {
        if !v.is_finite() {
            return Err(GtsaError::NonFiniteLoss { term, step });
        }
    }
    Ok(())
}

/// One optimizer step over a batch of `(image, sample seed)` items.
///
/// Per-sample work runs in parallel; gradients and losses are reduced in batch
/// order so the result does not depend on the thread count.
pub fn train_step(state: &mut TrainState, batch: &[(&FloatImage, u64)], cfg: &TrainConfig, total_steps: u64) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(GtsaError::InvalidArgument("empty batch".into()));
    }
    let aug = cfg.augment();
    let loss_cfg = cfg.loss();
    let (student, teacher) = (&state.student, &state.teacher);
    let results: Vec<Result<SampleLoss<f32>>> = batch
        .par_iter()
        .map(|&(img, seed)| {
            let views = sample_view_set(img, &aug, seed)?;
            sample_loss(student, teacher, &views, &loss_cfg, None, true)
        })
        .collect();

    let inv = 1.0 / batch.len() as f64;
    let mut mean = LossBreakdown::default();
    let mut grad = state.student.zeros_like();
    for r in results {
        let s = r?;
        check_finite(&s.breakdown, state.step)?;
        mean.total += s.breakdown.total * inv;
        mean.overlap += s.breakdown.overlap * inv;
        mean.patch_corr += s.breakdown.patch_corr * inv;
        mean.rotation += s.breakdown.rotation * inv;
        let g = s.grad.expect("gradient requested");
        let scale = c::<f32>(inv);
        for ((_, acc), (_, gi)) in grad.named_arrays_mut().into_iter().zip(g.named_arrays()) {
            for (a, &v) in acc.data.iter_mut().zip(&gi.data) {
                *a += v * scale;
            }
        }
    }
    check_finite(&mean, state.step)?;
    clip_grad_norm(&mut grad, cfg.max_grad_norm);

    let step = state.step;
    let lr = lr_at(step, total_steps, cfg.warmup(total_steps), cfg.peak_lr(), cfg.min_lr);
    state.optim.step(&mut state.student, &grad, lr, cfg.weight_decay, step + 1)?;
    let m = momentum_at(step.min(total_steps), total_steps, cfg.m0)?;
    ema_update(&mut state.teacher, &state.student, m)?;
    state.step += 1;
    state.momentum = m;
    Ok(StepMetrics {
        step,
        loss: mean,
        momentum: m,
        lr,
    })
}
