//! Central finite differences against the analytic student gradient of the
//! full multi-crop loss, in f64.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};

use super::config::TrainConfig;
use super::step::sample_loss;
use crate::augment::sample_view_set;
use crate::data::synth_image;
use crate::error::Result;
use crate::model::{init_model, ModelParams};
use crate::raster::FloatImage;
use crate::seed;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between `analytic` and central differences of `f`
/// at the given coordinates of `x`.
pub fn check_gradient(x: &mut [f64], analytic: &[f64], indices: &[usize], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(x);
        x[i] = orig - h;
        let minus = f(x);
        x[i] = orig;
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * h)));
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    /// Student array name.
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Coordinates checked per array; arrays at or below this size are checked fully.
    pub max_per_array: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_per_array: usize::MAX,
        }
    }
}

/// Tiny configuration: D=8, depth 1, two global and two local views, 4x4
/// global and 2x2 local feature maps.
pub fn gradcheck_config() -> TrainConfig {
    TrainConfig {
        dim: 8,
        depth: 1,
        heads: 2,
        patch: 8,
        n_global: 2,
        n_local: 2,
        global_size: 32,
        local_size: 16,
        image_size: 64,
        top_k: 4,
        pooled_size: 2,
        ..TrainConfig::default()
    }
}

/// Moves parameters off the symmetric initial point (zero biases, unit gains,
/// tiny weights) so that every gradient entry is comfortably above the
/// finite-difference noise floor.
fn perturb(params: &mut ModelParams<f64>, seed: u64) {
    let mut rng = seed::rng(seed);
    for (name, a) in params.named_arrays_mut() {
        let is_weight = a.is_matrix() && name.ends_with(".w");
        for v in &mut a.data {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = if is_weight { *v * 10.0 } else { *v + 0.2 * z };
        }
    }
}

/// Checks every student array of the total loss for one random view set.
/// Teacher arrays never receive gradients and are not part of the report.
pub fn gradcheck(cfg: &TrainConfig, opts: GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    let (mut student, teacher) = init_model::<f64>(&cfg.model(), cfg.seed)?;
    perturb(&mut student, seed::derive(&[cfg.seed, 1]));
    let mut teacher = teacher;
    perturb(&mut teacher, seed::derive(&[cfg.seed, 2]));

    let img = FloatImage::from_rgb8(&synth_image(cfg.seed, cfg.image_size)?);
    let views = sample_view_set(&img, &cfg.augment(), seed::derive(&[cfg.seed, 3]))?;
    let loss_cfg = cfg.loss();
    let base = sample_loss(&student, &teacher, &views, &loss_cfg, None, true)?;
    let grad = base.grad.expect("gradient requested");
    let matches = base.matches;

    let names: Vec<String> = student.named_arrays().into_iter().map(|(n, _)| n).collect();
    let mut rng = seed::rng(seed::derive(&[cfg.seed, 4]));
    let mut groups = Vec::with_capacity(names.len());
    for (ai, name) in names.iter().enumerate() {
        let analytic = grad.named_arrays()[ai].1.data.clone();
        let size = analytic.len();
        let indices: Vec<usize> = if size <= opts.max_per_array {
            (0..size).collect()
        } else {
            let mut idx = sample(&mut rng, size, opts.max_per_array).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut values = student.named_arrays()[ai].1.data.clone();
        let mut probe = student.clone();
        let mut failure = None;
        let worst = check_gradient(&mut values, &analytic, &indices, opts.step, |x| {
            probe.named_arrays_mut()[ai].1.data.copy_from_slice(x);
            match sample_loss(&probe, &teacher, &views, &loss_cfg, Some(&matches), false) {
                Ok(s) => s.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        groups.push(GroupError {
            name: name.clone(),
            max_rel_error: worst,
            checked: indices.len(),
            size,
        });
        // restore for the next array
        student.named_arrays_mut()[ai].1.data.copy_from_slice(&values);
    }
    Ok(GradcheckReport {
        groups,
        tolerance: GRADCHECK_TOLERANCE,
    })
}
