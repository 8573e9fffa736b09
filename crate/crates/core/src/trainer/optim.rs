use crate::error::{GtsaError, Result};
use crate::model::ModelParams;
use crate::numeric::{c, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to `min`
/// at `total`. Step `s` is 0-based; warmup step `s` uses `peak * (s+1) / warmup`.
pub fn lr_at(step: u64, total: u64, warmup: u64, peak: f64, min: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    if span <= 1 {
        return peak;
    }
    let t = ((step - warmup) as f64 / (span - 1) as f64).min(1.0);
    min + (peak - min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam moments with decoupled weight decay, shaped like the student.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(student: &ModelParams<T>) -> Self {
        Self {
            m: student.zeros_like(),
            v: student.zeros_like(),
        }
    }

    /// One update at 1-based iteration `t`. Weight decay applies to matrices only.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64, weight_decay: f64, t: u64) -> Result<()> {
        if t == 0 {
            return Err(GtsaError::InvalidArgument("AdamW iterations are 1-based".into()));
        }
        let bc1 = 1.0 - BETA1.powf(t as f64);
        let bc2 = 1.0 - BETA2.powf(t as f64);
        let (b1, b2) = (c::<T>(BETA1), c::<T>(BETA2));
        let (ob1, ob2) = (c::<T>(1.0 - BETA1), c::<T>(1.0 - BETA2));
        let (step_size, inv_bc2) = (c::<T>(lr / bc1), c::<T>(1.0 / bc2));
        let (eps, decay) = (c::<T>(ADAM_EPS), c::<T>(lr * weight_decay));

        let mut p = params.named_arrays_mut();
        let g = grads.named_arrays();
        let mut m = self.m.named_arrays_mut();
        let mut v = self.v.named_arrays_mut();
        if p.len() != g.len() || p.len() != m.len() || p.len() != v.len() {
            return Err(GtsaError::Shape("optimizer state does not match the parameters".into()));
        }
        for i in 0..p.len() {
            let (name, pa) = &mut p[i];
            if g[i].0 != *name || g[i].1.shape != pa.shape {
                return Err(GtsaError::Shape(format!("gradient for {name} is missing or misshaped")));
            }
            let decays = pa.is_matrix();
            let (ga, ma, va) = (&g[i].1.data, &mut m[i].1.data, &mut v[i].1.data);
            for j in 0..pa.data.len() {
                let gj = ga[j];
                ma[j] = b1 * ma[j] + ob1 * gj;
                va[j] = b2 * va[j] + ob2 * gj * gj;
                let mut w = pa.data[j];
                if decays {
                    w -= decay * w;
                }
                pa.data[j] = w - step_size * ma[j] / ((va[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm<T: Real>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = grads
        .named_arrays()
        .iter()
        .flat_map(|(_, a)| a.data.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = c::<T>(max_norm / norm);
        for (_, a) in grads.named_arrays_mut() {
            a.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
