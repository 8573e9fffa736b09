//! Overlap cosine loss, rotation cross-entropy, top-K patch correspondence
//! loss, and the multi-crop total, each with its analytic gradient w.r.t. the
//! student side. Teacher inputs are constants.

use crate::error::{GtsaError, Result};
use crate::geometry::{roi_align, roi_align_backward, rotate_map, FeatureMap, OverlapRegion};
use crate::model::{RotationLogits, ROTATION_CLASSES};
use crate::numeric::{c, Real};

/// Added to each norm in cosine denominators.
pub const COS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Patch-correspondence weight.
    pub alpha: f64,
    /// Rotation-prediction weight.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5 }
    }
}

fn norm<T: Real>(a: &[T]) -> T {
    a.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// `a·b / ((|a|+ε)(|b|+ε))`; zero vectors give 0.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let eps = c::<T>(COS_EPS);
    dot / ((norm(a) + eps) * (norm(b) + eps))
}

/// Adds `scale * d cos(a, b) / da` into `out`.
fn cosine_grad_into<T: Real>(a: &[T], b: &[T], scale: T, out: &mut [T]) {
    let eps = c::<T>(COS_EPS);
    let (na, nb) = (norm(a), norm(b));
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let den = (na + eps) * (nb + eps);
    let radial = if na > T::zero() {
        dot / (den * (na + eps) * na)
    } else {
        T::zero()
    };
    for ((o, &av), &bv) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (bv / den - radial * av);
    }
}

/// Feature vectors of one batch item as `cells x dim` rows.
fn cell_vectors<T: Real>(map: &FeatureMap<T>, b: usize) -> Vec<T> {
    map.tokens(b)
}

fn check_region(region: &OverlapRegion) -> Result<()> {
    if !region.valid {
        return Err(GtsaError::InvalidArgument("overlap region is not valid".into()));
    }
    Ok(())
}

/// Overlap loss and its gradient w.r.t. the student map.
pub fn overlap_loss_grad<T: Real>(
    z: &FeatureMap<T>,
    zt: &FeatureMap<T>,
    region: &OverlapRegion,
    pooled: usize,
) -> Result<(T, FeatureMap<T>)> {
    check_region(region)?;
    if z.batch != zt.batch || z.dim != zt.dim {
        return Err(GtsaError::Shape(format!(
            "student {}x{} vs teacher {}x{}",
            z.batch, z.dim, zt.batch, zt.dim
        )));
    }
    let ps = roi_align(z, &region.student_rect, pooled, pooled)?;
    let pt = rotate_map(&roi_align(zt, &region.teacher_rect, pooled, pooled)?, region.rel_rot)?;
    if (ps.h, ps.w) != (pt.h, pt.w) {
        return Err(GtsaError::Shape("pooled maps differ after rotation".into()));
    }
    let cells = ps.cells();
    let scale = -T::one() / c::<T>((z.batch * cells) as f64);
    let mut loss = T::zero();
    let mut dps = FeatureMap::zeros(ps.batch, ps.dim, ps.h, ps.w);
    let d = ps.dim;
    for b in 0..ps.batch {
        let (sv, tv) = (cell_vectors(&ps, b), cell_vectors(&pt, b));
        let mut grad_rows = vec![T::zero(); cells * d];
        for t in 0..cells {
            let (a, bb) = (&sv[t * d..(t + 1) * d], &tv[t * d..(t + 1) * d]);
            loss += scale * cosine(a, bb);
            cosine_grad_into(a, bb, scale, &mut grad_rows[t * d..(t + 1) * d]);
        }
        for t in 0..cells {
            for k in 0..d {
                let idx = dps.idx(b, k, t / ps.w, t % ps.w);
                dps.data[idx] = grad_rows[t * d + k];
            }
        }
    }
    let dz = roi_align_backward(&dps, &region.student_rect, z.h, z.w)?;
    Ok((loss, dz))
}

/// `-(1/(B·T)) Σ cos(Φ(z), R(Φ(z̃)))` over the pooled overlap grid.
pub fn overlap_loss<T: Real>(z: &FeatureMap<T>, zt: &FeatureMap<T>, region: &OverlapRegion, pooled: usize) -> Result<T> {
    Ok(overlap_loss_grad(z, zt, region, pooled)?.0)
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn rotation_loss_grad<T: Real>(logits: &RotationLogits<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    if labels.len() != logits.batch {
        return Err(GtsaError::Shape(format!("{} labels for {} rows", labels.len(), logits.batch)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= ROTATION_CLASSES) {
        return Err(GtsaError::BadLabel(bad));
    }
    let inv_b = T::one() / c::<T>(logits.batch as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.data.len()];
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += (lse - row[label]) * inv_b;
        for j in 0..ROTATION_CLASSES {
            let p = (row[j] - lse).exp();
            let onehot = if j == label { T::one() } else { T::zero() };
            grad[i * ROTATION_CLASSES + j] = (p - onehot) * inv_b;
        }
    }
    Ok((loss, grad))
}

pub fn rotation_loss<T: Real>(logits: &RotationLogits<T>, labels: &[usize]) -> Result<T> {
    Ok(rotation_loss_grad(logits, labels)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub student: usize,
    pub teacher: usize,
    pub similarity: f64,
}

/// Retained student→teacher nearest-neighbour pairs for one batch item,
/// sorted by similarity (descending, ties by lower student index).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
    pub k: usize,
}

/// For each student cell, the most cosine-similar teacher cell (ties → lower
/// index); keeps the `k` best pairs, clamped to the student cell count.
pub fn match_topk<T: Real>(z: &FeatureMap<T>, zt: &FeatureMap<T>, k: usize) -> Result<Vec<MatchSet>> {
    if z.batch != zt.batch || z.dim != zt.dim {
        return Err(GtsaError::Shape("student and teacher maps differ in batch or dim".into()));
    }
    if k == 0 {
        return Err(GtsaError::InvalidArgument("K must be at least 1".into()));
    }
    let d = z.dim;
    let (ps, pt) = (z.cells(), zt.cells());
    let k_eff = k.min(ps);
    let mut out = Vec::with_capacity(z.batch);
    for b in 0..z.batch {
        let (sv, tv) = (cell_vectors(z, b), cell_vectors(zt, b));
        let mut pairs: Vec<MatchPair> = (0..ps)
            .map(|p| {
                let a = &sv[p * d..(p + 1) * d];
                let mut best = (0, cosine(a, &tv[..d]));
                for q in 1..pt {
                    let s = cosine(a, &tv[q * d..(q + 1) * d]);
                    if s > best.1 {
                        best = (q, s);
                    }
                }
                MatchPair {
                    student: p,
                    teacher: best.0,
                    similarity: best.1.as_f64(),
                }
            })
            .collect();
        // stable sort keeps lower student indices first among equal similarities
        pairs.sort_by(|x, y| y.similarity.partial_cmp(&x.similarity).unwrap_or(std::cmp::Ordering::Equal));
        pairs.truncate(k_eff);
        out.push(MatchSet { pairs, k: k_eff });
    }
    Ok(out)
}

/// Patch-correspondence loss over given matches, with gradient w.r.t. `z`
/// (matches are constants).
pub fn patch_corr_loss_with_matches<T: Real>(
    z: &FeatureMap<T>,
    zt: &FeatureMap<T>,
    matches: &[MatchSet],
) -> Result<(T, FeatureMap<T>)> {
    if matches.len() != z.batch {
        return Err(GtsaError::Shape("one match set per batch item required".into()));
    }
    let d = z.dim;
    let total: usize = matches.iter().map(|m| m.pairs.len()).sum();
    let mut dz = FeatureMap::zeros(z.batch, z.dim, z.h, z.w);
    if total == 0 {
        return Ok((T::zero(), dz));
    }
    let k_eff = matches[0].pairs.len();
    let scale = -T::one() / c::<T>((z.batch * k_eff) as f64);
    let mut loss = T::zero();
    for (b, set) in matches.iter().enumerate() {
        let (sv, tv) = (cell_vectors(z, b), cell_vectors(zt, b));
        for pair in &set.pairs {
            let a = &sv[pair.student * d..(pair.student + 1) * d];
            let t = &tv[pair.teacher * d..(pair.teacher + 1) * d];
            loss += scale * cosine(a, t);
            let mut g = vec![T::zero(); d];
            cosine_grad_into(a, t, scale, &mut g);
            let (r, cc) = (pair.student / z.w, pair.student % z.w);
            for (kk, gv) in g.into_iter().enumerate() {
                let idx = dz.idx(b, kk, r, cc);
                dz.data[idx] += gv;
            }
        }
    }
    Ok((loss, dz))
}

/// `-(1/(B·K)) Σ cos(z_p, z̃_p̃)` over the top-K matches.
pub fn patch_corr_loss<T: Real>(z: &FeatureMap<T>, zt: &FeatureMap<T>, k: usize) -> Result<T> {
    let matches = match_topk(z, zt, k)?;
    Ok(patch_corr_loss_with_matches(z, zt, &matches)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub top_k: usize,
    /// Side of the square pooled overlap grid.
    pub pooled: usize,
    pub use_pc: bool,
    pub use_rp: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            top_k: 16,
            pooled: 4,
            use_pc: true,
            use_rp: true,
        }
    }
}

/// Network outputs for one multi-crop sample.
pub struct ViewOutputs<'a, T> {
    /// Predictor outputs for all `G + L` views, globals first.
    pub student: &'a [FeatureMap<T>],
    /// Teacher projector outputs for the `G` unrotated globals.
    pub teacher: &'a [FeatureMap<T>],
    /// `regions[g][l]`: overlap of student view `l` with teacher view `g`.
    pub regions: &'a [Vec<OverlapRegion>],
    pub logits: &'a RotationLogits<T>,
    pub labels: &'a [usize],
}

/// Raw (unweighted) terms plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub overlap: f64,
    pub patch_corr: f64,
    pub rotation: f64,
}

/// `matches[g][l]`, empty for the skipped diagonal.
pub type PairMatches = Vec<Vec<Vec<MatchSet>>>;

pub struct LossOutput<T> {
    pub breakdown: LossBreakdown,
    pub total: T,
    pub dz: Vec<FeatureMap<T>>,
    pub dlogits: Vec<T>,
    pub matches: PairMatches,
}

/// Multi-crop total: mean overlap loss and mean patch-correspondence loss over
/// all `(g, l)` pairs with `l != g`, plus mean rotation loss over all views.
/// Pass `frozen` to reuse previously selected matches.
pub fn total_loss<T: Real>(out: &ViewOutputs<'_, T>, cfg: &LossConfig, frozen: Option<&PairMatches>) -> Result<LossOutput<T>> {
    let g_count = out.teacher.len();
    let views = out.student.len();
    if g_count == 0 || views <= g_count.saturating_sub(1) || views < g_count {
        return Err(GtsaError::InvalidArgument(format!("{g_count} teacher views for {views} student views")));
    }
    if out.regions.len() != g_count || out.regions.iter().any(|r| r.len() != views) {
        return Err(GtsaError::InvalidArgument("regions must be indexed [global][view]".into()));
    }
    let pairs = g_count * views - g_count;
    if pairs == 0 {
        return Err(GtsaError::InvalidArgument("no (global, view) pairs".into()));
    }
    let inv_pairs = T::one() / c::<T>(pairs as f64);
    let alpha = if cfg.use_pc { c::<T>(cfg.weights.alpha) } else { T::zero() };
    let beta = if cfg.use_rp { c::<T>(cfg.weights.beta) } else { T::zero() };

    let mut dz: Vec<FeatureMap<T>> = out
        .student
        .iter()
        .map(|m| FeatureMap::zeros(m.batch, m.dim, m.h, m.w))
        .collect();
    let mut overlap = T::zero();
    let mut pc = T::zero();
    let mut matches: PairMatches = vec![vec![Vec::new(); views]; g_count];
    for g in 0..g_count {
        for l in 0..views {
            if l == g {
                continue;
            }
            let region = &out.regions[g][l];
            if !region.valid {
                return Err(GtsaError::InvalidArgument(format!("missing overlap for pair (g={g}, l={l})")));
            }
            let (lo, dlo) = overlap_loss_grad(&out.student[l], &out.teacher[g], region, cfg.pooled)?;
            overlap += lo;
            for (acc, v) in dz[l].data.iter_mut().zip(&dlo.data) {
                *acc += *v * inv_pairs;
            }
            let set = match frozen {
                Some(f) => f[g][l].clone(),
                None => match_topk(&out.student[l], &out.teacher[g], cfg.top_k)?,
            };
            let (lp, dlp) = patch_corr_loss_with_matches(&out.student[l], &out.teacher[g], &set)?;
            pc += lp;
            if alpha != T::zero() {
                for (acc, v) in dz[l].data.iter_mut().zip(&dlp.data) {
                    *acc += *v * alpha * inv_pairs;
                }
            }
            matches[g][l] = set;
        }
    }
    overlap *= inv_pairs;
    pc *= inv_pairs;
    let (rp, drp) = rotation_loss_grad(out.logits, out.labels)?;
    let dlogits = drp.into_iter().map(|v| v * beta).collect();
    let total = overlap + alpha * pc + beta * rp;
    Ok(LossOutput {
        breakdown: LossBreakdown {
            total: total.as_f64(),
            overlap: overlap.as_f64(),
            patch_corr: pc.as_f64(),
            rotation: rp.as_f64(),
        },
        total,
        dz,
        dlogits,
        matches,
    })
}
