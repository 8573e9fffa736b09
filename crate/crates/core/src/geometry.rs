//! Coordinate bookkeeping between source images, augmented views and feature
//! maps, plus the two alignment operators used by the overlap loss: bilinear
//! region pooling ([`roi_align`]) and quarter-turn map rotation ([`rotate_map`]).
//!
//! Conventions shared by every module:
//! * pixel `(col, row)` covers `[col, col+1) x [row, row+1)` and its value sits
//!   at the center `(col + 0.5, row + 0.5)`;
//! * every rotation is counter-clockwise by `90 * k` degrees, mapping the point
//!   `(x, y)` of a square of side `S` to `(y, S - x)`.

use crate::augment::ViewParams;
use crate::error::{GtsaError, Result};
use crate::numeric::Real;

/// Axis-aligned rectangle `[x0, x1) x [y0, y1)` in continuous coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// Like [`Rect::new`] but rejects empty or non-finite rectangles.
    pub fn checked(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let r = Self::new(x0, y0, x1, y1);
        if r.is_valid() {
            Ok(r)
        } else {
            Err(GtsaError::EmptyRect(r.to_array()))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x1 > self.x0 && self.y1 > self.y0
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Rect {
        Rect::new(self.x0 * sx, self.y0 * sy, self.x1 * sx, self.y1 * sy)
    }

    /// Bounding box of a set of corner points.
    fn from_points(points: &[(f64, f64)]) -> Rect {
        let mut r = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            r.x0 = r.x0.min(x);
            r.y0 = r.y0.min(y);
            r.x1 = r.x1.max(x);
            r.y1 = r.y1.max(y);
        }
        r
    }
}

/// Counter-clockwise quarter-turn count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RotIndex(u8);

impl RotIndex {
    pub const IDENTITY: RotIndex = RotIndex(0);

    pub fn new(k: u8) -> Result<Self> {
        if k < 4 {
            Ok(RotIndex(k))
        } else {
            Err(GtsaError::InvalidArgument(format!("rotation index {k} outside 0..4")))
        }
    }

    /// Reduces any integer modulo 4.
    pub fn wrapping(k: i64) -> Self {
        RotIndex(k.rem_euclid(4) as u8)
    }

    pub fn k(self) -> u8 {
        self.0
    }

    pub fn inverse(self) -> Self {
        RotIndex((4 - self.0) % 4)
    }

    pub fn degrees(self) -> u32 {
        90 * self.0 as u32
    }
}

/// One CCW quarter turn of a point inside a square of side `size`.
#[inline]
pub fn rotate_point(x: f64, y: f64, size: f64, k: RotIndex) -> (f64, f64) {
    let (mut x, mut y) = (x, y);
    for _ in 0..k.k() {
        (x, y) = (y, size - x);
    }
    (x, y)
}

/// Dense activations laid out row-major as `(batch, dim, rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub batch: usize,
    pub dim: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(batch: usize, dim: usize, h: usize, w: usize) -> Self {
        Self {
            batch,
            dim,
            h,
            w,
            data: vec![T::zero(); batch * dim * h * w],
        }
    }

    pub fn from_vec(batch: usize, dim: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 || h * w == 0 {
            return Err(GtsaError::Shape(format!("empty feature map {batch}x{dim}x{h}x{w}")));
        }
        if data.len() != batch * dim * h * w {
            return Err(GtsaError::Shape(format!(
                "{} values for a {batch}x{dim}x{h}x{w} map",
                data.len()
            )));
        }
        Ok(Self { batch, dim, h, w, data })
    }

    #[inline]
    pub fn idx(&self, b: usize, d: usize, r: usize, c: usize) -> usize {
        ((b * self.dim + d) * self.h + r) * self.w + c
    }

    #[inline]
    pub fn get(&self, b: usize, d: usize, r: usize, c: usize) -> T {
        self.data[self.idx(b, d, r, c)]
    }

    /// Number of spatial cells.
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Feature vector at one spatial cell.
    pub fn vector(&self, b: usize, r: usize, c: usize) -> Vec<T> {
        (0..self.dim).map(|d| self.get(b, d, r, c)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Tokens for batch item `b` as an `(h*w) x dim` row-major matrix.
    pub fn tokens(&self, b: usize) -> Vec<T> {
        let n = self.cells();
        let mut out = vec![T::zero(); n * self.dim];
        let base = b * self.dim * n;
        for d in 0..self.dim {
            for p in 0..n {
                out[p * self.dim + d] = self.data[base + d * n + p];
            }
        }
        out
    }

    /// Inverse of [`FeatureMap::tokens`] for a single-item map.
    pub fn from_tokens(tokens: &[T], dim: usize, h: usize, w: usize) -> Result<Self> {
        let n = h * w;
        if tokens.len() != n * dim {
            return Err(GtsaError::Shape(format!(
                "{} token values for {h}x{w} cells of dim {dim}",
                tokens.len()
            )));
        }
        let mut data = vec![T::zero(); n * dim];
        for p in 0..n {
            for d in 0..dim {
                data[d * n + p] = tokens[p * dim + d];
            }
        }
        Self::from_vec(1, dim, h, w, data)
    }
}

/// Pooled-feature overlap between a student view and a teacher view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapRegion {
    /// Overlap in student feature cells, in the student's rotated frame.
    pub student_rect: Rect,
    /// Overlap in teacher feature cells.
    pub teacher_rect: Rect,
    /// Student rotation relative to the (unrotated) teacher.
    pub rel_rot: RotIndex,
    pub valid: bool,
}

impl OverlapRegion {
    pub fn invalid() -> Self {
        Self {
            student_rect: Rect::new(0.0, 0.0, 0.0, 0.0),
            teacher_rect: Rect::new(0.0, 0.0, 0.0, 0.0),
            rel_rot: RotIndex::IDENTITY,
            valid: false,
        }
    }
}

/// Positive-area intersection, or `None` when the interiors are disjoint.
pub fn intersect(a: &Rect, b: &Rect) -> Option<Rect> {
    let r = Rect::new(a.x0.max(b.x0), a.y0.max(b.y0), a.x1.min(b.x1), a.y1.min(b.y1));
    r.is_valid().then_some(r)
}

/// Maps a source-image rectangle into the pixel frame of an augmented view:
/// crop translation, per-axis resize, then the view's quarter turns.
pub fn source_to_view(r: &Rect, view: &ViewParams) -> Result<Rect> {
    if intersect(r, &view.crop).is_none() {
        return Err(GtsaError::NoIntersection {
            rect: r.to_array(),
            crop: view.crop.to_array(),
        });
    }
    let corners = [(r.x0, r.y0), (r.x1, r.y0), (r.x0, r.y1), (r.x1, r.y1)];
    let mapped: Vec<(f64, f64)> = corners
        .iter()
        .map(|&(x, y)| source_point_to_view(x, y, view))
        .collect();
    Ok(Rect::from_points(&mapped))
}

/// Source pixel coordinates → view pixel coordinates (after rotation).
pub fn source_point_to_view(x: f64, y: f64, view: &ViewParams) -> (f64, f64) {
    let s = view.out_size as f64;
    let vx = (x - view.crop.x0) * s / view.crop.width();
    let vy = (y - view.crop.y0) * s / view.crop.height();
    rotate_point(vx, vy, s, view.rot_k)
}

/// Inverse of [`source_point_to_view`].
pub fn view_point_to_source(x: f64, y: f64, view: &ViewParams) -> (f64, f64) {
    let s = view.out_size as f64;
    let (ux, uy) = rotate_point(x, y, s, view.rot_k.inverse());
    (
        view.crop.x0 + ux * view.crop.width() / s,
        view.crop.y0 + uy * view.crop.height() / s,
    )
}

/// View pixels → feature cells for a patch size of `patch` pixels per cell.
pub fn view_to_feature(r: &Rect, patch: f64) -> Result<Rect> {
    if !(patch > 0.0) || !patch.is_finite() {
        return Err(GtsaError::InvalidArgument(format!("patch size {patch} must be positive")));
    }
    Ok(r.scale(1.0 / patch, 1.0 / patch))
}

/// Interpolation taps along one axis: `(lo, hi, frac)` with value
/// `(1 - frac) * v[lo] + frac * v[hi]`.
#[inline]
fn taps(pos: f64, len: usize) -> (usize, usize, f64) {
    let u = (pos - 0.5).clamp(0.0, (len - 1) as f64);
    let lo = u.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, u - lo as f64)
}

/// Sample positions (one per output cell, at the cell center) along one axis.
fn axis_taps(start: f64, end: f64, out: usize, len: usize) -> Vec<(usize, usize, f64)> {
    let step = (end - start) / out as f64;
    (0..out)
        .map(|i| taps(start + (i as f64 + 0.5) * step, len))
        .collect()
}

/// Bilinear region pooling: splits `rect` (feature cells) into an
/// `out_h x out_w` grid and samples each cell once at its center.
/// Out-of-map samples clamp to the border.
pub fn roi_align<T: Real>(map: &FeatureMap<T>, rect: &Rect, out_h: usize, out_w: usize) -> Result<FeatureMap<T>> {
    if !rect.is_valid() {
        return Err(GtsaError::EmptyRect(rect.to_array()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(GtsaError::InvalidArgument("pooled size must be at least 1x1".into()));
    }
    let ys = axis_taps(rect.y0, rect.y1, out_h, map.h);
    let xs = axis_taps(rect.x0, rect.x1, out_w, map.w);
    let mut out = FeatureMap::zeros(map.batch, map.dim, out_h, out_w);
    let plane = map.h * map.w;
    let mut o = 0;
    for bd in 0..map.batch * map.dim {
        let src = &map.data[bd * plane..(bd + 1) * plane];
        for &(y0, y1, fy) in &ys {
            let fy = T::from_f64_lossy(fy);
            for &(x0, x1, fx) in &xs {
                let fx = T::from_f64_lossy(fx);
                let top = src[y0 * map.w + x0] * (T::one() - fx) + src[y0 * map.w + x1] * fx;
                let bot = src[y1 * map.w + x0] * (T::one() - fx) + src[y1 * map.w + x1] * fx;
                out.data[o] = top * (T::one() - fy) + bot * fy;
                o += 1;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`roi_align`]: scatters pooled gradients back onto an `h x w` map.
pub fn roi_align_backward<T: Real>(grad: &FeatureMap<T>, rect: &Rect, h: usize, w: usize) -> Result<FeatureMap<T>> {
    if !rect.is_valid() {
        return Err(GtsaError::EmptyRect(rect.to_array()));
    }
    let ys = axis_taps(rect.y0, rect.y1, grad.h, h);
    let xs = axis_taps(rect.x0, rect.x1, grad.w, w);
    let mut out = FeatureMap::zeros(grad.batch, grad.dim, h, w);
    let plane = h * w;
    let mut o = 0;
    for bd in 0..grad.batch * grad.dim {
        let dst = &mut out.data[bd * plane..(bd + 1) * plane];
        for &(y0, y1, fy) in &ys {
            let fy = T::from_f64_lossy(fy);
            for &(x0, x1, fx) in &xs {
                let fx = T::from_f64_lossy(fx);
                let g = grad.data[o];
                o += 1;
                let top = g * (T::one() - fy);
                let bot = g * fy;
                dst[y0 * w + x0] += top * (T::one() - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bot * (T::one() - fx);
                dst[y1 * w + x1] += bot * fx;
            }
        }
    }
    Ok(out)
}

/// Rotates each `h x w` plane by `k` CCW quarter turns; one turn moves the
/// element at `(r, c)` to `(w - 1 - c, r)`.
pub fn rotate_map<T: Real>(map: &FeatureMap<T>, k: RotIndex) -> Result<FeatureMap<T>> {
    let (h, w) = (map.h, map.w);
    if k.k() % 2 == 1 && h != w {
        return Err(GtsaError::NonSquareRotation { k: k.k(), h, w });
    }
    let (oh, ow) = if k.k() % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = FeatureMap::zeros(map.batch, map.dim, oh, ow);
    let plane = h * w;
    for bd in 0..map.batch * map.dim {
        let src = &map.data[bd * plane..(bd + 1) * plane];
        let dst = &mut out.data[bd * plane..(bd + 1) * plane];
        for r in 0..h {
            for c in 0..w {
                let (nr, nc) = match k.k() {
                    0 => (r, c),
                    1 => (w - 1 - c, r),
                    2 => (h - 1 - r, w - 1 - c),
                    _ => (c, h - 1 - r),
                };
                dst[nr * ow + nc] = src[r * w + c];
            }
        }
    }
    Ok(out)
}

/// Overlap of a student view and an unrotated teacher view, expressed in each
/// view's feature cells.
pub fn overlap_region(sview: &ViewParams, tview: &ViewParams, patch_s: usize, patch_t: usize) -> Result<OverlapRegion> {
    if tview.rot_k != RotIndex::IDENTITY {
        return Err(GtsaError::InvalidArgument("teacher views must be unrotated".into()));
    }
    let Some(common) = intersect(&sview.crop, &tview.crop) else {
        return Ok(OverlapRegion::invalid());
    };
    let student_rect = view_to_feature(&source_to_view(&common, sview)?, patch_s as f64)?;
    let teacher_rect = view_to_feature(&source_to_view(&common, tview)?, patch_t as f64)?;
    Ok(OverlapRegion {
        student_rect,
        teacher_rect,
        rel_rot: sview.rot_k,
        valid: true,
    })
}
