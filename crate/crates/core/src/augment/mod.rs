//! Multi-crop view generation. Every view is produced by
//! crop → resize → photometric → rotate, and its full provenance is kept in
//! [`ViewParams`] so that overlap geometry can be recomputed exactly.

mod photometric;
mod resample;

use rand::Rng;

pub use photometric::{apply_photometric, gaussian_blur, JitterFactors, PhotometricConfig, PhotometricParams};
pub use resample::{crop_resize, rotate_image};

use crate::error::{GtsaError, Result};
use crate::geometry::{intersect, Rect, RotIndex};
use crate::raster::FloatImage;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewKind {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewParams {
    pub kind: ViewKind,
    /// Crop in unrotated source pixel coordinates.
    pub crop: Rect,
    /// Side of the square output in pixels.
    pub out_size: usize,
    pub rot_k: RotIndex,
    pub photo: PhotometricParams,
    pub seed: u64,
}

impl ViewParams {
    /// Seed consumed by [`apply_photometric`] for this view.
    pub fn photometric_seed(&self) -> u64 {
        seed::derive(&[self.seed, 0x5048_4f54])
    }

    /// Same view with rotation removed.
    pub fn unrotated(&self) -> ViewParams {
        ViewParams {
            rot_k: RotIndex::IDENTITY,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    /// Student input (rotated by `params.rot_k`).
    pub image: FloatImage,
    pub params: ViewParams,
}

impl View {
    /// Teacher input: the same view before rotation.
    pub fn unrotated_image(&self) -> FloatImage {
        rotate_image(&self.image, self.params.rot_k.inverse()).expect("views are square")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    /// Globals first, then locals.
    pub views: Vec<View>,
    pub n_global: usize,
    pub n_local: usize,
}

impl ViewSet {
    pub fn globals(&self) -> &[View] {
        &self.views[..self.n_global]
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub global_size: usize,
    pub local_size: usize,
    /// Crop area as a fraction of the source area.
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    /// Minimum share of a local crop's area that must fall inside each global crop.
    pub min_local_overlap: f64,
    pub local_tries: usize,
    /// Draw a quarter-turn for each view; `false` pins every view to k=0.
    pub rotate: bool,
    pub photo: PhotometricConfig,
    pub min_image_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_global: 2,
            n_local: 4,
            global_size: 64,
            local_size: 32,
            global_scale: (0.5, 1.0),
            local_scale: (0.05, 0.4),
            min_local_overlap: 0.25,
            local_tries: 20,
            rotate: true,
            photo: PhotometricConfig::default(),
            min_image_size: 32,
        }
    }
}

/// Random-resized-crop style rectangle with the given area fraction.
fn sample_crop<R: Rng>(rng: &mut R, w: f64, h: f64, scale: (f64, f64)) -> Rect {
    let frac = scale.0 + rng.random::<f64>() * (scale.1 - scale.0);
    let area = frac * w * h;
    let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let mut size = None;
    for _ in 0..10 {
        let ratio = (lo + rng.random::<f64>() * (hi - lo)).exp();
        let cw = (area * ratio).sqrt();
        let ch = (area / ratio).sqrt();
        if cw <= w && ch <= h {
            size = Some((cw, ch));
            break;
        }
    }
    let (cw, ch) = size.unwrap_or_else(|| {
        let cw = area.sqrt().min(w);
        (cw, (area / cw).min(h))
    });
    let x0 = rng.random::<f64>() * (w - cw);
    let y0 = rng.random::<f64>() * (h - ch);
    Rect::new(x0, y0, x0 + cw, y0 + ch)
}

fn common_intersection(rects: &[Rect]) -> Option<Rect> {
    let mut acc = *rects.first()?;
    for r in &rects[1..] {
        acc = intersect(&acc, r)?;
    }
    Some(acc)
}

fn local_ok(local: &Rect, globals: &[Rect], min_overlap: f64) -> bool {
    globals.iter().all(|g| {
        intersect(local, g).is_some_and(|i| i.area() >= min_overlap * local.area())
    })
}

fn render_view(img: &FloatImage, params: ViewParams) -> Result<View> {
    let resized = crop_resize(img, &params.crop, params.out_size)?;
    let photo = apply_photometric(&resized, &params.photo, params.photometric_seed());
    let image = rotate_image(&photo, params.rot_k)?;
    Ok(View { image, params })
}

/// Draws the full multi-crop view set for one image. The result is a pure
/// function of `(img, cfg, seed)`; view `v` uses the stream `derive(seed, v)`.
pub fn sample_view_set(img: &FloatImage, cfg: &AugmentConfig, seed: u64) -> Result<ViewSet> {
    if img.w.min(img.h) < cfg.min_image_size {
        return Err(GtsaError::ImageTooSmall {
            w: img.w,
            h: img.h,
            min: cfg.min_image_size,
        });
    }
    if cfg.n_global == 0 {
        return Err(GtsaError::InvalidArgument("at least one global view is required".into()));
    }
    let (w, h) = (img.w as f64, img.h as f64);

    // Global crops with area fraction >= 0.5 always intersect pairwise, and
    // pairwise-intersecting boxes share a common box; the retry loop only
    // guards the measure-zero touching case.
    let mut attempt = 0u64;
    let globals: Vec<Rect> = loop {
        let rects: Vec<Rect> = (0..cfg.n_global)
            .map(|v| sample_crop(&mut seed::rng(seed::derive(&[seed, v as u64, attempt])), w, h, cfg.global_scale))
            .collect();
        if common_intersection(&rects).is_some() {
            break rects;
        }
        attempt += 1;
        if attempt > 1000 {
            return Err(GtsaError::InvalidArgument("global crops never overlap; check global_scale".into()));
        }
    };
    let common = common_intersection(&globals).expect("checked above");

    let mut views = Vec::with_capacity(cfg.n_global + cfg.n_local);
    for v in 0..cfg.n_global + cfg.n_local {
        let view_seed = seed::derive(&[seed, v as u64]);
        let mut rng = seed::rng(seed::derive(&[view_seed, 1]));
        let global = v < cfg.n_global;
        let crop = if global {
            globals[v]
        } else {
            let mut found = None;
            for _ in 0..cfg.local_tries {
                let cand = sample_crop(&mut rng, w, h, cfg.local_scale);
                if local_ok(&cand, &globals, cfg.min_local_overlap) {
                    found = Some(cand);
                    break;
                }
            }
            found.unwrap_or_else(|| {
                // Fallback: place inside the common global intersection, shrinking to fit.
                let cand = sample_crop(&mut rng, w, h, cfg.local_scale);
                let cw = cand.width().min(common.width());
                let ch = cand.height().min(common.height());
                let x0 = common.x0 + rng.random::<f64>() * (common.width() - cw);
                let y0 = common.y0 + rng.random::<f64>() * (common.height() - ch);
                Rect::new(x0, y0, x0 + cw, y0 + ch)
            })
        };
        let rot_k = if cfg.rotate {
            RotIndex::wrapping(rng.random_range(0..4))
        } else {
            RotIndex::IDENTITY
        };
        let photo = cfg.photo.sample(global, &mut rng);
        let params = ViewParams {
            kind: if global { ViewKind::Global } else { ViewKind::Local },
            crop,
            out_size: if global { cfg.global_size } else { cfg.local_size },
            rot_k,
            photo,
            seed: view_seed,
        };
        views.push(render_view(img, params)?);
    }
    Ok(ViewSet {
        views,
        n_global: cfg.n_global,
        n_local: cfg.n_local,
    })
}

/// Renders a single view from explicit parameters.
pub fn render(img: &FloatImage, params: ViewParams) -> Result<View> {
    render_view(img, params)
}
