//! Output-variance sensitivity probe and matched-pair export.
//!
//! The sensitivity probe renders a set of views of each image that differ in
//! exactly one transform family, encodes them, and reports the mean
//! per-dimension variance of the globally pooled encoder output.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::Rng;
use rayon::prelude::*;

use crate::augment::{render, sample_view_set, AugmentConfig, PhotometricConfig, PhotometricParams, View, ViewKind, ViewParams};
use crate::error::{GtsaError, Result};
use crate::geometry::{view_point_to_source, FeatureMap, Rect, RotIndex};
use crate::losses::match_topk;
use crate::model::ModelParams;
use crate::raster::FloatImage;
use crate::seed;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    ColorJitter,
    FourFoldRotation,
    CropMulticrop,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::ColorJitter, Family::FourFoldRotation, Family::CropMulticrop];

    pub fn name(self) -> &'static str {
        match self {
            Family::ColorJitter => "color_jitter",
            Family::FourFoldRotation => "four_fold_rotation",
            Family::CropMulticrop => "crop_multicrop",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = GtsaError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| GtsaError::InvalidArgument(format!("unknown transform family {s:?} (expected color_jitter, four_fold_rotation or crop_multicrop)")))
    }
}

/// Anything that maps square views to one pooled feature vector each.
pub trait GapEncoder: Sync {
    fn gap(&self, views: &[&FloatImage]) -> Result<Vec<Vec<f64>>>;
}

impl GapEncoder for ModelParams<f32> {
    fn gap(&self, views: &[&FloatImage]) -> Result<Vec<Vec<f64>>> {
        let pooled = self.encode_views(views)?.gap();
        let d = self.config.dim;
        Ok(pooled.chunks(d).map(|c| c.iter().map(|&v| v as f64).collect()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    /// Views per image for the jitter and rotation families.
    pub n_views: usize,
    /// Output size of full-image views.
    pub view_size: usize,
    pub jitter_strength: f64,
    /// Crop family settings; photometric and rotation are switched off here.
    pub crops: AugmentConfig,
    /// Render every view as the identity view (full image, no transform).
    pub disabled: bool,
}

impl ProbeConfig {
    pub const CROP_GLOBALS: usize = 2;
    pub const CROP_LOCALS: usize = 8;

    /// Probe settings matching a training run's view sizes and crop scales.
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            n_views: 10,
            view_size: cfg.global_size,
            jitter_strength: cfg.jitter_strength,
            crops: AugmentConfig {
                n_global: Self::CROP_GLOBALS,
                n_local: Self::CROP_LOCALS,
                rotate: false,
                photo: PhotometricConfig::disabled(),
                ..cfg.augment()
            },
            disabled: false,
        }
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEntry {
    pub family: Family,
    pub mean_variance: f64,
    pub n_views: usize,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeReport {
    pub entries: Vec<ProbeEntry>,
}

impl ProbeReport {
    pub const CSV_HEADER: &'static str = "family,mean_variance,n_views,n_images";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.family, e.mean_variance, e.n_views, e.n_images));
        }
        out
    }

    pub fn get(&self, family: Family) -> Option<&ProbeEntry> {
        self.entries.iter().find(|e| e.family == family)
    }
}

fn full_view(img: &FloatImage, size: usize, rot_k: RotIndex, photo: PhotometricParams, seed: u64) -> Result<View> {
    render(
        img,
        ViewParams {
            kind: ViewKind::Global,
            crop: Rect::new(0.0, 0.0, img.w as f64, img.h as f64),
            out_size: size,
            rot_k,
            photo,
            seed,
        },
    )
}

/// The views the probe encodes for one image.
pub fn probe_views(img: &FloatImage, family: Family, cfg: &ProbeConfig, seed: u64) -> Result<Vec<View>> {
    let count = match family {
        Family::CropMulticrop => ProbeConfig::CROP_GLOBALS + ProbeConfig::CROP_LOCALS,
        _ => cfg.n_views,
    };
    if count < 2 {
        return Err(GtsaError::InvalidArgument("variance needs at least two views".into()));
    }
    if cfg.disabled {
        return (0..count)
            .map(|_| full_view(img, cfg.view_size, RotIndex::IDENTITY, PhotometricParams::identity(), seed))
            .collect();
    }
    match family {
        Family::ColorJitter => (0..count as u64)
            .map(|v| {
                let photo = PhotometricParams {
                    jitter_strength: cfg.jitter_strength,
                    ..PhotometricParams::identity()
                };
                full_view(img, cfg.view_size, RotIndex::IDENTITY, photo, seed::derive(&[seed, v]))
            })
            .collect(),
        Family::FourFoldRotation => (0..count as u64)
            .map(|v| {
                let view_seed = seed::derive(&[seed, v]);
                let k = RotIndex::wrapping(seed::rng(view_seed).random_range(0..4));
                full_view(img, cfg.view_size, k, PhotometricParams::identity(), view_seed)
            })
            .collect(),
        Family::CropMulticrop => {
            let crops = AugmentConfig {
                n_global: ProbeConfig::CROP_GLOBALS,
                n_local: ProbeConfig::CROP_LOCALS,
                rotate: false,
                photo: PhotometricConfig::disabled(),
                ..cfg.crops
            };
            Ok(sample_view_set(img, &crops, seed)?.views)
        }
    }
}

/// Per-dimension unbiased variance across `vectors`, averaged over dimensions.
///
/// Deviations are taken from the first vector, so identical inputs give
/// exactly zero.
pub fn view_variance(vectors: &[Vec<f64>]) -> Result<f64> {
    let n = vectors.len();
    if n < 2 {
        return Err(GtsaError::InvalidArgument("variance needs at least two vectors".into()));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(GtsaError::Shape("vectors must share a non-zero length".into()));
    }
    let mut total = 0.0;
    for j in 0..d {
        let (mut s, mut s2) = (0.0, 0.0);
        for v in vectors {
            let dev = v[j] - vectors[0][j];
            s += dev;
            s2 += dev * dev;
        }
        total += ((s2 - s * s / n as f64) / (n - 1) as f64).max(0.0);
    }
    Ok(total / d as f64)
}

/// Mean view variance over `images` for one family. Image `i` uses the seed
/// `derive(seed, i)`.
pub fn sensitivity(encoder: &dyn GapEncoder, images: &[FloatImage], family: Family, cfg: &ProbeConfig, seed: u64) -> Result<ProbeEntry> {
    if images.is_empty() {
        return Err(GtsaError::InvalidArgument("probe needs at least one image".into()));
    }
    let per_image: Vec<Result<(f64, usize)>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let views = probe_views(img, family, cfg, seed::derive(&[seed, i as u64]))?;
            let refs: Vec<&FloatImage> = views.iter().map(|v| &v.image).collect();
            Ok((view_variance(&encoder.gap(&refs)?)?, views.len()))
        })
        .collect();
    let mut sum = 0.0;
    let mut n_views = 0;
    for r in per_image {
        let (v, n) = r?;
        sum += v;
        n_views = n;
    }
    Ok(ProbeEntry {
        family,
        mean_variance: sum / images.len() as f64,
        n_views,
        n_images: images.len(),
    })
}

/// Fraction of randomly rotated views whose predicted quarter turn is right.
/// View `v` is a training-style global view of image `v % len` with a random
/// rotation.
pub fn rotation_accuracy(model: &ModelParams<f32>, images: &[FloatImage], aug: &AugmentConfig, n_views: usize, seed: u64) -> Result<f64> {
    if images.is_empty() || n_views == 0 {
        return Err(GtsaError::InvalidArgument("need images and at least one view".into()));
    }
    let single = AugmentConfig {
        n_global: 1,
        n_local: 0,
        rotate: true,
        ..*aug
    };
    let views: Vec<View> = (0..n_views)
        .map(|v| {
            let set = sample_view_set(&images[v % images.len()], &single, seed::derive(&[seed, v as u64]))?;
            Ok(set.views.into_iter().next().expect("one global view"))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&FloatImage> = views.iter().map(|v| &v.image).collect();
    let pass = model.student_pass(&refs)?;
    let correct = views
        .iter()
        .enumerate()
        .filter(|(i, v)| pass.logits.argmax(*i) == v.params.rot_k.k() as usize)
        .count();
    Ok(correct as f64 / n_views as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    /// Student-side patch center in source pixels.
    pub sx: f64,
    pub sy: f64,
    /// Teacher-side patch center in source pixels.
    pub tx: f64,
    pub ty: f64,
    pub sim: f64,
}

/// Which features are matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchFeatures {
    /// Student encoder output on both views.
    #[default]
    Encoder,
    /// Student predictor output against teacher projector output, as in training.
    Heads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchExport {
    pub records: Vec<MatchRecord>,
    pub views: [ViewParams; 2],
    pub patch: usize,
}

impl MatchExport {
    pub fn to_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{},{},{},{},{}\n", r.sx, r.sy, r.tx, r.ty, r.sim))
            .collect()
    }
}

/// Center of feature cell `idx` in view pixels.
pub fn patch_center(idx: usize, grid_w: usize, patch: usize) -> (f64, f64) {
    let (r, c) = (idx / grid_w, idx % grid_w);
    (((c as f64) + 0.5) * patch as f64, ((r as f64) + 0.5) * patch as f64)
}

/// Top-`k` matches between two views, mapped back to source coordinates.
pub fn matches_for_views(
    student: &ModelParams<f32>,
    teacher: Option<&ModelParams<f32>>,
    views: [&View; 2],
    features: MatchFeatures,
    k: usize,
) -> Result<MatchExport> {
    let patch = student.config.patch;
    let (zs, zt): (FeatureMap<f32>, FeatureMap<f32>) = match features {
        MatchFeatures::Encoder => {
            let toks = student.encode_views(&[&views[0].image, &views[1].image])?;
            (toks.feature_map(0), toks.feature_map(1))
        }
        MatchFeatures::Heads => {
            let teacher = teacher.ok_or_else(|| GtsaError::InvalidArgument("head matching needs the teacher".into()))?;
            let pass = student.student_pass(&[&views[0].image])?;
            let t = teacher.teacher_pass(&[&views[1].image])?;
            (pass.predicted.feature_map(0), t.feature_map(0))
        }
    };
    let set = match_topk(&zs, &zt, k)?.remove(0);
    let records = set
        .pairs
        .iter()
        .map(|p| {
            let (vx, vy) = patch_center(p.student, zs.w, patch);
            let (sx, sy) = view_point_to_source(vx, vy, &views[0].params);
            let (ux, uy) = patch_center(p.teacher, zt.w, patch);
            let (tx, ty) = view_point_to_source(ux, uy, &views[1].params);
            MatchRecord {
                sx,
                sy,
                tx,
                ty,
                sim: p.similarity.clamp(-1.0, 1.0),
            }
        })
        .collect();
    Ok(MatchExport {
        records,
        views: [views[0].params, views[1].params],
        patch,
    })
}

/// Samples two unrotated global views of `img` and exports their matches.
pub fn export_matches(
    student: &ModelParams<f32>,
    teacher: Option<&ModelParams<f32>>,
    img: &FloatImage,
    aug: &AugmentConfig,
    features: MatchFeatures,
    k: usize,
    seed: u64,
) -> Result<(MatchExport, [View; 2])> {
    let pair = AugmentConfig {
        n_global: 2,
        n_local: 0,
        rotate: false,
        ..*aug
    };
    let mut views = sample_view_set(img, &pair, seed)?.views.into_iter();
    let (a, b) = (views.next().expect("two views"), views.next().expect("two views"));
    let export = matches_for_views(student, teacher, [&a, &b], features, k)?;
    Ok((export, [a, b]))
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Side-by-side rendering of the two views (scaled by `zoom`) with one line
/// per match, colored from red (low similarity) to green (high).
pub fn overlay(export: &MatchExport, views: &[View; 2], zoom: u32) -> RgbImage {
    let zoom = zoom.max(1);
    let tiles: Vec<RgbImage> = views.iter().map(|v| v.image.to_rgb8()).collect();
    let gap = 4 * zoom;
    let (w0, h0) = tiles[0].dimensions();
    let (w1, h1) = tiles[1].dimensions();
    let mut out = RgbImage::from_pixel((w0 + w1) * zoom + gap, h0.max(h1) * zoom, Rgb([255, 255, 255]));
    for (tile, x_off) in [(&tiles[0], 0), (&tiles[1], w0 * zoom + gap)] {
        for (x, y, p) in tile.enumerate_pixels() {
            for dy in 0..zoom {
                for dx in 0..zoom {
                    out.put_pixel(x_off + x * zoom + dx, y * zoom + dy, *p);
                }
            }
        }
    }
    for r in &export.records {
        let to_view = |x: f64, y: f64, v: &ViewParams| crate::geometry::source_point_to_view(x, y, v);
        let (ax, ay) = to_view(r.sx, r.sy, &export.views[0]);
        let (bx, by) = to_view(r.tx, r.ty, &export.views[1]);
        let t = ((r.sim + 1.0) / 2.0).clamp(0.0, 1.0);
        let color = Rgb([(255.0 * (1.0 - t)) as u8, (255.0 * t) as u8, 40]);
        let z = zoom as f64;
        draw_line(
            &mut out,
            ((ax * z) as i64, (ay * z) as i64),
            (((bx * z) as i64) + (w0 * zoom + gap) as i64, (by * z) as i64),
            color,
        );
    }
    out
}

/// Writes `<prefix>.txt` records and, if `with_overlay`, `<prefix>.png`.
pub fn write_match_export(export: &MatchExport, views: &[View; 2], prefix: &Path, with_overlay: bool) -> Result<()> {
    let txt = prefix.with_extension("txt");
    let mut f = std::fs::File::create(&txt).map_err(|e| GtsaError::io(format!("creating {}", txt.display()), e))?;
    f.write_all(export.to_lines().as_bytes())
        .map_err(|e| GtsaError::io(format!("writing {}", txt.display()), e))?;
    if with_overlay {
        let png = prefix.with_extension("png");
        overlay(export, views, 4).save(&png).map_err(|e| GtsaError::Decode {
            path: png.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::JitterFactors;
    use crate::data::synth_image;

    struct MeanColor;

    impl GapEncoder for MeanColor {
        fn gap(&self, views: &[&FloatImage]) -> Result<Vec<Vec<f64>>> {
            Ok(views.iter().map(|v| v.mean_color().to_vec()).collect())
        }
    }

    fn scene(seed: u64) -> FloatImage {
        FloatImage::from_rgb8(&synth_image(seed, 64).unwrap())
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("blur".parse::<Family>().is_err());
    }

    #[test]
    fn disabled_transforms_give_zero_variance() {
        let cfg = ProbeConfig {
            disabled: true,
            ..ProbeConfig::default()
        };
        let imgs = [scene(1), scene(2)];
        for f in Family::ALL {
            assert_eq!(sensitivity(&MeanColor, &imgs, f, &cfg, 5).unwrap().mean_variance, 0.0);
        }
    }

    #[test]
    fn crop_family_has_two_globals_and_eight_locals() {
        let views = probe_views(&scene(3), Family::CropMulticrop, &ProbeConfig::default(), 9).unwrap();
        assert_eq!(views.len(), 10);
        assert_eq!(views.iter().filter(|v| v.params.kind == ViewKind::Global).count(), 2);
        assert!(views.iter().all(|v| v.params.rot_k == RotIndex::IDENTITY && v.params.photo == PhotometricParams::identity()));
    }

    #[test]
    fn jitter_variance_matches_factor_oracle() {
        // on a flat gray image only brightness changes the mean color
        let gray = 0.4f32;
        let img = FloatImage::filled(64, 64, [gray; 3]);
        let cfg = ProbeConfig {
            jitter_strength: 0.8,
            ..ProbeConfig::default()
        };
        let seed = 11;
        let entry = sensitivity(&MeanColor, std::slice::from_ref(&img), Family::ColorJitter, &cfg, seed).unwrap();

        let views = probe_views(&img, Family::ColorJitter, &cfg, seed::derive(&[seed, 0])).unwrap();
        let values: Vec<f64> = views
            .iter()
            .map(|v| {
                let b = JitterFactors::for_seed(0.8, v.params.photometric_seed()).brightness;
                (gray * b as f32).clamp(0.0, 1.0) as f64
            })
            .collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let want = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(want > 0.0);
        assert!((entry.mean_variance - want).abs() < 1e-6 * want.max(1e-6), "{} vs {want}", entry.mean_variance);
    }

    #[test]
    fn variance_is_order_invariant() {
        let vs: Vec<Vec<f64>> = (0..10).map(|i| vec![(i as f64).sin(), (i * i) as f64 * 0.1]).collect();
        let mut rev = vs.clone();
        rev.reverse();
        let (a, b) = (view_variance(&vs).unwrap(), view_variance(&rev).unwrap());
        assert!((a - b).abs() < 1e-12 * a);
        assert!(view_variance(&vs[..1]).is_err());
    }

    #[test]
    fn identical_views_match_identical_points() {
        let cfg = TrainConfig {
            dim: 16,
            heads: 2,
            depth: 1,
            ..TrainConfig::default()
        };
        let (student, _) = crate::model::init_model::<f32>(&cfg.model(), 0).unwrap();
        let img = scene(4);
        let (_, views) = export_matches(&student, None, &img, &cfg.augment(), MatchFeatures::Encoder, 16, 3).unwrap();
        let export = matches_for_views(&student, None, [&views[0], &views[0]], MatchFeatures::Encoder, 16).unwrap();
        assert_eq!(export.records.len(), 16);
        for r in &export.records {
            assert!((r.sx - r.tx).abs() < 1e-9 && (r.sy - r.ty).abs() < 1e-9);
            assert!((-1.0..=1.0).contains(&r.sim));
        }
        let all = matches_for_views(&student, None, [&views[0], &views[1]], MatchFeatures::Encoder, 1000).unwrap();
        assert_eq!(all.records.len(), 64);
        for r in &all.records {
            assert!((0.0..=64.0).contains(&r.sx) && (0.0..=64.0).contains(&r.ty));
        }
        let png = overlay(&all, &views, 2);
        assert_eq!(png.dimensions(), (2 * 128 + 8, 128));
    }
}
