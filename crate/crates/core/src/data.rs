//! Synthetic multi-object scenes and a directory image loader.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::augment::crop_resize;
use crate::error::{GtsaError, Result};
use crate::geometry::Rect;
use crate::raster::FloatImage;
use crate::seed;

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub name: String,
    pub image: RgbImage,
}

/// Ordered, non-empty collection of square 8-bit RGB images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
    pub size: usize,
}

impl Dataset {
    pub fn new(items: Vec<DatasetItem>, size: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(GtsaError::InvalidArgument("dataset is empty".into()));
        }
        Ok(Self { items, size })
    }

    /// `n` synthetic scenes with seeds `base_seed, base_seed+1, ...`.
    pub fn synthetic(n: usize, size: usize, base_seed: u64) -> Result<Self> {
        let items = (0..n)
            .map(|i| {
                let s = base_seed + i as u64;
                Ok(DatasetItem {
                    name: format!("synth_{s:06}"),
                    image: synth_image(s, size)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, size)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn float_image(&self, i: usize) -> FloatImage {
        FloatImage::from_rgb8(&self.items[i].image)
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    /// Vertical extent for top-lit shading.
    fn span(&self) -> (f64, f64) {
        match *self {
            Shape::Rect { y0, y1, .. } => (y0, y1),
            Shape::Circle { cy, r, .. } => (cy - r, cy + r),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }
}

/// Outdoor-like scene: sky/ground backdrop split at a random horizon,
/// low-frequency value noise, and 5–12 top-lit objects (boxes, discs and
/// upright columns standing on the ground). Pure function of `seed`.
pub fn synth_image(seed: u64, size: usize) -> Result<RgbImage> {
    if size < 32 {
        return Err(GtsaError::InvalidArgument(format!("synthetic size {size} below 32")));
    }
    let mut rng = seed::rng(seed::derive(&[seed, 0x5359_4e54]));
    let s = size as f64;
    let rand_color = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
        [
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
        ]
    };
    let horizon = s * rng.random_range(0.4..0.65);
    let sky_top = lerp3(rand_color(&mut rng, 0.55, 0.95), [0.7, 0.8, 1.0], 0.5);
    let sky_low = lerp3(sky_top, [1.0, 1.0, 1.0], 0.4);
    let ground_near = rand_color(&mut rng, 0.05, 0.35);
    let ground_far = lerp3(ground_near, sky_low, 0.3);

    const LATTICE: usize = 5;
    let noise: Vec<f64> = (0..LATTICE * LATTICE).map(|_| rng.random_range(-1.0..1.0)).collect();
    let value_noise = |x: f64, y: f64| {
        let gx = x / s * (LATTICE - 1) as f64;
        let gy = y / s * (LATTICE - 1) as f64;
        let (ix, iy) = ((gx as usize).min(LATTICE - 2), (gy as usize).min(LATTICE - 2));
        let (fx, fy) = (gx - ix as f64, gy - iy as f64);
        let at = |r: usize, c: usize| noise[r * LATTICE + c];
        let top = at(iy, ix) * (1.0 - fx) + at(iy, ix + 1) * fx;
        let bot = at(iy + 1, ix) * (1.0 - fx) + at(iy + 1, ix + 1) * fx;
        top * (1.0 - fy) + bot * fy
    };

    let n_shapes = rng.random_range(5..=12);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let color = rand_color(&mut rng, 0.0, 1.0);
        let shape = match rng.random_range(0..3) {
            0 => {
                let w = s * rng.random_range(0.08..0.25);
                let h = s * rng.random_range(0.08..0.25);
                let x0 = rng.random_range(-0.5 * w..s - 0.5 * w);
                let y0 = rng.random_range(-0.5 * h..s - 0.5 * h);
                Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
            }
            1 => Shape::Circle {
                cx: rng.random_range(0.0..s),
                cy: rng.random_range(0.0..s),
                r: s * rng.random_range(0.04..0.12),
            },
            _ => {
                // upright column resting on the ground plane
                let w = s * rng.random_range(0.03..0.07);
                let h = s * rng.random_range(0.2..0.55);
                let base = rng.random_range(horizon..s);
                let x0 = rng.random_range(0.0..s - w);
                Shape::Rect { x0, y0: base - h, x1: x0 + w, y1: base }
            }
        };
        shapes.push((shape, color));
    }

    let img = RgbImage::from_fn(size as u32, size as u32, |c, r| {
        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
        let mut px = if y < horizon {
            lerp3(sky_top, sky_low, y / horizon)
        } else {
            lerp3(ground_far, ground_near, smoothstep(horizon, s, y))
        };
        let n = 0.08 * value_noise(x, y);
        px = [px[0] + n, px[1] + n, px[2] + n];
        for (shape, color) in &shapes {
            if shape.contains(x, y) {
                let (top, bot) = shape.span();
                let shade = 1.15 - 0.35 * ((y - top) / (bot - top)).clamp(0.0, 1.0);
                px = [color[0] * shade, color[1] * shade, color[2] * shade];
            }
        }
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(px[0]), q(px[1]), q(px[2])])
    });
    Ok(img)
}

/// Scales so the short side equals `size` and center-crops to a square.
pub fn standardize(img: &RgbImage, size: usize) -> Result<RgbImage> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if w == 0.0 || h == 0.0 {
        return Err(GtsaError::InvalidArgument("empty image".into()));
    }
    let side = w.min(h);
    let rect = Rect::new((w - side) / 2.0, (h - side) / 2.0, (w + side) / 2.0, (h + side) / 2.0);
    Ok(crop_resize(&FloatImage::from_rgb8(img), &rect, size)?.to_rgb8())
}

/// Lexicographically ordered files of `dir`; every regular file must decode.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| GtsaError::io(format!("reading {}", dir.display()), e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| GtsaError::io(format!("reading {}", dir.display()), e))?;
        let path = entry.path();
        if path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(GtsaError::InvalidArgument(format!("no images in {}", dir.display())));
    }
    Ok(paths)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| GtsaError::io(format!("opening {}", path.display()), e))?
        .with_guessed_format()
        .map_err(|e| GtsaError::io(format!("reading {}", path.display()), e))?;
    let img = reader.decode().map_err(|e| GtsaError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn load_dataset(dir: &Path, size: usize) -> Result<Dataset> {
    let items = list_images(dir)?
        .into_iter()
        .map(|path| {
            let image = standardize(&load_image(&path)?, size)?;
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(DatasetItem { name, image })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(items, size)
}
