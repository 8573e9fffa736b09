use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::raster::FloatImage;
use crate::seed;

/// Photometric record of one view. `jitter_strength` scales the random
/// brightness/contrast/saturation/hue deltas drawn from the view seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricParams {
    pub jitter_strength: f64,
    pub grayscale: bool,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

impl PhotometricParams {
    pub fn identity() -> Self {
        Self {
            jitter_strength: 0.0,
            grayscale: false,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.jitter_strength, self.blur_sigma, self.noise_sigma]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Probabilities and ranges from which per-view [`PhotometricParams`] are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricConfig {
    pub jitter_strength: f64,
    pub p_grayscale: f64,
    pub p_blur_global: f64,
    pub p_blur_local: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub p_noise: f64,
    pub noise_sigma: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            jitter_strength: 1.0,
            p_grayscale: 0.2,
            p_blur_global: 0.5,
            p_blur_local: 0.1,
            blur_sigma_min: 0.1,
            blur_sigma_max: 1.0,
            p_noise: 0.1,
            noise_sigma: 0.05,
        }
    }
}

impl PhotometricConfig {
    pub fn disabled() -> Self {
        Self {
            jitter_strength: 0.0,
            p_grayscale: 0.0,
            p_blur_global: 0.0,
            p_blur_local: 0.0,
            blur_sigma_min: 0.0,
            blur_sigma_max: 0.0,
            p_noise: 0.0,
            noise_sigma: 0.0,
        }
    }

    /// Only color jitter at the configured strength.
    pub fn jitter_only(strength: f64) -> Self {
        Self {
            jitter_strength: strength,
            ..Self::disabled()
        }
    }

    pub fn sample<R: Rng>(&self, global: bool, rng: &mut R) -> PhotometricParams {
        let p_blur = if global { self.p_blur_global } else { self.p_blur_local };
        let grayscale = rng.random::<f64>() < self.p_grayscale;
        let blur: f64 = rng.random();
        let blur_sigma = if blur < p_blur {
            self.blur_sigma_min + rng.random::<f64>() * (self.blur_sigma_max - self.blur_sigma_min)
        } else {
            0.0
        };
        let noise_sigma = if rng.random::<f64>() < self.p_noise { self.noise_sigma } else { 0.0 };
        PhotometricParams {
            jitter_strength: self.jitter_strength,
            grayscale,
            blur_sigma,
            noise_sigma,
        }
    }
}

/// Concrete jitter factors drawn for one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterFactors {
    pub fn sample<R: Rng>(strength: f64, rng: &mut R) -> Self {
        let mut factor = |spread: f64| {
            let u: f64 = rng.random();
            1.0 + spread * strength * (2.0 * u - 1.0)
        };
        let brightness = factor(0.4);
        let contrast = factor(0.4);
        let saturation = factor(0.4);
        let u: f64 = rng.random();
        Self {
            brightness,
            contrast,
            saturation,
            hue: 0.1 * strength * (2.0 * u - 1.0),
        }
    }

    /// The factors [`apply_photometric`] uses for `seed`.
    pub fn for_seed(strength: f64, seed: u64) -> Self {
        Self::sample(strength, &mut seed::rng(seed))
    }
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luma_plane(img: &FloatImage) -> Vec<f32> {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..img.h * img.w)
        .map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i])
        .collect()
}

fn clamp_unit(img: &mut FloatImage) {
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
}

fn blend_with_plane(img: &mut FloatImage, base: &[f32], factor: f32) {
    let n = img.h * img.w;
    for ch in 0..3 {
        let plane = img.plane_mut(ch);
        for i in 0..n {
            plane[i] = base[i] + factor * (plane[i] - base[i]);
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn shift_hue(img: &mut FloatImage, shift: f32) {
    let n = img.h * img.w;
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(img.data[i], img.data[n + i], img.data[2 * n + i]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        img.data[i] = r;
        img.data[n + i] = g;
        img.data[2 * n + i] = b;
    }
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and replicated borders.
pub fn gaussian_blur(img: &FloatImage, sigma: f64) -> FloatImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (img.h as isize, img.w as isize);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for ch in 0..3 {
        let src = img.plane(ch);
        let mid = tmp.plane_mut(ch);
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let cc = (c + i as isize - radius).clamp(0, w - 1);
                    acc += k * src[(r * w + cc) as usize] as f64;
                }
                mid[(r * w + c) as usize] = acc as f32;
            }
        }
        let mid = tmp.plane(ch);
        let dst = out.plane_mut(ch);
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let rr = (r + i as isize - radius).clamp(0, h - 1);
                    acc += k * mid[(rr * w + c) as usize] as f64;
                }
                dst[(r * w + c) as usize] = acc as f32;
            }
        }
    }
    out
}

/// Color jitter (brightness, contrast, saturation, hue in that order), optional
/// grayscale, Gaussian blur and additive Gaussian noise, clamped to `[0, 1]`.
/// Factors that come out as exact identities are skipped.
pub fn apply_photometric(img: &FloatImage, p: &PhotometricParams, seed: u64) -> FloatImage {
    let mut rng = seed::rng(seed);
    let jitter = JitterFactors::sample(p.jitter_strength, &mut rng);
    let mut out = img.clone();

    if jitter.brightness != 1.0 {
        let b = jitter.brightness as f32;
        out.data.iter_mut().for_each(|v| *v *= b);
        clamp_unit(&mut out);
    }
    if jitter.contrast != 1.0 {
        let luma = luma_plane(&out);
        let mean = luma.iter().map(|&v| v as f64).sum::<f64>() / luma.len() as f64;
        let base = vec![mean as f32; luma.len()];
        blend_with_plane(&mut out, &base, jitter.contrast as f32);
        clamp_unit(&mut out);
    }
    if jitter.saturation != 1.0 {
        let luma = luma_plane(&out);
        blend_with_plane(&mut out, &luma, jitter.saturation as f32);
        clamp_unit(&mut out);
    }
    if jitter.hue != 0.0 {
        shift_hue(&mut out, jitter.hue as f32);
        clamp_unit(&mut out);
    }
    if p.grayscale {
        let luma = luma_plane(&out);
        for ch in 0..3 {
            out.plane_mut(ch).copy_from_slice(&luma);
        }
    }
    if p.blur_sigma > 0.0 {
        out = gaussian_blur(&out, p.blur_sigma);
    }
    if p.noise_sigma > 0.0 {
        let sigma = p.noise_sigma;
        for v in &mut out.data {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += (sigma * z) as f32;
        }
        clamp_unit(&mut out);
    }
    out
}
