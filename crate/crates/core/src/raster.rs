//! Planar RGB float images and conversion to/from 8-bit buffers.

use image::RgbImage;

/// Channel-major (`3 x h x w`) RGB image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub const CHANNELS: usize = 3;

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; Self::CHANNELS * h * w],
        }
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::zeros(h, w);
        for (ch, v) in rgb.iter().enumerate() {
            img.plane_mut(ch).fill(*v);
        }
        img
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut img = Self::zeros(h, w);
        for ch in 0..Self::CHANNELS {
            for r in 0..h {
                for c in 0..w {
                    img.data[(ch * h + r) * w + c] = f(ch, r, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, ch: usize, r: usize, c: usize) -> f32 {
        self.data[(ch * self.h + r) * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, r: usize, c: usize, v: f32) {
        self.data[(ch * self.h + r) * self.w + c] = v;
    }

    pub fn plane(&self, ch: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [f32] {
        let n = self.h * self.w;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    /// Per-channel mean.
    pub fn mean_color(&self) -> [f64; 3] {
        let n = (self.h * self.w) as f64;
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            *o = self.plane(ch).iter().map(|&v| v as f64).sum::<f64>() / n;
        }
        out
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::zeros(h, w);
        for (x, y, p) in img.enumerate_pixels() {
            for ch in 0..3 {
                out.set(ch, y as usize, x as usize, p[ch] as f32 / 255.0);
            }
        }
        out
    }

    /// Quantizes to 8 bits, clamping to `[0, 1]` first.
    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.w as u32, self.h as u32, |x, y| {
            let px = |ch| (self.get(ch, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_is_lossless() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([(x * 40) as u8, (y * 90) as u8, 255]));
        assert_eq!(FloatImage::from_rgb8(&img).to_rgb8(), img);
    }

    #[test]
    fn mean_color_of_filled_image() {
        let img = FloatImage::filled(4, 6, [0.25, 0.5, 1.0]);
        assert_eq!(img.mean_color(), [0.25, 0.5, 1.0]);
    }
}
