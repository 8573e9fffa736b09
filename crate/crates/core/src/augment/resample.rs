use crate::error::{GtsaError, Result};
use crate::geometry::{Rect, RotIndex};
use crate::raster::FloatImage;

/// Bilinear resample of `rect` (source pixels) to `out_size x out_size`.
/// Output pixel centers map linearly onto the rect; source values sit at
/// pixel centers and out-of-image samples clamp to the border.
pub fn crop_resize(img: &FloatImage, rect: &Rect, out_size: usize) -> Result<FloatImage> {
    if !rect.is_valid() {
        return Err(GtsaError::EmptyRect(rect.to_array()));
    }
    if out_size == 0 {
        return Err(GtsaError::InvalidArgument("output size must be positive".into()));
    }
    let tap = |pos: f64, len: usize| {
        let u = (pos - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = u.floor() as usize;
        (lo, (lo + 1).min(len - 1), (u - lo as f64) as f32)
    };
    let sx = rect.width() / out_size as f64;
    let sy = rect.height() / out_size as f64;
    let xs: Vec<_> = (0..out_size).map(|j| tap(rect.x0 + (j as f64 + 0.5) * sx, img.w)).collect();
    let ys: Vec<_> = (0..out_size).map(|i| tap(rect.y0 + (i as f64 + 0.5) * sy, img.h)).collect();

    let mut out = FloatImage::zeros(out_size, out_size);
    for ch in 0..FloatImage::CHANNELS {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * img.w + x0] * (1.0 - fx) + src[y0 * img.w + x1] * fx;
                let bot = src[y1 * img.w + x0] * (1.0 - fx) + src[y1 * img.w + x1] * fx;
                dst[i * out_size + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Lossless `k x 90` degree counter-clockwise rotation; pixel `(r, c)` moves to
/// `(w - 1 - c, r)` per quarter turn.
pub fn rotate_image(img: &FloatImage, k: RotIndex) -> Result<FloatImage> {
    let (h, w) = (img.h, img.w);
    if k.k() % 2 == 1 && h != w {
        return Err(GtsaError::NonSquareRotation { k: k.k(), h, w });
    }
    if k == RotIndex::IDENTITY {
        return Ok(img.clone());
    }
    let mut out = FloatImage::zeros(h, w);
    for ch in 0..FloatImage::CHANNELS {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        for r in 0..h {
            for c in 0..w {
                let (nr, nc) = match k.k() {
                    1 => (w - 1 - c, r),
                    2 => (h - 1 - r, w - 1 - c),
                    _ => (c, h - 1 - r),
                };
                dst[nr * w + nc] = src[r * w + c];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotate_map, FeatureMap};

    fn textured(h: usize, w: usize) -> FloatImage {
        FloatImage::from_fn(h, w, |ch, r, c| ((ch * 5 + r * 3 + c * 11) % 13) as f32 / 12.0)
    }

    #[test]
    fn full_rect_same_size_is_identity() {
        let img = textured(16, 16);
        let out = crop_resize(&img, &Rect::new(0.0, 0.0, 16.0, 16.0), 16).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn checkerboard_upscale_keeps_corners() {
        // 2x2 checkerboard, bilinear oracle: corner samples clamp onto the stored pixels
        let img = FloatImage::from_fn(2, 2, |_, r, c| ((r + c) % 2) as f32);
        let out = crop_resize(&img, &Rect::new(0.0, 0.0, 2.0, 2.0), 4).unwrap();
        for ch in 0..3 {
            assert_eq!(out.get(ch, 0, 0), 0.0);
            assert_eq!(out.get(ch, 0, 3), 1.0);
            assert_eq!(out.get(ch, 3, 0), 1.0);
            assert_eq!(out.get(ch, 3, 3), 0.0);
            // interior sample at source (0.75, 0.25): u=0.25, v=0 → 0.25
            assert!((out.get(ch, 0, 1) - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = FloatImage::filled(7, 9, [0.3, 0.4, 0.5]);
        let out = crop_resize(&img, &Rect::new(1.2, 0.7, 8.1, 5.5), 13).unwrap();
        for ch in 0..3 {
            assert!(out.plane(ch).iter().all(|&v| (v - [0.3, 0.4, 0.5][ch]).abs() < 1e-6));
        }
        assert!(crop_resize(&img, &Rect::new(2.0, 2.0, 2.0, 3.0), 4).is_err());
    }

    #[test]
    fn rotation_inverse_and_shared_index_rule() {
        let img = textured(6, 6);
        for k in 0..4 {
            let rk = RotIndex::new(k).unwrap();
            let back = rotate_image(&rotate_image(&img, rk).unwrap(), rk.inverse()).unwrap();
            assert_eq!(back, img);

            // same permutation as geometry::rotate_map on a 3-channel 6x6 map
            let map = FeatureMap::from_vec(1, 3, 6, 6, img.data.iter().map(|&v| v as f64).collect()).unwrap();
            let rotated = rotate_map(&map, rk).unwrap();
            let rimg = rotate_image(&img, rk).unwrap();
            let as64: Vec<f64> = rimg.data.iter().map(|&v| v as f64).collect();
            assert_eq!(rotated.data, as64);
        }
        let tall = textured(4, 6);
        assert!(rotate_image(&tall, RotIndex::new(1).unwrap()).is_err());
        assert!(rotate_image(&tall, RotIndex::new(2).unwrap()).is_ok());
    }

    #[test]
    fn two_by_two_block_rotation() {
        let img = FloatImage::from_fn(2, 2, |_, r, c| (r * 2 + c) as f32);
        let out = rotate_image(&img, RotIndex::new(1).unwrap()).unwrap();
        // [[a,b],[c,d]] -> [[b,d],[a,c]]
        assert_eq!(out.plane(0), &[1.0, 3.0, 0.0, 2.0]);
    }
}
