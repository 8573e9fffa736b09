//! Pool/rotate commutation: pooling the student's overlap and pooling then
//! rotating the teacher's overlap must agree when the encoder is exactly
//! rotation-equivariant.

use gtsa::augment::{render, PhotometricParams, ViewKind, ViewParams};
use gtsa::geometry::{overlap_region, roi_align, rotate_map, FeatureMap, Rect, RotIndex};
use gtsa::raster::FloatImage;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SRC: usize = 256;
const PATCH: usize = 8;

/// Channel-wise affine ramp. Bilinear resampling reproduces it exactly away
/// from the border, which is what makes the oracle exact.
fn affine_image(coef: [[f64; 2]; 3]) -> FloatImage {
    FloatImage::from_fn(SRC, SRC, |ch, r, c| {
        let x = (c as f64 + 0.5) / SRC as f64;
        let y = (r as f64 + 0.5) / SRC as f64;
        (0.5 + coef[ch][0] * x + coef[ch][1] * y) as f32
    })
}

fn patch_average(img: &FloatImage) -> FeatureMap<f64> {
    let (h, w) = (img.h / PATCH, img.w / PATCH);
    let mut map = FeatureMap::zeros(1, 3, h, w);
    for ch in 0..3 {
        for r in 0..h {
            for c in 0..w {
                let mut s = 0.0;
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        s += img.get(ch, r * PATCH + y, c * PATCH + x) as f64;
                    }
                }
                let i = map.idx(0, ch, r, c);
                map.data[i] = s / (PATCH * PATCH) as f64;
            }
        }
    }
    map
}

fn view(crop: Rect, out_size: usize, k: u8) -> ViewParams {
    ViewParams {
        kind: ViewKind::Global,
        crop,
        out_size,
        rot_k: RotIndex::new(k).unwrap(),
        photo: PhotometricParams::identity(),
        seed: 0,
    }
}

/// 1 where a pooled cell's sample point needs no border clamping.
fn interior_mask(rect: &Rect, pooled: usize, h: usize, w: usize) -> FeatureMap<f64> {
    let inside = |start: f64, end: f64, i: usize, n: usize| {
        let p = start + (i as f64 + 0.5) * (end - start) / pooled as f64;
        (0.5..=n as f64 - 0.5).contains(&p)
    };
    let mut mask = FeatureMap::zeros(1, 1, pooled, pooled);
    for i in 0..pooled {
        for j in 0..pooled {
            if inside(rect.y0, rect.y1, i, h) && inside(rect.x0, rect.x1, j, w) {
                mask.data[i * pooled + j] = 1.0;
            }
        }
    }
    mask
}

/// Largest cellwise gap over interior cells, and how many cells were compared.
/// `None` when the crops do not overlap.
fn commutation_gap(coef: [[f64; 2]; 3], s: ViewParams, t: ViewParams, pooled: usize) -> Option<(f64, usize)> {
    let img = affine_image(coef);
    let region = overlap_region(&s, &t, PATCH, PATCH).unwrap();
    if !region.valid {
        return None;
    }
    let zs = patch_average(&render(&img, s).unwrap().image);
    let zt = patch_average(&render(&img, t).unwrap().image);
    let ps = roi_align(&zs, &region.student_rect, pooled, pooled).unwrap();
    let pt = rotate_map(&roi_align(&zt, &region.teacher_rect, pooled, pooled).unwrap(), region.rel_rot).unwrap();
    let ms = interior_mask(&region.student_rect, pooled, zs.h, zs.w);
    let mt = rotate_map(&interior_mask(&region.teacher_rect, pooled, zt.h, zt.w), region.rel_rot).unwrap();
    let (mut gap, mut compared) = (0.0f64, 0);
    for cell in 0..pooled * pooled {
        if ms.data[cell] == 1.0 && mt.data[cell] == 1.0 {
            compared += 1;
            for d in 0..3 {
                let i = d * pooled * pooled + cell;
                gap = gap.max((ps.data[i] - pt.data[i]).abs());
            }
        }
    }
    Some((gap, compared))
}

fn arb_crop() -> impl Strategy<Value = Rect> {
    (1.0..180.0f64, 1.0..180.0f64, 24.0..74.0f64, 24.0..74.0f64).prop_map(|(x, y, w, h)| Rect::new(x, y, x + w, y + h))
}

fn arb_coef() -> impl Strategy<Value = [[f64; 2]; 3]> {
    prop::array::uniform3(prop::array::uniform2(-0.25..0.25f64))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pooled_student_equals_rotated_pooled_teacher(
        coef in arb_coef(),
        scrop in arb_crop(),
        tcrop in arb_crop(),
        sout in prop::sample::select(vec![16usize, 32, 64]),
        tout in prop::sample::select(vec![32usize, 64]),
        k in 0u8..4,
        pooled in 1usize..5,
    ) {
        if let Some((gap, _)) = commutation_gap(coef, view(scrop, sout, k), view(tcrop, tout, 0), pooled) {
            prop_assert!(gap <= 1e-5, "gap {gap}");
        }
    }
}

/// Guards against the property above passing vacuously: most pooled cells of
/// overlapping crop pairs must be interior and therefore compared.
#[test]
fn commutation_compares_most_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut compared, mut total) = (0, 0);
    while total < 400 * 4 {
        let crop = |rng: &mut ChaCha8Rng| {
            let (x, y) = (rng.random_range(60.0..100.0), rng.random_range(60.0..100.0));
            Rect::new(x, y, x + rng.random_range(40.0..80.0), y + rng.random_range(40.0..80.0))
        };
        let (s, t) = (view(crop(&mut rng), 32, rng.random_range(0..4)), view(crop(&mut rng), 64, 0));
        let coef = [[0.2, -0.1], [-0.2, 0.15], [0.05, 0.25]];
        if let Some((gap, n)) = commutation_gap(coef, s, t, 2) {
            assert!(gap <= 1e-5);
            compared += n;
            total += 4;
        }
    }
    assert!(compared * 2 > total, "{compared} of {total} cells compared");
}
