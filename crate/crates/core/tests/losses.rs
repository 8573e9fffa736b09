use gtsa::geometry::{FeatureMap, OverlapRegion, Rect, RotIndex};
use gtsa::losses::{cosine, match_topk, overlap_loss, patch_corr_loss, rotation_loss};
use gtsa::model::RotationLogits;
use proptest::prelude::*;

fn arb_map(dim: usize, h: usize, w: usize) -> impl Strategy<Value = FeatureMap<f64>> {
    prop::collection::vec(-2.0..2.0f64, dim * h * w).prop_map(move |v| FeatureMap::from_vec(1, dim, h, w, v).unwrap())
}

fn arb_pair() -> impl Strategy<Value = (FeatureMap<f64>, FeatureMap<f64>)> {
    (1usize..5, 1usize..5, 1usize..5, 1usize..5, 1usize..5)
        .prop_flat_map(|(d, h, w, ht, wt)| (arb_map(d, h, w), arb_map(d, ht, wt)))
}

fn arb_cells(n: f64) -> impl Strategy<Value = Rect> {
    (0.0..n - 0.5, 0.0..n - 0.5, 0.25..n).prop_map(move |(x, y, s)| Rect::new(x, y, (x + s).min(n), (y + s).min(n)))
}

proptest! {
    #[test]
    fn overlap_loss_is_a_negative_cosine(
        z in arb_map(3, 4, 4),
        zt in arb_map(3, 4, 4),
        sr in arb_cells(4.0),
        tr in arb_cells(4.0),
        k in 0u8..4,
        pooled in 1usize..4,
    ) {
        let region = OverlapRegion { student_rect: sr, teacher_rect: tr, rel_rot: RotIndex::new(k).unwrap(), valid: true };
        let l = overlap_loss(&z, &zt, &region, pooled).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&l));
        let scaled = FeatureMap::from_vec(1, 3, 4, 4, z.data.iter().map(|v| v * 7.5).collect()).unwrap();
        let ls = overlap_loss(&scaled, &zt, &region, pooled).unwrap();
        prop_assert!((l - ls).abs() < 1e-6);
    }

    /// Every returned pair names the student's best teacher cell, pairs are
    /// sorted by similarity, students appear at most once and K is clamped.
    #[test]
    fn match_topk_structure((z, zt) in arb_pair(), k in 1usize..24) {
        let sets = match_topk(&z, &zt, k).unwrap();
        prop_assert_eq!(sets.len(), 1);
        let pairs = &sets[0].pairs;
        prop_assert_eq!(pairs.len(), k.min(z.h * z.w));
        let mut seen = std::collections::HashSet::new();
        for p in pairs {
            prop_assert!(seen.insert(p.student));
            let s = z.vector(0, p.student / z.w, p.student % z.w);
            let sims: Vec<f64> = (0..zt.h * zt.w).map(|q| cosine(&s, &zt.vector(0, q / zt.w, q % zt.w))).collect();
            let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(p.similarity, best);
            prop_assert_eq!(sims.iter().position(|&v| v == best), Some(p.teacher));
        }
        prop_assert!(pairs.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        let pc = patch_corr_loss(&z, &zt, k).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&pc));
    }

    #[test]
    fn rotation_loss_is_shift_invariant_and_nonnegative(
        logits in prop::collection::vec(-5.0..5.0f64, 12),
        shift in -50.0..50.0f64,
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        let a = RotationLogits { batch: 3, data: logits.clone() };
        let b = RotationLogits { batch: 3, data: logits.iter().map(|v| v + shift).collect() };
        let la = rotation_loss(&a, &labels).unwrap();
        prop_assert!(la >= 0.0);
        prop_assert!((la - rotation_loss(&b, &labels).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn confident_correct_logits_give_near_zero_loss() {
    let logits = RotationLogits::<f64> { batch: 2, data: vec![40.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 40.0] };
    assert!(rotation_loss(&logits, &[0, 3]).unwrap() < 1e-15);
    let wrong = rotation_loss(&logits, &[1, 1]).unwrap();
    assert!((wrong - 40.0).abs() < 1e-9);
}
