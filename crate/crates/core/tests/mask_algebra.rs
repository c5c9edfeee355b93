mod common;

use brnet::mask_algebra::{binarize, decompose_instances, mask_iou, soft_xor_merge, BinaryMask, SoftMask};
use common::{decompose_oracle, random_masks, to_bools};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene(seed: u64, count: usize, side: usize) -> Vec<BinaryMask> {
    random_masks(&mut ChaCha8Rng::seed_from_u64(seed), side, side, count)
}

proptest! {
    #[test]
    fn decomposition_matches_pixel_counts(seed in any::<u64>(), count in 1usize..7, side in 1usize..12) {
        let masks = scene(seed, count, side);
        let got = decompose_instances(&masks).unwrap();
        for ((o, n), (wo, wn)) in got.iter().zip(decompose_oracle(&masks)) {
            prop_assert_eq!(to_bools(o), wo);
            prop_assert_eq!(to_bools(n), wn);
        }
    }

    #[test]
    fn decomposition_follows_instance_order(seed in any::<u64>(), count in 2usize..6) {
        let masks = scene(seed, count, 10);
        let mut rev = masks.clone();
        rev.reverse();
        let mut a = decompose_instances(&masks).unwrap();
        let b = decompose_instances(&rev).unwrap();
        a.reverse();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn overlaps_are_shared(seed in any::<u64>(), count in 2usize..6) {
        // every overlap pixel of one instance lies inside another instance
        let masks = scene(seed, count, 10);
        let parts = decompose_instances(&masks).unwrap();
        for (i, (o, _)) in parts.iter().enumerate() {
            for y in 0..10 {
                for x in 0..10 {
                    if o.get(y, x) {
                        prop_assert!(masks.iter().enumerate().any(|(j, m)| j != i && m.get(y, x)));
                    }
                }
            }
        }
    }

    #[test]
    fn soft_merge_stays_in_unit_range(vals in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..40)) {
        let n = vals.len();
        let a = SoftMask::from_values(1, n, vals.iter().map(|v| v.0).collect()).unwrap();
        let b = SoftMask::from_values(1, n, vals.iter().map(|v| v.1).collect()).unwrap();
        let m = soft_xor_merge(&a, &b).unwrap();
        prop_assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn iou_bounds(seed in any::<u64>()) {
        let m = scene(seed, 2, 8);
        let v = mask_iou(&m[0], &m[1]).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(mask_iou(&m[0], &m[0]).unwrap(), 1.0);
    }
}

#[test]
fn binarize_then_soften_is_identity_on_binary_masks() {
    let m = &scene(3, 1, 9)[0];
    assert_eq!(&binarize(&m.to_soft(), 0.5).unwrap(), m);
}

#[test]
fn single_instance_has_no_overlap() {
    let m = scene(4, 1, 12);
    let parts = decompose_instances(&m).unwrap();
    assert!(parts[0].0.is_empty());
    assert_eq!(parts[0].1, m[0]);
}
