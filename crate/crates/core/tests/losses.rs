mod common;

use brnet::losses::{cons_loss, dec_loss, mask_bce, rmask_loss, total_loss, LossBundle, LossWeights};
use brnet::mask_algebra::{BinaryMask, SoftMask};
use proptest::prelude::*;

const LN2: f64 = std::f64::consts::LN_2;

fn bits(side: usize) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(0u8..2, side * side).prop_map(move |b| BinaryMask::from_bits(side, side, b).unwrap())
}

fn probs(side: usize) -> impl Strategy<Value = SoftMask> {
    proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0], side * side)
        .prop_map(move |v| SoftMask::from_values(side, side, v).unwrap())
}

fn half(side: usize) -> SoftMask {
    SoftMask::filled(side, side, 0.5).unwrap()
}

/// Softens a binary mask into a prediction that saturates the clamp.
fn saturated(m: &BinaryMask) -> SoftMask {
    m.to_soft()
}

proptest! {
    #[test]
    fn bce_is_finite_and_bounded(p in probs(4), t in bits(4)) {
        let v = mask_bce(&p, &t).unwrap();
        prop_assert!(v.is_finite() && v >= 0.0);
        prop_assert!(v <= -(common::EPS.ln()) + 1e-9);
    }

    #[test]
    fn dec_and_rmask_ignore_instance_order(
        preds in proptest::collection::vec((probs(3), probs(3), bits(3), bits(3)), 1..5),
    ) {
        let p: Vec<(SoftMask, SoftMask)> = preds.iter().map(|x| (x.0.clone(), x.1.clone())).collect();
        let t: Vec<(BinaryMask, BinaryMask)> = preds.iter().map(|x| (x.2.clone(), x.3.clone())).collect();
        let (mut pr, mut tr) = (p.clone(), t.clone());
        pr.reverse();
        tr.reverse();
        let a = dec_loss(std::slice::from_ref(&p), std::slice::from_ref(&t)).unwrap();
        let b = dec_loss(&[pr], &[tr]).unwrap();
        prop_assert!((a - b).abs() < 1e-12);

        let r: Vec<SoftMask> = p.iter().map(|x| x.0.clone()).collect();
        let m: Vec<BinaryMask> = t.iter().map(|x| x.0.clone()).collect();
        let (mut rr, mut mr) = (r.clone(), m.clone());
        rr.reverse();
        mr.reverse();
        prop_assert!((rmask_loss(&[r], &[m]).unwrap() - rmask_loss(&[rr], &[mr]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn consistency_equals_refined_loss_when_saturated(o in bits(4), n in bits(4)) {
        // ground truth amodal = o xor n, every prediction saturated at the truth
        let amodal = o.xor(&n).unwrap();
        let refined = saturated(&amodal);
        let cons = cons_loss(&[vec![refined.clone()]], &[vec![(saturated(&o), saturated(&n))]]).unwrap();
        let rmask = rmask_loss(&[vec![refined]], &[vec![amodal]]).unwrap();
        prop_assert!((cons - rmask).abs() < 1e-9);
        prop_assert!(cons < 1e-6);
    }
}

#[test]
fn uniform_predictions_cost_log_two_per_term() {
    let t = BinaryMask::from_fn(4, 4, |y, x| (y + x) % 3 == 0).unwrap();
    let dec = dec_loss(&[vec![(half(4), half(4))], vec![(half(4), half(4)); 3]], &[
        vec![(t.clone(), t.clone())],
        vec![(t.clone(), t.clone()); 3],
    ])
    .unwrap();
    assert!((dec - 2.0 * LN2).abs() < 1e-12);
    let r = rmask_loss(&[vec![half(4); 2]], &[vec![t.clone(); 2]]).unwrap();
    assert!((r - LN2).abs() < 1e-12);
}

#[test]
fn xor_annihilation_gives_zero_consistency() {
    let ones = SoftMask::filled(3, 3, 1.0).unwrap();
    let zeros = SoftMask::filled(3, 3, 0.0).unwrap();
    let v = cons_loss(&[vec![zeros]], &[vec![(ones.clone(), ones)]]).unwrap();
    assert!(v < 1e-6);
}

#[test]
fn mismatched_sizes_are_rejected() {
    let t = BinaryMask::new(3, 3).unwrap();
    assert!(mask_bce(&half(4), &t).is_err());
    assert!(rmask_loss(&[vec![half(3)]], &[vec![]]).is_err());
    assert!(dec_loss(&[vec![(half(3), half(3))]], &[]).is_err());
}

#[test]
fn weighted_total() {
    let parts = LossBundle {
        l_cls: 0.25,
        l_reg: 0.25,
        l_cmask: 0.5,
        l_dec: 2.0,
        l_rmask: 3.0,
        l_cons: 4.0,
        ..LossBundle::default()
    };
    assert_eq!(total_loss(parts, &LossWeights::default()).total, 10.0);
    let none = LossWeights {
        lambda_dec: 0.0,
        lambda_rmask: 0.0,
        lambda_cons: 0.0,
    };
    let b = total_loss(parts, &none);
    assert_eq!(b.total, b.l_coarse);
    assert_eq!(b.l_coarse, 1.0);
    assert!(LossWeights { lambda_dec: -1.0, ..none }.validate().is_err());
}
