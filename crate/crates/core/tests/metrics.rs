mod common;

use boundary_seg::metrics::{dice_score, hausdorff, hausdorff_with, jaccard, summarize, BinaryMask, HausdorffVariant};
use boundary_seg::Error;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn mask_pair(seed: u64) -> (BinaryMask, BinaryMask) {
    let mut r = rng(seed);
    let pa = r.gen_range(0.02..0.6);
    let pb = r.gen_range(0.02..0.6);
    (random_mask(&mut r, 16, 16, pa), random_mask(&mut r, 16, 16, pb))
}

#[test]
fn metrics_agree_exactly_with_brute_force_on_50_pairs() {
    for seed in 0..50 {
        let (a, b) = mask_pair(seed);
        assert_eq!(dice_score(&a, &b).unwrap(), brute_dice(&a, &b), "seed {seed}");
        assert_eq!(jaccard(&a, &b).unwrap(), brute_jaccard(&a, &b), "seed {seed}");
        assert_eq!(hausdorff(&a, &b).unwrap(), brute_hausdorff(&a, &b).unwrap(), "seed {seed}");
    }
}

#[test]
fn dice_jaccard_identity_on_50_pairs() {
    for seed in 0..50 {
        let (a, b) = mask_pair(1000 + seed);
        let d = dice_score(&a, &b).unwrap();
        let j = jaccard(&a, &b).unwrap();
        assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12, "seed {seed}");
    }
}

#[test]
fn hausdorff_percentile_matches_sorted_pool() {
    for seed in 0..20 {
        let (a, b) = mask_pair(2000 + seed);
        let mut all = brute_directed(&a, &b);
        all.sort_by(f64::total_cmp);
        let pos = 0.95 * (all.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        let want = all[lo] + (all[hi] - all[lo]) * (pos - lo as f64);
        let got = hausdorff_with(&a, &b, HausdorffVariant::Percentile95).unwrap();
        assert!((got - want).abs() <= 1e-12, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn empty_mask_conventions() {
    let e = BinaryMask::empty(4, 4);
    let mut f = BinaryMask::empty(4, 4);
    f.set(1, 2, true);
    assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
    assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
    assert_eq!(hausdorff(&e, &e).unwrap(), 0.0);
    assert!(matches!(hausdorff(&e, &f), Err(Error::Undefined(_))));
    assert_eq!(dice_score(&e, &f).unwrap(), 0.0);

    let s = summarize(&[e.clone(), f.clone()], &[f.clone(), f.clone()], HausdorffVariant::Max).unwrap();
    assert_eq!(s.hausdorff_undefined, 1);
    assert_eq!(s.hausdorff, (0.0, 0.0));
    assert_eq!(s.dice, (0.5, 0.5));
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = BinaryMask::empty(4, 4);
    let b = BinaryMask::empty(4, 5);
    assert!(dice_score(&a, &b).is_err());
    assert!(hausdorff(&a, &b).is_err());
}

fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(any::<bool>(), h * w).prop_map(move |bits| BinaryMask::new(h, w, bits).unwrap())
}

fn shifted(m: &BinaryMask, dy: usize, dx: usize, pad: usize) -> BinaryMask {
    let mut out = BinaryMask::empty(m.height() + pad, m.width() + pad);
    for y in 0..m.height() {
        for x in 0..m.width() {
            out.set(y + dy, x + dx, m.get(y, x));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric(a in arb_mask(9, 7), b in arb_mask(9, 7)) {
        prop_assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&b, &a).unwrap());
        prop_assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
        match (hausdorff(&a, &b), hausdorff(&b, &a)) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "asymmetric definedness"),
        }
    }

    #[test]
    fn hausdorff_matches_brute_force(a in arb_mask(10, 10), b in arb_mask(10, 10)) {
        match brute_hausdorff(&a, &b) {
            Some(d) => prop_assert_eq!(hausdorff(&a, &b).unwrap(), d),
            None => prop_assert!(hausdorff(&a, &b).is_err()),
        }
    }

    #[test]
    fn translation_invariance(a in arb_mask(8, 8), b in arb_mask(8, 8), dy in 0usize..4, dx in 0usize..4) {
        let (sa, sb) = (shifted(&a, dy, dx, 4), shifted(&b, dy, dx, 4));
        prop_assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&sa, &sb).unwrap());
        prop_assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&sa, &sb).unwrap());
        prop_assert_eq!(hausdorff(&a, &b).ok(), hausdorff(&sa, &sb).ok());
    }

    #[test]
    fn self_comparison_is_perfect(a in arb_mask(6, 11)) {
        prop_assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
    }
}
