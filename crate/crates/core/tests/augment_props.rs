mod common;

use alhp::augment::kernels::{hflip, invert};
use alhp::augment::{
    apply_op, apply_policy, search_space_cardinality, OpKind, OpSpec, Policy, MAG_BINS, PROB_BINS,
};
use common::{chi_square_uniform_p, rng};
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::Rng;

fn noise_image(seed: u64, w: u32, h: u32) -> RgbImage {
    let mut r = rng(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([r.random(), r.random(), r.random()]))
}

#[test]
fn every_kind_and_bin_preserves_dimensions() {
    let img = noise_image(1, 23, 17);
    let partner = noise_image(2, 9, 31);
    for kind in OpKind::ALL {
        for bin in 0..MAG_BINS {
            let spec = OpSpec::new(kind, PROB_BINS - 1, bin).unwrap();
            let out = apply_op(&img, &spec, &mut rng(bin as u64), Some(&partner)).unwrap();
            assert_eq!(out.dimensions(), img.dimensions(), "{kind:?} bin {bin}");
        }
    }
}

#[test]
fn zero_probability_is_byte_exact_identity() {
    let img = noise_image(3, 20, 20);
    let partner = noise_image(4, 20, 20);
    for kind in OpKind::ALL {
        for bin in 0..MAG_BINS {
            let spec = OpSpec::new(kind, 0, bin).unwrap();
            let out = apply_op(&img, &spec, &mut rng(7), Some(&partner)).unwrap();
            assert_eq!(out.as_raw(), img.as_raw(), "{kind:?} bin {bin}");
        }
    }
    let (out, _) = apply_policy(&img, &Policy::identity(), &mut rng(8), &[]).unwrap();
    assert_eq!(out.as_raw(), img.as_raw());
}

#[test]
fn invert_is_an_involution() {
    let img = noise_image(5, 31, 11);
    assert_eq!(invert(&invert(&img)).as_raw(), img.as_raw());
}

#[test]
fn pixel_only_kinds_commute_with_horizontal_flip() {
    let img = noise_image(6, 24, 18);
    for kind in OpKind::ALL.into_iter().filter(|k| k.is_color_only()) {
        for bin in [0, 4, 9] {
            let spec = OpSpec::new(kind, PROB_BINS - 1, bin).unwrap();
            let a = hflip(&apply_op(&img, &spec, &mut rng(9), None).unwrap());
            let b = apply_op(&hflip(&img), &spec, &mut rng(9), None).unwrap();
            assert_eq!(a.as_raw(), b.as_raw(), "{kind:?} bin {bin}");
        }
    }
}

#[test]
fn same_seed_same_output() {
    let img = noise_image(10, 32, 32);
    let pool = vec![noise_image(11, 32, 32), noise_image(12, 32, 32)];
    let policy = Policy::random(&mut rng(13));
    let a = apply_policy(&img, &policy, &mut rng(14), &pool).unwrap();
    let b = apply_policy(&img, &policy, &mut rng(14), &pool).unwrap();
    assert_eq!(a.1, b.1);
    assert_eq!(a.0.as_raw(), b.0.as_raw());
}

#[test]
fn sub_policy_choice_is_uniform() {
    let img = noise_image(15, 4, 4);
    let policy = Policy::identity();
    let mut r = rng(16);
    let mut counts = [0u64; 5];
    for _ in 0..10_000 {
        let (_, idx) = apply_policy(&img, &policy, &mut r, &[]).unwrap();
        counts[idx] += 1;
    }
    let p = chi_square_uniform_p(&counts);
    assert!(p > 0.01, "counts {counts:?}, p = {p}");
}

#[test]
fn search_space_has_140_choices_per_slot() {
    let s = search_space_cardinality();
    assert_eq!(s.per_slot, 140);
    assert_eq!(s.slots, 10);
    assert_eq!(s.total(), 140u128.pow(10));
    assert!((s.log10_total() - 10.0 * 140f64.log10()).abs() < 1e-9);
}

#[test]
fn pairing_without_partner_is_an_error() {
    let img = noise_image(17, 8, 8);
    let spec = OpSpec::new(OpKind::SamplePairing, 5, 5).unwrap();
    assert!(apply_op(&img, &spec, &mut rng(0), None).is_err());
    assert!(OpSpec::new(OpKind::Rotate, PROB_BINS, 0).is_err());
    assert!(OpSpec::new(OpKind::Rotate, 0, MAG_BINS).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_op_keeps_shape(kind in 0u8..14, prob in 0u8..11, mag in 0u8..10,
                          w in 1u32..24, h in 1u32..24, seed in any::<u64>()) {
        let img = noise_image(seed, w, h);
        let partner = noise_image(seed ^ 1, 5, 5);
        let spec = OpSpec::new(OpKind::try_from(kind).unwrap(), prob, mag).unwrap();
        let out = apply_op(&img, &spec, &mut rng(seed), Some(&partner)).unwrap();
        prop_assert_eq!(out.dimensions(), (w, h));
    }

    #[test]
    fn policy_text_round_trips(seed in any::<u64>()) {
        let p = Policy::random(&mut rng(seed));
        let back: Policy = p.to_string().parse().unwrap();
        prop_assert_eq!(back, p);
    }
}
