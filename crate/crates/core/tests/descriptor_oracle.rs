mod common;

use alhp::augment::{apply_op, Normalizer, OpKind, OpSpec, PROB_BINS};
use alhp::descriptor::{
    assemble_regions, quarter_residuals, region_residuals, NetConfig, Region, RetrievalNet,
};
use alhp::diff::{Tape, Tensor, Var};
use common::{brute_normalize, brute_vlad, gradcheck, random_tensor, rel_err, rng, softmax_channels};
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::Rng;

struct Case {
    f: Tensor<f64>,
    a: Tensor<f64>,
    c: Tensor<f64>,
}

fn case(seed: u64, d: usize, k: usize, h: usize, w: usize) -> Case {
    let mut r = rng(seed);
    let f = random_tensor(&mut r, &[d, h, w], -1.0, 1.0);
    let logits = random_tensor(&mut r, &[k, h, w], -2.0, 2.0);
    let c = random_tensor(&mut r, &[k, d], -1.0, 1.0);
    Case {
        f,
        a: softmax_channels(&logits),
        c,
    }
}

fn run_quarters(cs: &Case) -> (Tape<f64>, [Var; 4]) {
    let mut t = Tape::new();
    let f = t.constant(cs.f.clone());
    let a = t.constant(cs.a.clone());
    let c = t.constant(cs.c.clone());
    let q = quarter_residuals(&mut t, f, a, c).unwrap();
    (t, q)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn quarter_residuals_match_per_pixel_oracle() {
    for seed in 0..10 {
        let cs = case(seed, 3, 2, 4, 6);
        let (t, q) = run_quarters(&cs);
        let spans = [(0..2, 0..3), (0..2, 3..6), (2..4, 0..3), (2..4, 3..6)];
        for (i, (rows, cols)) in spans.into_iter().enumerate() {
            let want = brute_vlad(&cs.f, &cs.a, &cs.c, rows, cols);
            assert!(max_abs(t.value(q[i]).data(), &want) <= 1e-5);
        }
    }
}

#[test]
fn all_nine_regions_match_direct_implementation() {
    for seed in 0..10 {
        let cs = case(100 + seed, 5, 2, 4, 4);
        let (mut t, q) = run_quarters(&cs);
        let regions = assemble_regions(&mut t, q).unwrap();
        let spans = [
            (0..2, 0..2),
            (0..2, 2..4),
            (2..4, 0..2),
            (2..4, 2..4),
            (0..2, 0..4),
            (2..4, 0..4),
            (0..4, 0..2),
            (0..4, 2..4),
            (0..4, 0..4),
        ];
        for (r, (rows, cols)) in Region::ALL.iter().zip(spans) {
            let want = brute_normalize(&brute_vlad(&cs.f, &cs.a, &cs.c, rows, cols), 2);
            let got = t.value(regions[r.index()]).data();
            assert!(max_abs(got, &want) <= 1e-5, "{r:?}");
            let n: f64 = got.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn single_cluster_with_unit_assignment_sums_residuals() {
    let mut r = rng(7);
    let f = random_tensor(&mut r, &[3, 4, 4], -1.0, 1.0);
    let c = random_tensor(&mut r, &[1, 3], -1.0, 1.0);
    let cs = Case {
        f: f.clone(),
        a: Tensor::full(&[1, 4, 4], 1.0),
        c: c.clone(),
    };
    let (t, q) = run_quarters(&cs);
    for dd in 0..3 {
        let mut want = 0.0;
        for y in 0..2 {
            for x in 0..2 {
                want += f.data()[dd * 16 + y * 4 + x] - c.data()[dd];
            }
        }
        assert!((t.value(q[0]).data()[dd] - want).abs() < 1e-12);
    }
}

#[test]
fn features_at_their_centroid_give_zero_residual() {
    let c = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.5, 0.4, 0.0]).unwrap();
    let f = Tensor::from_fn(&[3, 4, 4], |i| c.data()[3 + i / 16]);
    let a = Tensor::from_fn(&[2, 4, 4], |i| if i / 16 == 1 { 1.0 } else { 0.0 });
    let (t, q) = run_quarters(&Case { f, a, c });
    for v in q {
        assert!(t.value(v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn summed_quarters_equal_whole_map_vlad() {
    for seed in 0..5 {
        let cs = case(200 + seed, 4, 3, 6, 4);
        let (mut t, q) = run_quarters(&cs);
        let raw = region_residuals(&mut t, q).unwrap();
        let want = brute_vlad(&cs.f, &cs.a, &cs.c, 0..6, 0..4);
        assert!(max_abs(t.value(raw[Region::Global.index()]).data(), &want) <= 1e-10);
    }
}

#[test]
fn halves_and_global_are_exact_sums_of_quarters() {
    let cs = case(300, 4, 2, 4, 4);
    let (mut t, q) = run_quarters(&cs);
    let raw = region_residuals(&mut t, q).unwrap();
    let v = |i: usize| t.value(raw[i]).data().to_vec();
    let sum = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
    assert!(max_abs(&v(4), &sum(&v(0), &v(1))) <= 1e-6);
    assert!(max_abs(&v(5), &sum(&v(2), &v(3))) <= 1e-6);
    assert!(max_abs(&v(6), &sum(&v(0), &v(2))) <= 1e-6);
    assert!(max_abs(&v(7), &sum(&v(1), &v(3))) <= 1e-6);
    assert!(max_abs(&v(8), &sum(&v(4), &v(5))) <= 1e-6);
}

#[test]
fn mirroring_quarters_mirrors_regions() {
    let cs = case(400, 3, 2, 4, 4);
    let (mut t, q) = run_quarters(&cs);
    let a = assemble_regions(&mut t, q).unwrap();
    let b = assemble_regions(&mut t, [q[1], q[0], q[3], q[2]]).unwrap();
    let val = |v: Var| t.value(v).data().to_vec();
    // TL<->TR, BL<->BR, top/bottom fixed, left<->right, global fixed
    for (i, j) in [(0, 1), (1, 0), (2, 3), (3, 2), (4, 4), (5, 5), (6, 7), (7, 6), (8, 8)] {
        assert!(max_abs(&val(b[i]), &val(a[j])) < 1e-12, "{i} vs {j}");
    }
}

#[test]
fn region_pipeline_gradients_match_finite_differences() {
    for seed in 0..5 {
        let cs = case(500 + seed, 3, 2, 4, 4);
        let logits = random_tensor(&mut rng(seed), &[2, 4, 4], -1.0, 1.0);
        let err = gradcheck(
            |t, v| {
                let a = t.softmax(v[1], 0)?;
                let q = quarter_residuals(t, v[0], a, v[2])?;
                let r = assemble_regions(t, q)?;
                t.concat(&r, 0)
            },
            &[cs.f.clone(), logits, cs.c.clone()],
            seed,
        );
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

fn tiny() -> NetConfig {
    NetConfig {
        resolution: 8,
        widths: vec![3, 4],
        pooled_stages: 1,
        clusters: 2,
        assign_scale: 2.0,
        normalize_features: true,
    }
}

#[test]
fn backbone_input_gradient_matches_finite_differences() {
    let net = RetrievalNet::<f64>::new(tiny(), &mut rng(11)).unwrap();
    let img = random_tensor(&mut rng(12), &[3, 8, 8], -1.0, 1.0);
    let err = gradcheck(
        |t, v| {
            let b = net.bind(t, false);
            net.describe_on_tape(t, &b, v[0])
        },
        &[img],
        3,
    );
    assert!(err < 1e-3, "{err:e}");
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut net = RetrievalNet::<f64>::new(tiny(), &mut rng(13)).unwrap();
    let img = random_tensor(&mut rng(14), &[3, 8, 8], -1.0, 1.0);
    let dim = net.config().descriptor_dim();
    let proj = random_tensor(&mut rng(15), &[9, dim], -1.0, 1.0);
    let objective = |net: &RetrievalNet<f64>| -> f64 {
        let d = net.describe(&img).unwrap();
        d.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };
    let mut t = Tape::new();
    let b = net.bind(&mut t, true);
    let x = t.constant(img.clone());
    let y = net.describe_on_tape(&mut t, &b, x).unwrap();
    let grads = t.backward_from(vec![(y, proj.clone())]).unwrap();
    let grads = grads.params_for(net.params().id());

    let ids: Vec<_> = net.params().ids().collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in ids {
        let n = net.params().get(id).len();
        let g = grads.get(id).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; n]);
        analytic.extend(g);
        for j in 0..n {
            let orig = net.params().get(id).data()[j];
            net.params_mut().get_mut(id).data_mut()[j] = orig + 1e-5;
            let plus = objective(&net);
            net.params_mut().get_mut(id).data_mut()[j] = orig - 1e-5;
            let minus = objective(&net);
            net.params_mut().get_mut(id).data_mut()[j] = orig;
            numeric.push((plus - minus) / 2e-5);
        }
    }
    let err = rel_err(&analytic, &numeric);
    assert!(err < 1e-3, "{err:e}");
}

#[test]
fn zero_degree_rotation_leaves_descriptor_unchanged() {
    let net = RetrievalNet::<f64>::new(
        NetConfig {
            resolution: 16,
            widths: vec![4, 6],
            pooled_stages: 2,
            clusters: 3,
            assign_scale: 5.0,
            normalize_features: true,
        },
        &mut rng(16),
    )
    .unwrap();
    let mut r = rng(17);
    let img = RgbImage::from_fn(16, 16, |_, _| Rgb([r.random(), r.random(), r.random()]));
    let rot = OpSpec::new(OpKind::Rotate, PROB_BINS - 1, 0).unwrap();
    let rotated = apply_op(&img, &rot, &mut rng(18), None).unwrap();
    let norm = Normalizer::default();
    let a = net.describe(&norm.to_tensor(&img)).unwrap();
    let b = net.describe(&norm.to_tensor(&rotated)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn descriptor_regions_are_unit_norm(seed in any::<u64>()) {
        let net = RetrievalNet::<f64>::new(tiny(), &mut rng(seed)).unwrap();
        let img = random_tensor(&mut rng(seed ^ 9), &[3, 8, 8], -1.0, 1.0);
        let d = net.describe(&img).unwrap();
        for r in Region::ALL {
            let n: f64 = d.region(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-5 || n == 0.0);
        }
    }
}
