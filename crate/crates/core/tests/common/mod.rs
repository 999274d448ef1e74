//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use alhp::diff::{Tape, Tensor, Var};
use alhp::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Relative error between two gradient tensors: `||a - b|| / max(||a||, ||b||)`,
/// or the absolute difference norm when both are (near) zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences of `f` with respect to every input element.
pub fn numeric_grads(
    f: &dyn Fn(&[Tensor<f64>]) -> f64,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Vec<Vec<f64>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            g[j] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Builds `build` on fresh input leaves, reduces the output against a fixed
/// random projection to a scalar, and compares the tape gradient of every
/// input with central differences (h = 1e-5). Returns the worst relative error.
pub fn gradcheck<F>(build: F, inputs: &[Tensor<f64>], seed: u64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // Probe output shape once to size the projection.
    let out_len = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let y = build(&mut t, &vars).unwrap();
        t.value(y).len()
    };
    let mut r = rng(seed ^ 0x5eed);
    let proj: Vec<f64> = (0..out_len).map(|_| r.random_range(-1.0..1.0)).collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = build(&mut t, &vars).unwrap();
        t.value(y).data().iter().zip(&proj).map(|(a, b)| a * b).sum()
    };

    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
    let y = build(&mut t, &vars).unwrap();
    let shape = t.value(y).shape().to_vec();
    let seed_t = Tensor::new(shape, proj.clone()).unwrap();
    let back = t.backward_from(vec![(y, seed_t)]).unwrap();

    let numeric = numeric_grads(&eval, inputs, 1e-5);
    let mut worst = 0.0f64;
    for (v, num) in vars.iter().zip(&numeric) {
        let analytic = back
            .input(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; num.len()]);
        worst = worst.max(rel_err(&analytic, num));
    }
    worst
}

/// Average precision of a ranked binary relevance list, straight from the
/// definition: mean of precision@k over the ranks k holding a relevant item.
pub fn brute_ap(rel: &[bool]) -> f64 {
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 0..rel.len() {
        if rel[k] {
            let hits = rel[..=k].iter().filter(|&&r| r).count();
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / total as f64
}

/// Softmax computed directly from the definition, in f64.
pub fn brute_softmax(z: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Pearson chi-square goodness-of-fit p-value against a uniform distribution.
pub fn chi_square_uniform_p(counts: &[u64]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let n: u64 = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Kind-3 bandit: reward 1 iff the policy contains op kind 3 anywhere.
/// Returns `(P(policy contains kind 3), mean per-slot P(kind 3))` after
/// `updates` rounds of `d` policies, estimated from 1,000 fresh samples.
pub fn kind_bandit(seed: u64, updates: usize, d: usize) -> (f64, f64) {
    use alhp::augment::OpKind;
    use alhp::controller::{ControllerConfig, ControllerState};
    let target = OpKind::ALL[3];
    let mut r = rng(seed);
    let mut c = ControllerState::<f32>::new(ControllerConfig::default(), &mut r);
    for _ in 0..updates {
        let b = c.sample_policies(d, &mut r).unwrap();
        let rewards: Vec<f64> = b
            .policies
            .iter()
            .map(|p| if p.ops().any(|o| o.kind() == target) { 1.0 } else { 0.0 })
            .collect();
        c.update(&b, &rewards).unwrap();
    }
    let probe = c.sample_policies(1000, &mut r).unwrap();
    let mut any = 0usize;
    let mut slot_mass = 0.0;
    for (p, actions) in probe.policies.iter().zip(&probe.actions) {
        if p.ops().any(|o| o.kind() == target) {
            any += 1;
        }
        let dists = c.distributions(actions).unwrap();
        slot_mass += (0..30).step_by(3).map(|t| dists[t][3]).sum::<f64>() / 10.0;
    }
    (any as f64 / 1000.0, slot_mass / 1000.0)
}

/// Small synthetic dataset on disk, rendered at `res`.
pub fn tiny_data(dir: &std::path::Path, places: usize, variants: usize, res: u32, seed: u64) -> std::path::PathBuf {
    use alhp::harness::synth::{gen_data, SynthConfig};
    gen_data(
        &SynthConfig {
            places,
            variants,
            resolution: res,
            seed,
        },
        dir,
    )
    .unwrap();
    dir.to_path_buf()
}

/// Training config for a narrow network at 32×32, fast enough for tests.
pub fn tiny_config(data: &std::path::Path, mode: alhp::trainer::Mode, seed: u64) -> alhp::trainer::TrainConfig {
    let mut c = alhp::trainer::TrainConfig {
        mode,
        seed,
        data: Some(data.to_path_buf()),
        generations: 1,
        epochs: 1,
        policies: 2,
        positives: 3,
        negatives: 4,
        ..Default::default()
    };
    c.net.resolution = 32;
    c.net.widths = vec![8, 8, 12, 16];
    c.net.clusters = 4;
    c
}

/// Direct per-pixel VLAD over the cells `rows × cols` of a `[D,H,W]` map.
pub fn brute_vlad(
    f: &Tensor<f64>,
    a: &Tensor<f64>,
    c: &Tensor<f64>,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> Vec<f64> {
    let (d, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let k = a.shape()[0];
    let mut out = vec![0.0; k * d];
    for y in rows {
        for x in cols.clone() {
            for kk in 0..k {
                let weight = a.data()[kk * h * w + y * w + x];
                for dd in 0..d {
                    let fv = f.data()[dd * h * w + y * w + x];
                    out[kk * d + dd] += weight * (fv - c.data()[kk * d + dd]);
                }
            }
        }
    }
    out
}

/// Intra-normalizes each cluster row, then L2-normalizes the whole vector.
pub fn brute_normalize(m: &[f64], k: usize) -> Vec<f64> {
    let d = m.len() / k;
    let mut v: Vec<f64> = Vec::with_capacity(m.len());
    for row in m.chunks(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.extend(row.iter().map(|x| if n < 1e-12 { 0.0 } else { x / n }));
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| if n < 1e-12 { 0.0 } else { x / n }).collect()
}

/// Softmax over the channel axis of a `[K,H,W]` map.
pub fn softmax_channels(logits: &Tensor<f64>) -> Tensor<f64> {
    let (k, hw) = (logits.shape()[0], logits.shape()[1] * logits.shape()[2]);
    let mut out = logits.clone();
    for p in 0..hw {
        let z: Vec<f64> = (0..k).map(|kk| logits.data()[kk * hw + p]).collect();
        let s = brute_softmax(&z);
        for kk in 0..k {
            out.data_mut()[kk * hw + p] = s[kk];
        }
    }
    out
}
