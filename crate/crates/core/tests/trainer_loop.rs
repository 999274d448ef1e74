mod common;

use std::time::Instant;

use alhp::augment::Policy;
use alhp::harness::checkpoint::Checkpoint;
use alhp::trainer::metrics::{read_metrics, METRICS_FILE};
use alhp::trainer::{continue_run, resume, run, Mode, Precision, RunOutput, RunState, TrainConfig, TrainData};
use alhp::{Error, Real};
use common::{tiny_config, tiny_data};
use tempfile::TempDir;

fn data_dir(places: usize, seed: u64) -> TempDir {
    let dir = TempDir::new().unwrap();
    tiny_data(dir.path(), places, 3, 32, seed);
    dir
}

fn load<T: Real>(cfg: &TrainConfig) -> TrainData<T> {
    TrainData::load(cfg.data.as_ref().unwrap(), cfg.radius, cfg.net.resolution).unwrap()
}

fn train<T: Real>(cfg: TrainConfig) -> (RunState<T>, RunOutput) {
    let data = load::<T>(&cfg);
    let mut out = RunOutput::in_memory();
    let (state, _) = continue_run(RunState::<T>::new(cfg).unwrap(), &data, &mut out).unwrap();
    (state, out)
}

fn f64_config(data: &std::path::Path, mode: Mode, seed: u64) -> TrainConfig {
    let mut c = tiny_config(data, mode, seed);
    c.precision = Precision::F64;
    c
}

#[test]
fn identity_policy_with_one_draw_is_bit_identical_to_plain_training() {
    let d = data_dir(6, 1);
    let mut fixed = f64_config(d.path(), Mode::Fixed, 7);
    fixed.policies = 1;
    fixed.generations = 2;
    fixed.fixed_policy = Policy::identity();
    let mut base = fixed.clone();
    base.mode = Mode::Baseline;

    let (a, out_a) = train::<f64>(fixed);
    let (b, out_b) = train::<f64>(base);
    assert_eq!(a.net.params().fingerprint(), b.net.params().fingerprint());
    assert_eq!(out_a.steps.len(), out_b.steps.len());
    for (x, y) in out_a.steps.iter().zip(&out_b.steps) {
        let bits = |v: &[Option<f64>]| v.iter().map(|l| l.map(f64::to_bits)).collect::<Vec<_>>();
        assert_eq!(bits(&x.policy_losses), bits(&y.policy_losses), "step {}", x.step);
    }
}

#[test]
fn every_step_records_one_loss_per_policy() {
    let d = data_dir(5, 2);
    let mut cfg = tiny_config(d.path(), Mode::Adversarial, 3);
    cfg.policies = 3;
    let (_, out) = train::<f32>(cfg);
    assert!(!out.steps.is_empty());
    for s in &out.steps {
        assert_eq!(s.policy_losses.len(), 3);
        assert_eq!(s.hard_losses.len(), 3);
        assert!(s.controller_entropy.is_some());
        assert!(s.policy_losses.iter().all(|l| l.is_some_and(f64::is_finite)));
    }
}

#[test]
fn first_generation_has_no_soft_term_and_second_does() {
    let d = data_dir(5, 4);
    let mut cfg = tiny_config(d.path(), Mode::Random, 5);
    cfg.generations = 2;
    let (_, out) = train::<f32>(cfg);
    for s in &out.steps {
        if s.generation == 1 {
            assert_eq!(s.alpha, 0.0);
            assert!(s.soft_losses.iter().all(Option::is_none));
        } else {
            assert_eq!(s.alpha, 0.5);
            assert!(s.soft_losses.iter().all(Option::is_some));
        }
    }
}

#[test]
fn training_loss_decreases_on_small_benchmark() {
    let d = data_dir(8, 5);
    let mut decreased = 0;
    for seed in 0..3 {
        let mut cfg = tiny_config(d.path(), Mode::Adversarial, seed);
        cfg.epochs = 4;
        let (_, out) = train::<f32>(cfg);
        let first = out.epochs.first().unwrap().mean_loss;
        let last = out.epochs.last().unwrap().mean_loss;
        if last < first {
            decreased += 1;
        }
    }
    assert!(decreased >= 2, "loss fell in only {decreased}/3 seeds");
}

#[test]
fn snapshot_is_frozen_while_theta_moves() {
    let d = data_dir(5, 6);
    let cfg = tiny_config(d.path(), Mode::Adversarial, 1);
    let data = load::<f32>(&cfg);
    let mut state = RunState::<f32>::new(cfg).unwrap();
    let mut out = RunOutput::in_memory();
    state.run_generation(&data, &mut out).unwrap();
    let snap = state.snapshot.clone().unwrap();
    assert_eq!(snap.fingerprint(), state.net.params().fingerprint());

    let snap_descs = snap.net.describe_all(&data.clean).unwrap();
    let tuples = state.mine_epoch(&data, Some(&snap_descs)).unwrap();
    for t in tuples.iter().take(4) {
        state.train_step(&data, t, 1).unwrap();
        let s = state.snapshot.as_ref().unwrap();
        assert!(s.is_intact());
        assert_eq!(s.fingerprint(), snap.fingerprint());
    }
    assert_ne!(state.net.params().fingerprint(), snap.fingerprint());
}

#[test]
fn controller_moves_only_in_adversarial_mode() {
    let d = data_dir(5, 7);
    for mode in Mode::ALL {
        let cfg = tiny_config(d.path(), mode, 2);
        let before = RunState::<f32>::new(cfg.clone()).unwrap().controller.params().fingerprint();
        let (after, _) = train::<f32>(cfg);
        let changed = after.controller.params().fingerprint() != before;
        assert_eq!(changed, mode == Mode::Adversarial, "{mode}");
    }
}

#[test]
fn controller_update_leaves_theta_untouched() {
    let d = data_dir(5, 8);
    let cfg = tiny_config(d.path(), Mode::Adversarial, 4);
    let mut state = RunState::<f32>::new(cfg).unwrap();
    let theta = state.net.params().fingerprint();
    let batch = state.controller.sample_policies(4, &mut common::rng(1)).unwrap();
    state.controller.update(&batch, &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(state.net.params().fingerprint(), theta);
}

#[test]
fn small_run_finishes_within_a_minute() {
    let d = data_dir(8, 9);
    let cfg = tiny_config(d.path(), Mode::Adversarial, 0);
    let t = Instant::now();
    let s = run::<f32>(cfg, None).unwrap();
    assert!(t.elapsed().as_secs_f64() < 60.0);
    assert!(s.eval.recalls.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn same_seed_reruns_write_identical_metrics() {
    let d = data_dir(5, 10);
    let mut cfg = f64_config(d.path(), Mode::Adversarial, 11);
    cfg.generations = 2;
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    run::<f64>(cfg.clone(), Some(a.path())).unwrap();
    run::<f64>(cfg, Some(b.path())).unwrap();
    let ma = std::fs::read(a.path().join(METRICS_FILE)).unwrap();
    let mb = std::fs::read(b.path().join(METRICS_FILE)).unwrap();
    assert!(!ma.is_empty());
    assert_eq!(ma, mb);
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let d = data_dir(5, 11);
    let out = TempDir::new().unwrap();
    let cfg = tiny_config(d.path(), Mode::Adversarial, 12);
    run::<f32>(cfg, Some(out.path())).unwrap();
    let path = out.path().join("gen1.ckpt");
    let bytes = std::fs::read(&path).unwrap();
    let state = RunState::<f32>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(state.to_checkpoint().to_bytes(), bytes);
}

#[test]
fn loading_at_the_wrong_precision_is_rejected() {
    let d = data_dir(5, 12);
    let cfg = tiny_config(d.path(), Mode::Baseline, 1);
    let ckpt = RunState::<f32>::new(cfg).unwrap().to_checkpoint();
    assert!(matches!(RunState::<f64>::from_checkpoint(&ckpt), Err(Error::Config(_) | Error::Checkpoint(_))));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let d = data_dir(5, 13);
    let mut cfg = f64_config(d.path(), Mode::Adversarial, 13);
    cfg.generations = 2;
    let full = TempDir::new().unwrap();
    let whole = run::<f64>(cfg.clone(), Some(full.path())).unwrap();

    let part = TempDir::new().unwrap();
    let mut first = cfg.clone();
    first.generations = 1;
    run::<f64>(first, Some(part.path())).unwrap();
    let ckpt = Checkpoint::load(&part.path().join("gen1.ckpt")).unwrap();
    let resumed = resume::<f64>(&ckpt, Some(2), Some(part.path())).unwrap();

    let a = read_metrics(&full.path().join(METRICS_FILE)).unwrap();
    let b = read_metrics(&part.path().join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
    let g2: Vec<_> = whole.steps.iter().filter(|s| s.generation == 2).collect();
    assert_eq!(g2.first().unwrap().policy_losses, resumed.steps[0].policy_losses);
    assert_eq!(whole.eval, resumed.eval);
    assert_eq!(
        std::fs::read(full.path().join("gen2.ckpt")).unwrap(),
        std::fs::read(part.path().join("gen2.ckpt")).unwrap()
    );
}

#[test]
fn non_finite_steps_are_skipped_then_abort() {
    let d = data_dir(5, 14);
    let cfg = tiny_config(d.path(), Mode::Baseline, 1);
    let data = load::<f32>(&cfg);
    let mut state = RunState::<f32>::new(cfg).unwrap();
    let ids: Vec<_> = state.net.params().ids().collect();
    for id in ids {
        state.net.params_mut().get_mut(id).data_mut()[0] = f32::NAN;
    }
    let before = state.net.params().fingerprint();
    let tuples = state.mine_epoch(&data, None).unwrap();
    let mut skipped = 0;
    let err = loop {
        match state.train_step(&data, &tuples[0], 1) {
            Ok(m) => {
                assert_eq!(m.skipped, 2);
                skipped += m.skipped;
            }
            Err(e) => break e,
        }
    };
    assert!(matches!(err, Error::Aborted(_)), "{err}");
    assert_eq!(skipped, 4);
    assert_eq!(state.total_skips, alhp::trainer::MAX_CONSECUTIVE_SKIPS + 1);
    assert_eq!(state.net.params().fingerprint(), before);
}
