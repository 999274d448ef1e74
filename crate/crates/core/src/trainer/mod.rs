//! The adversarial min–max training loop over generations.
//!
//! Per step, D policies augment the same query; θ takes one SGD step per
//! policy and the controller takes one step per round, rewarded by the
//! losses its policies caused. Each finished generation is frozen into a
//! snapshot that supplies soft similarity labels to the next one.

pub mod config;
pub mod metrics;

use std::path::Path;
use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::baseline::random_flip;
use crate::augment::{apply_policy, Normalizer, Policy};
use crate::controller::ControllerState;
use crate::descriptor::{Region, RegionDescriptor, RetrievalNet};
use crate::diff::{Gradients, Sgd, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::dataset::{load_manifest, PlaceDataset};
use crate::harness::eval::{evaluate, EvalReport};
use crate::real::Real;
use crate::rngs::stream;
use crate::supervision::{
    hard_loss, mine, similarity_vector, soft_ce_loss, total_loss, Candidate, GenerationSnapshot,
    RegionRef,
};

pub use config::{Mode, Precision, TrainConfig};
pub use metrics::{EpochSummary, RunInfo, RunOutput, StepMetrics};

/// Consecutive skipped steps tolerated before the run aborts.
pub const MAX_CONSECUTIVE_SKIPS: usize = 5;
/// Abort once a step's mean loss exceeds this multiple of the first one.
pub const DIVERGENCE_FACTOR: f64 = 100.0;

/// Training images held in memory.
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub dataset: PlaceDataset,
    pub images: Vec<RgbImage>,
    /// Normalized clean tensors, one per record.
    pub clean: Vec<Tensor<T>>,
    pub norm: Normalizer,
    /// Database images, used as SamplePairing partners.
    pub partners: Vec<RgbImage>,
    /// Queries usable for training: at least one positive and one negative.
    pub queries: Vec<usize>,
}

impl<T: Real> TrainData<T> {
    pub fn new(dataset: PlaceDataset, images: Vec<RgbImage>) -> Result<Self> {
        if images.len() != dataset.records.len() {
            return Err(Error::invalid("train data", "image count differs from record count"));
        }
        let norm = Normalizer::default();
        let clean = crate::exec::map_slice(&images, |im| norm.to_tensor(im));
        let partners = dataset.database().iter().map(|&i| images[i].clone()).collect();
        let queries: Vec<usize> = dataset
            .queries()
            .iter()
            .copied()
            .filter(|&q| !dataset.positives_of(q).is_empty() && !dataset.negatives_of(q).is_empty())
            .collect();
        if queries.is_empty() {
            return Err(Error::invalid("train data", "no query has both positives and negatives"));
        }
        Ok(TrainData {
            dataset,
            images,
            clean,
            norm,
            partners,
            queries,
        })
    }

    pub fn load(path: &Path, radius: f64, resolution: usize) -> Result<Self> {
        let ds = load_manifest(path, radius)?;
        let images = ds.load_images(resolution as u32)?;
        Self::new(ds, images)
    }
}

/// One mined training tuple (record indices).
#[derive(Clone, Debug, PartialEq)]
pub struct Tuple<T> {
    pub query: usize,
    pub positives: Vec<usize>,
    pub hard_positive: RegionRef,
    pub hard_negatives: Vec<RegionRef>,
    /// Soft labels from the previous generation, when one exists.
    pub target: Option<Tensor<T>>,
}

/// Everything that evolves during a run.
#[derive(Clone, Debug)]
pub struct RunState<T: Real> {
    pub config: TrainConfig,
    pub net: RetrievalNet<T>,
    pub sgd: Sgd<T>,
    pub controller: ControllerState<T>,
    pub snapshot: Option<GenerationSnapshot<T>>,
    /// Completed generations.
    pub generation: usize,
    /// Global step counter; keys every per-step random stream.
    pub step: u64,
    pub initial_loss: Option<f64>,
    pub consecutive_skips: usize,
    pub total_skips: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    generation: usize,
    step: u64,
    seed: u64,
    precision: String,
    snapshot_tau: Option<f64>,
    adam_steps: u64,
    reward_baseline: f64,
    reward_history: Vec<Vec<f64>>,
    initial_loss: Option<f64>,
    total_skips: usize,
}

fn desc_row<T: Real>(tape: &mut Tape<T>, desc: Var, r: Region) -> Result<Var> {
    tape.slice(desc, 0, r.index(), 1)
}

/// Loss and parameter gradients of one tuple for an already-augmented query.
pub struct TupleLoss<T: Real> {
    pub total: f64,
    pub hard: f64,
    pub soft: Option<f64>,
    pub grads: Gradients<T>,
}

impl<T: Real> RunState<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let expected = match config.precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        if T::BYTES != expected {
            return Err(Error::Config(format!("config precision does not match {}", T::NAME)));
        }
        let net = RetrievalNet::new(config.net.clone(), &mut stream(config.seed, "theta-init", &[]))?;
        let sgd = Sgd::new(net.params(), T::of(config.lr), T::of(config.momentum));
        let controller = ControllerState::new(config.controller.clone(), &mut stream(config.seed, "omega-init", &[]));
        Ok(RunState {
            config,
            net,
            sgd,
            controller,
            snapshot: None,
            generation: 0,
            step: 0,
            initial_loss: None,
            consecutive_skips: 0,
            total_skips: 0,
        })
    }

    /// Soft-term weight in the generation being trained.
    pub fn alpha(&self) -> f64 {
        if self.snapshot.is_some() {
            self.config.alpha
        } else {
            0.0
        }
    }

    /// Mines one tuple per training query with a frozen copy of the current
    /// network; soft labels come from the snapshot descriptors.
    pub fn mine_epoch(
        &self,
        data: &TrainData<T>,
        snapshot_descs: Option<&[RegionDescriptor<T>]>,
    ) -> Result<Vec<Tuple<T>>> {
        let descs = self.net.describe_all(&data.clean)?;
        let ds = &data.dataset;
        crate::exec::try_map_range(data.queries.len(), |i| {
            let q = data.queries[i];
            let cand = |ids: Vec<usize>| -> Vec<Candidate<'_, T>> {
                ids.into_iter().map(|id| Candidate { id, desc: &descs[id] }).collect()
            };
            let pos = cand(ds.positives_of(q));
            let neg = cand(ds.negatives_of(q));
            let k = self.config.positives.min(pos.len());
            let m = mine(&descs[q], &pos, &neg, k, self.config.negatives)?;
            let target = match (snapshot_descs, &self.snapshot) {
                (Some(sd), Some(snap)) => {
                    let ps: Vec<&RegionDescriptor<T>> = m.positives.iter().map(|&p| &sd[p]).collect();
                    Some(snap.labels(&sd[q], &ps)?)
                }
                _ => None,
            };
            Ok(Tuple {
                query: q,
                positives: m.positives,
                hard_positive: m.hardest_positive,
                hard_negatives: m.hard_negatives,
                target,
            })
        })
    }

    /// Loss of `tuple` with `query` standing in for the query image, and the
    /// gradient of that loss with respect to θ.
    ///
    /// Images are described on separate tapes in parallel, the loss is built
    /// on a small tape over their descriptors, and each image tape is then
    /// back-propagated from its descriptor cotangent. Gradients are summed in
    /// image order, so the result does not depend on scheduling.
    pub fn tuple_loss(&self, data: &TrainData<T>, tuple: &Tuple<T>, query: &Tensor<T>) -> Result<TupleLoss<T>> {
        let mut images: Vec<usize> = Vec::new();
        let mut slot_of = std::collections::HashMap::new();
        for id in tuple.positives.iter().copied().chain(tuple.hard_negatives.iter().map(|n| n.image)) {
            slot_of.entry(id).or_insert_with(|| {
                images.push(id);
                images.len()
            });
        }
        let inputs: Vec<&Tensor<T>> = std::iter::once(query)
            .chain(images.iter().map(|&i| &data.clean[i]))
            .collect();
        let net = &self.net;
        let forward = crate::exec::try_map_range(inputs.len(), |i| -> Result<(Tape<T>, Var)> {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let x = tape.constant(inputs[i].clone());
            let d = net.describe_on_tape(&mut tape, &bound, x)?;
            Ok((tape, d))
        })?;

        let mut lt = Tape::new();
        let leaves: Vec<Var> = forward.iter().map(|(t, d)| lt.input(t.value(*d).clone())).collect();
        let q = desc_row(&mut lt, leaves[0], Region::Global)?;
        let hp = tuple.hard_positive;
        let p = desc_row(&mut lt, leaves[slot_of[&hp.image]], hp.region)?;
        let neg_rows = tuple
            .hard_negatives
            .iter()
            .map(|n| desc_row(&mut lt, leaves[slot_of[&n.image]], n.region))
            .collect::<Result<Vec<_>>>()?;
        let negs = lt.concat(&neg_rows, 0)?;
        let hard = hard_loss(&mut lt, q, p, negs)?;
        let alpha = self.alpha();
        let soft = match &tuple.target {
            Some(t) if alpha > 0.0 => {
                let pos: Vec<Var> = tuple.positives.iter().map(|i| leaves[slot_of[i]]).collect();
                let s = similarity_vector(&mut lt, q, &pos, T::one())?;
                let target = lt.constant(t.clone());
                Some(soft_ce_loss(&mut lt, s, target)?)
            }
            _ => None,
        };
        let total = total_loss(&mut lt, hard, soft, T::of(alpha))?;
        let (total_v, hard_v) = (lt.value(total).item().f64(), lt.value(hard).item().f64());
        let soft_v = soft.map(|s| lt.value(s).item().f64());
        let mut back = lt.backward(total)?;
        let seeds: Vec<Option<Tensor<T>>> = leaves.iter().map(|&l| back.take_input(l)).collect();

        let store = net.params().id();
        let work: Vec<((Tape<T>, Var), Option<Tensor<T>>)> = forward.into_iter().zip(seeds).collect();
        let partial = crate::exec::map_vec(work, |((tape, d), seed)| -> Result<Option<Gradients<T>>> {
            let Some(seed) = seed else { return Ok(None) };
            let b = tape.backward_from(vec![(d, seed)])?;
            if b.stores().iter().any(|&s| s != store) {
                return Err(Error::invalid("tuple_loss", "retrieval gradients touched a foreign store"));
            }
            Ok(Some(b.params_for(store)))
        });
        let mut grads = Gradients::empty(store, net.params().len());
        for g in partial {
            if let Some(g) = g? {
                grads.merge(&g)?;
            }
        }
        Ok(TupleLoss {
            total: total_v,
            hard: hard_v,
            soft: soft_v,
            grads,
        })
    }

    fn policies_for_round(&self, rng_coords: &[u64]) -> Result<(Vec<Option<Policy>>, Option<crate::controller::SampledBatch<T>>)> {
        let d = self.config.policies;
        let seed = self.config.seed;
        Ok(match self.config.mode {
            Mode::Baseline => (vec![None; d], None),
            Mode::Fixed => (vec![Some(self.config.fixed_policy); d], None),
            Mode::Random => {
                let mut rng = stream(seed, "random-policy", rng_coords);
                ((0..d).map(|_| Some(Policy::random(&mut rng))).collect(), None)
            }
            Mode::Adversarial => {
                let batch = self.controller.sample_policies(d, &mut stream(seed, "controller", rng_coords))?;
                (batch.policies.iter().copied().map(Some).collect(), Some(batch))
            }
        })
    }

    /// One round: D augmented copies of the query, one θ step each, then one
    /// controller step in adversarial mode.
    pub fn train_step(&mut self, data: &TrainData<T>, tuple: &Tuple<T>, epoch: usize) -> Result<StepMetrics> {
        let step = self.step;
        let seed = self.config.seed;
        let (policies, batch) = self.policies_for_round(&[step])?;
        let alpha = self.alpha();
        let mut losses = Vec::with_capacity(policies.len());
        let mut hards = Vec::with_capacity(policies.len());
        let mut softs = Vec::with_capacity(policies.len());
        let mut skipped = 0;
        for (d, policy) in policies.iter().enumerate() {
            let coords = [step, d as u64];
            let mut img = random_flip(data.images[tuple.query].clone(), &mut stream(seed, "flip", &coords));
            if let Some(p) = policy {
                img = apply_policy(&img, p, &mut stream(seed, "augment", &coords), &data.partners)?.0;
            }
            let x = data.norm.to_tensor::<T>(&img);
            let out = self.tuple_loss(data, tuple, &x)?;
            let finite = out.total.is_finite() && out.grads.check_finite("theta").is_ok();
            if finite {
                self.sgd.step(self.net.params_mut(), &out.grads)?;
                self.consecutive_skips = 0;
            } else {
                skipped += 1;
                self.total_skips += 1;
                self.consecutive_skips += 1;
                log::warn!("step {step} policy {d}: non-finite loss {}; skipped", out.total);
                if self.consecutive_skips > MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::Aborted(format!(
                        "{} consecutive non-finite steps at step {step}",
                        self.consecutive_skips
                    )));
                }
            }
            let fin = |v: f64| v.is_finite().then_some(v);
            losses.push(fin(out.total));
            hards.push(fin(out.hard));
            softs.push(out.soft.and_then(fin));
        }

        let (mut entropy, mut baseline) = (None, None);
        if let Some(batch) = batch {
            let raw: Vec<f64> = losses.iter().map(|l| l.unwrap_or(f64::NAN)).collect();
            let before = self.net.params().fingerprint();
            self.controller.update(&batch, &raw)?;
            debug_assert_eq!(before, self.net.params().fingerprint());
            entropy = Some(batch.mean_entropy());
            baseline = Some(self.controller.baseline());
        }

        let finite: Vec<f64> = losses.iter().flatten().copied().collect();
        let mean = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
        if let Some(m) = mean {
            match self.initial_loss {
                None => self.initial_loss = Some(m),
                Some(init) if m > DIVERGENCE_FACTOR * init => {
                    return Err(Error::Aborted(format!(
                        "loss {m} exceeds {DIVERGENCE_FACTOR}x the initial {init} at step {step}"
                    )))
                }
                _ => {}
            }
        }
        self.step += 1;
        Ok(StepMetrics {
            step,
            generation: self.generation + 1,
            epoch,
            query: tuple.query,
            policy_losses: losses,
            hard_losses: hards,
            soft_losses: softs,
            alpha,
            mean_loss: mean,
            controller_entropy: entropy,
            reward_baseline: baseline,
            skipped,
        })
    }

    /// Trains the next generation for the configured number of epochs, then
    /// freezes θ into the snapshot for the generation after it.
    pub fn run_generation(&mut self, data: &TrainData<T>, out: &mut RunOutput) -> Result<()> {
        let g = self.generation + 1;
        let snapshot_descs = match &self.snapshot {
            Some(s) => Some(s.net.describe_all(&data.clean)?),
            None => None,
        };
        for e in 1..=self.config.epochs {
            let mut tuples = self.mine_epoch(data, snapshot_descs.as_deref())?;
            tuples.shuffle(&mut stream(self.config.seed, "order", &[g as u64, e as u64]));
            if self.config.queries_per_epoch > 0 {
                tuples.truncate(self.config.queries_per_epoch);
            }
            let mut sum = 0.0;
            let mut n = 0;
            let mut skipped = 0;
            for t in &tuples {
                let m = self.train_step(data, t, e)?;
                if let Some(l) = m.mean_loss {
                    sum += l;
                    n += 1;
                }
                skipped += m.skipped;
                out.record_step(m)?;
            }
            if let Some(s) = &self.snapshot {
                if !s.is_intact() {
                    return Err(Error::Aborted("snapshot parameters changed during a generation".into()));
                }
            }
            out.record_epoch(EpochSummary {
                generation: g,
                epoch: e,
                steps: tuples.len(),
                mean_loss: if n > 0 { sum / n as f64 } else { f64::NAN },
                skipped,
            })?;
            log::info!("generation {g} epoch {e}: mean loss {:.5}", sum / n.max(1) as f64);
        }
        self.snapshot = Some(GenerationSnapshot::capture(&self.net, T::of(self.config.tau(g))));
        self.generation = g;
        if let Some(dir) = out.dir() {
            self.to_checkpoint().save(&dir.join(format!("gen{g}.ckpt")))?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (adam_steps, m, v) = self.controller.adam().state();
        let meta = Meta {
            generation: self.generation,
            step: self.step,
            seed: self.config.seed,
            precision: T::NAME.to_string(),
            snapshot_tau: self.snapshot.as_ref().map(|s| s.tau.f64()),
            adam_steps,
            reward_baseline: self.controller.baseline(),
            reward_history: self.controller.normalizer().history().cloned().collect(),
            initial_loss: self.initial_loss,
            total_skips: self.total_skips,
        };
        let mut c = Checkpoint {
            config: self.config.to_text(),
            meta: serde_json::to_string(&meta).expect("meta serializes"),
            blocks: Vec::new(),
        };
        let theta = self.net.params().blocks();
        let names: Vec<String> = theta.iter().map(|(n, _)| n.clone()).collect();
        let named = |ts: &[Tensor<T>]| -> Vec<(String, Tensor<T>)> { names.iter().cloned().zip(ts.iter().cloned()).collect() };
        c.push_group("theta", &theta);
        c.push_group("velocity", &named(self.sgd.velocity()));
        if let Some(s) = &self.snapshot {
            c.push_group("snapshot", &s.net.params().blocks());
        }
        let omega = self.controller.params().blocks();
        let onames: Vec<String> = omega.iter().map(|(n, _)| n.clone()).collect();
        let onamed = |ts: &[Tensor<T>]| -> Vec<(String, Tensor<T>)> { onames.iter().cloned().zip(ts.iter().cloned()).collect() };
        c.push_group("omega", &omega);
        c.push_group("omega_adam_m", &onamed(m));
        c.push_group("omega_adam_v", &onamed(v));
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::parse(&ckpt.config)?;
        let meta: Meta = serde_json::from_str(&ckpt.meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if meta.precision != T::NAME {
            return Err(Error::Checkpoint(format!(
                "checkpoint precision {} but loading as {}",
                meta.precision,
                T::NAME
            )));
        }
        let mut run = RunState::<T>::new(config)?;
        run.net.params_mut().load_from(&ckpt.group("theta")?)?;
        let vel: Vec<Tensor<T>> = ckpt.group("velocity")?.into_iter().map(|(_, t)| t).collect();
        run.sgd.set_velocity(vel)?;
        let snap = ckpt.group::<T>("snapshot")?;
        if !snap.is_empty() {
            let mut net = run.net.clone();
            net.params_mut().load_from(&snap)?;
            let tau = meta
                .snapshot_tau
                .ok_or_else(|| Error::Checkpoint("snapshot without temperature".into()))?;
            run.snapshot = Some(GenerationSnapshot::capture(&net, T::of(tau)));
        }
        run.controller.params_mut().load_from(&ckpt.group("omega")?)?;
        let m: Vec<Tensor<T>> = ckpt.group("omega_adam_m")?.into_iter().map(|(_, t)| t).collect();
        let v: Vec<Tensor<T>> = ckpt.group("omega_adam_v")?.into_iter().map(|(_, t)| t).collect();
        run.controller.adam_mut().set_state(meta.adam_steps, m, v)?;
        run.controller.set_baseline(meta.reward_baseline);
        run.controller.normalizer_mut().restore(meta.reward_history);
        run.generation = meta.generation;
        run.step = meta.step;
        run.initial_loss = meta.initial_loss;
        run.total_skips = meta.total_skips;
        Ok(run)
    }
}

/// Outcome of a full run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub eval: EvalReport,
    pub epochs: Vec<EpochSummary>,
    pub steps: Vec<StepMetrics>,
    pub wall_seconds: f64,
}

fn eval_set<T: Real>(config: &TrainConfig, train: &TrainData<T>) -> Result<(PlaceDataset, Vec<RgbImage>)> {
    match &config.eval_data {
        Some(p) => {
            let ds = load_manifest(p, config.radius)?;
            let images = ds.load_images(config.net.resolution as u32)?;
            Ok((ds, images))
        }
        None => Ok((train.dataset.clone(), train.images.clone())),
    }
}

/// Runs the remaining generations of `run` and evaluates the result.
pub fn continue_run<T: Real>(mut run: RunState<T>, data: &TrainData<T>, out: &mut RunOutput) -> Result<(RunState<T>, RunSummary)> {
    let start = Instant::now();
    while run.generation < run.config.generations {
        run.run_generation(data, out)?;
    }
    out.flush()?;
    let (ds, images) = eval_set(&run.config, data)?;
    let (eval, _) = evaluate(&run.net, &ds, &images, &data.norm, &run.config.recall)?;
    let wall = start.elapsed().as_secs_f64();
    out.write_json(metrics::EVAL_FILE, &eval)?;
    out.write_json(
        metrics::RUN_FILE,
        &RunInfo {
            mode: run.config.mode.to_string(),
            seed: run.config.seed,
            precision: T::NAME.to_string(),
            generations: run.config.generations,
            epochs: run.config.epochs,
            wall_seconds: wall,
        },
    )?;
    let summary = RunSummary {
        eval,
        epochs: out.epochs.clone(),
        steps: out.steps.clone(),
        wall_seconds: wall,
    };
    Ok((run, summary))
}

/// Trains from scratch according to `config`, writing artifacts to `out_dir`
/// when given.
pub fn run<T: Real>(config: TrainConfig, out_dir: Option<&Path>) -> Result<RunSummary> {
    let data_path = config
        .data
        .clone()
        .ok_or_else(|| Error::Config("`data` is required to train".into()))?;
    let data = TrainData::<T>::load(&data_path, config.radius, config.net.resolution)?;
    let mut out = match out_dir {
        Some(d) => {
            let o = RunOutput::to_dir(d, false)?;
            let cfg_path = d.join("config.txt");
            std::fs::write(&cfg_path, config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
            o
        }
        None => RunOutput::in_memory(),
    };
    let run = RunState::<T>::new(config)?;
    Ok(continue_run(run, &data, &mut out)?.1)
}

/// Resumes from a checkpoint (optionally with more generations) and finishes
/// the run, appending to the metrics in `out_dir`.
pub fn resume<T: Real>(ckpt: &Checkpoint, generations: Option<usize>, out_dir: Option<&Path>) -> Result<RunSummary> {
    let mut run = RunState::<T>::from_checkpoint(ckpt)?;
    if let Some(g) = generations {
        run.config.generations = g;
    }
    let data_path = run
        .config
        .data
        .clone()
        .ok_or_else(|| Error::Config("checkpoint config lacks `data`".into()))?;
    let data = TrainData::<T>::load(&data_path, run.config.radius, run.config.net.resolution)?;
    let mut out = match out_dir {
        Some(d) => RunOutput::to_dir(d, true)?,
        None => RunOutput::in_memory(),
    };
    Ok(continue_run(run, &data, &mut out)?.1)
}

/// [`run`] at the precision named in the config.
pub fn run_configured(config: TrainConfig, out_dir: Option<&Path>) -> Result<RunSummary> {
    match config.precision {
        Precision::F32 => run::<f32>(config, out_dir),
        Precision::F64 => run::<f64>(config, out_dir),
    }
}

/// Precision a checkpoint was written in.
pub fn checkpoint_precision(ckpt: &Checkpoint) -> Result<Precision> {
    Ok(TrainConfig::parse(&ckpt.config)?.precision)
}

/// [`resume`] at the checkpoint's own precision.
pub fn resume_configured(ckpt: &Checkpoint, generations: Option<usize>, out_dir: Option<&Path>) -> Result<RunSummary> {
    match checkpoint_precision(ckpt)? {
        Precision::F32 => resume::<f32>(ckpt, generations, out_dir),
        Precision::F64 => resume::<f64>(ckpt, generations, out_dir),
    }
}
