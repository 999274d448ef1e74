//! Recurrent policy controller trained with clipped policy-gradient updates.
//!
//! Each policy is emitted as 30 sequential decisions (kind, magnitude,
//! probability for each of the ten ops). The sampled token is embedded and fed
//! to the next LSTM step.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::augment::{OpKind, OpSpec, Policy, MAG_BINS, OPS_PER_SUB, PROB_BINS, SUBS_PER_POLICY};
use crate::diff::{lstm_step, Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Decisions per policy.
pub const DECISIONS: usize = SUBS_PER_POLICY * OPS_PER_SUB * 3;

const KIND_TOKENS: usize = OpKind::COUNT;
const MAG_TOKENS: usize = MAG_BINS as usize;
const PROB_TOKENS: usize = PROB_BINS as usize;
const START_TOKEN: usize = KIND_TOKENS + MAG_TOKENS + PROB_TOKENS;
const VOCAB: usize = START_TOKEN + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Kind,
    Magnitude,
    Probability,
}

impl Head {
    pub fn of_step(t: usize) -> Head {
        match t % 3 {
            0 => Head::Kind,
            1 => Head::Magnitude,
            _ => Head::Probability,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Head::Kind => KIND_TOKENS,
            Head::Magnitude => MAG_TOKENS,
            Head::Probability => PROB_TOKENS,
        }
    }

    fn token_offset(self) -> usize {
        match self {
            Head::Kind => 0,
            Head::Magnitude => KIND_TOKENS,
            Head::Probability => KIND_TOKENS + MAG_TOKENS,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub embed: usize,
    pub clip: f64,
    pub entropy_weight: f64,
    pub adam: AdamConfig,
    pub baseline_decay: f64,
    /// Rounds of raw rewards kept for normalization.
    pub reward_window: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            hidden: 100,
            embed: 32,
            clip: 0.2,
            entropy_weight: 1e-5,
            adam: AdamConfig::default(),
            baseline_decay: 0.95,
            reward_window: 50,
        }
    }
}

/// Running reward standardization over the last `window` rounds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RewardNormalizer {
    window: usize,
    history: VecDeque<Vec<f64>>,
}

impl RewardNormalizer {
    pub fn new(window: usize) -> Self {
        RewardNormalizer {
            window: window.max(1),
            history: VecDeque::new(),
        }
    }

    pub fn history(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.history.iter()
    }

    pub fn restore(&mut self, rounds: Vec<Vec<f64>>) {
        self.history = rounds.into_iter().collect();
        while self.history.len() > self.window {
            self.history.pop_front();
        }
    }

    /// Adds a round to the window, then standardizes it with the window's
    /// mean and population std (std 0 scales by 1).
    pub fn push_and_normalize(&mut self, losses: &[f64]) -> Vec<f64> {
        self.history.push_back(losses.to_vec());
        while self.history.len() > self.window {
            self.history.pop_front();
        }
        let all: Vec<f64> = self.history.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let scale = if std > 1e-12 { std } else { 1.0 };
        losses.iter().map(|v| (v - mean) / scale).collect()
    }
}

/// Turns per-policy retrieval losses into rewards to maximize.
pub fn reward_from_losses(losses: &[f64], window: &mut RewardNormalizer) -> Result<Vec<f64>> {
    if let Some(bad) = losses.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("policy loss {bad}")));
    }
    Ok(window.push_and_normalize(losses))
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
    heads: [(ParamId, ParamId); 3],
}

struct Bound {
    embed: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    heads: [(Var, Var); 3],
}

/// The policy network ω together with its optimizer and reward statistics.
#[derive(Clone, Debug)]
pub struct ControllerState<T: Real> {
    config: ControllerConfig,
    params: ParamStore<T>,
    layout: Layout,
    adam: Adam<T>,
    baseline: f64,
    normalizer: RewardNormalizer,
}

/// Policies sampled in one round plus what the update needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledBatch<T> {
    pub policies: Vec<Policy>,
    /// Per policy, the 30 chosen head indices.
    pub actions: Vec<Vec<usize>>,
    pub log_probs: Vec<Vec<T>>,
    pub entropies: Vec<Vec<T>>,
}

impl<T: Real> SampledBatch<T> {
    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn mean_entropy(&self) -> f64 {
        let n = self.entropies.iter().map(Vec::len).sum::<usize>().max(1);
        self.entropies.iter().flatten().map(|e| e.f64()).sum::<f64>() / n as f64
    }
}

/// Result of [`ControllerState::update`].
#[derive(Clone, Debug, PartialEq)]
pub enum UpdateOutcome {
    Applied { rewards: Vec<f64>, advantages: Vec<f64> },
    Skipped(String),
}

fn orthogonal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    rows.concat()
}

fn actions_of(policy: &Policy) -> Vec<usize> {
    policy
        .ops()
        .flat_map(|op| [op.kind().code() as usize, op.mag_bin() as usize, op.prob_bin() as usize])
        .collect()
}

fn policy_of(actions: &[usize]) -> Result<Policy> {
    let slots = actions
        .chunks(3)
        .map(|c| {
            let kind = OpKind::try_from(c[0] as u8)?;
            OpSpec::new(kind, c[2] as u8, c[1] as u8)
        })
        .collect::<Result<Vec<_>>>()?;
    Policy::from_slots(&slots)
}

fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

impl<T: Real> ControllerState<T> {
    pub fn new(config: ControllerConfig, rng: &mut impl Rng) -> Self {
        let (h, e) = (config.hidden, config.embed);
        let mut params = ParamStore::new();
        let embed = params.add(
            "embed",
            Tensor::from_fn(&[VOCAB, e], |_| T::of(StandardNormal.sample(rng))),
        );
        let bound = 1.0 / (h as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("valid range");
        let w_ih = params.add("lstm.w_ih", Tensor::from_fn(&[e, 4 * h], |_| T::of(u.sample(rng))));
        let gates: Vec<Vec<f64>> = (0..4).map(|_| orthogonal(rng, h)).collect();
        let w_hh = params.add(
            "lstm.w_hh",
            Tensor::from_fn(&[h, 4 * h], |i| {
                let (row, col) = (i / (4 * h), i % (4 * h));
                let (g, c) = (col / h, col % h);
                T::of(gates[g][c * h + row])
            }),
        );
        let bias = params.add("lstm.bias", Tensor::zeros(&[1, 4 * h]));
        let heads = [Head::Kind, Head::Magnitude, Head::Probability].map(|hd| {
            let name = format!("{hd:?}").to_lowercase();
            let w = params.add(format!("head.{name}.weight"), Tensor::zeros(&[h, hd.width()]));
            let b = params.add(format!("head.{name}.bias"), Tensor::zeros(&[1, hd.width()]));
            (w, b)
        });
        let adam = Adam::new(&params, config.adam);
        let normalizer = RewardNormalizer::new(config.reward_window);
        ControllerState {
            config,
            params,
            layout: Layout {
                embed,
                w_ih,
                w_hh,
                bias,
                heads,
            },
            adam,
            baseline: 0.0,
            normalizer,
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn adam(&self) -> &Adam<T> {
        &self.adam
    }

    pub fn adam_mut(&mut self) -> &mut Adam<T> {
        &mut self.adam
    }

    /// Fresh optimizer moments, as if no update had happened yet.
    pub fn reset_optimizer(&mut self) {
        self.adam = Adam::new(&self.params, self.config.adam);
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn set_baseline(&mut self, b: f64) {
        self.baseline = b;
    }

    pub fn normalizer(&self) -> &RewardNormalizer {
        &self.normalizer
    }

    pub fn normalizer_mut(&mut self) -> &mut RewardNormalizer {
        &mut self.normalizer
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let mut leaf = |id| {
            if trainable {
                tape.param(&self.params, id)
            } else {
                tape.frozen(&self.params, id)
            }
        };
        let l = &self.layout;
        Bound {
            embed: leaf(l.embed),
            w_ih: leaf(l.w_ih),
            w_hh: leaf(l.w_hh),
            bias: leaf(l.bias),
            heads: l.heads.map(|(w, b)| (leaf(w), leaf(b))),
        }
    }

    /// Runs the recurrence, choosing each action with `choose` given the head
    /// distribution. Returns the per-step probability nodes and actions.
    fn unroll(
        &self,
        tape: &mut Tape<T>,
        net: &Bound,
        mut choose: impl FnMut(usize, &[f64]) -> usize,
    ) -> Result<(Vec<Var>, Vec<usize>)> {
        let h = self.config.hidden;
        let mut hs = tape.constant(Tensor::zeros(&[1, h]));
        let mut cs = tape.constant(Tensor::zeros(&[1, h]));
        let mut token = START_TOKEN;
        let mut probs = Vec::with_capacity(DECISIONS);
        let mut actions = Vec::with_capacity(DECISIONS);
        for t in 0..DECISIONS {
            let x = tape.embedding(net.embed, &[token])?;
            (hs, cs) = lstm_step(tape, x, hs, cs, net.w_ih, net.w_hh, net.bias)?;
            let head = Head::of_step(t);
            let (w, b) = net.heads[head.index()];
            let logits = tape.matmul(hs, w)?;
            let logits = tape.add(logits, b)?;
            let p = tape.softmax(logits, 1)?;
            let a = choose(t, &tape.value(p).to_f64());
            if a >= head.width() {
                return Err(Error::invalid("controller", format!("action {a} at step {t}")));
            }
            probs.push(p);
            actions.push(a);
            token = head.token_offset() + a;
        }
        Ok((probs, actions))
    }

    /// Head distributions along a given action sequence.
    pub fn distributions(&self, actions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let (probs, _) = self.unroll(&mut tape, &net, |t, _| actions[t])?;
        Ok(probs.iter().map(|&p| tape.value(p).to_f64()).collect())
    }

    /// Log-probabilities of each decision of `policy` under the current ω.
    pub fn log_probs(&self, policy: &Policy) -> Result<Vec<f64>> {
        let actions = actions_of(policy);
        let dists = self.distributions(&actions)?;
        Ok(dists.iter().zip(&actions).map(|(p, &a)| p[a].ln()).collect())
    }

    fn sample_one(&self, rng: &mut impl Rng) -> Result<(Policy, Vec<usize>, Vec<T>, Vec<T>)> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let mut lps = Vec::with_capacity(DECISIONS);
        let mut ents = Vec::with_capacity(DECISIONS);
        let (_, actions) = self.unroll(&mut tape, &net, |_, p| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = p.len() - 1;
            for (i, &v) in p.iter().enumerate() {
                acc += v;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            lps.push(T::of(p[pick].ln()));
            ents.push(T::of(entropy_of(p)));
            pick
        })?;
        Ok((policy_of(&actions)?, actions, lps, ents))
    }

    /// Samples `d` policies.
    pub fn sample_policies(&self, d: usize, rng: &mut impl Rng) -> Result<SampledBatch<T>> {
        if d == 0 {
            return Err(Error::invalid("sample_policies", "d must be at least 1"));
        }
        let mut batch = SampledBatch {
            policies: Vec::with_capacity(d),
            actions: Vec::with_capacity(d),
            log_probs: Vec::with_capacity(d),
            entropies: Vec::with_capacity(d),
        };
        for _ in 0..d {
            let (p, a, lp, e) = self.sample_one(rng)?;
            batch.policies.push(p);
            batch.actions.push(a);
            batch.log_probs.push(lp);
            batch.entropies.push(e);
        }
        Ok(batch)
    }

    /// Greedy decode: the most probable action at every step.
    pub fn argmax_policy(&self) -> Result<Policy> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let (_, actions) = self.unroll(&mut tape, &net, |_, p| {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            best
        })?;
        policy_of(&actions)
    }

    /// Clipped surrogate plus entropy bonus, averaged over all decisions.
    /// This is the quantity the update ascends.
    pub fn surrogate(
        &self,
        tape: &mut Tape<T>,
        batch: &SampledBatch<T>,
        advantages: &[f64],
        entropy_weight: f64,
    ) -> Result<Var> {
        if advantages.len() != batch.len() {
            return Err(Error::invalid(
                "surrogate",
                format!("{} advantages for {} policies", advantages.len(), batch.len()),
            ));
        }
        let net = self.bind(tape, true);
        let clip = self.config.clip;
        let mut terms = Vec::with_capacity(batch.len() * DECISIONS * 2);
        for (d, actions) in batch.actions.iter().enumerate() {
            let (probs, _) = self.unroll(tape, &net, |t, _| actions[t])?;
            let adv = advantages[d];
            for (t, &p) in probs.iter().enumerate() {
                let a = actions[t];
                let width = Head::of_step(t).width();
                let onehot = tape.constant(Tensor::from_fn(&[1, width], |i| {
                    if i == a {
                        T::one()
                    } else {
                        T::zero()
                    }
                }));
                let picked = tape.mul(p, onehot)?;
                let picked = tape.sum(picked);
                let lp = tape.log(picked);
                let old = batch.log_probs[d][t].f64();
                let shifted = tape.add_scalar(lp, T::of(-old));
                let ratio = tape.exp(shifted);
                let r = tape.value(ratio).item().f64();
                let clipped = r.clamp(1.0 - clip, 1.0 + clip);
                // min(r·A, clip(r)·A): the clipped branch carries no gradient
                if r * adv <= clipped * adv {
                    terms.push(tape.scale(ratio, T::of(adv)));
                } else {
                    terms.push(tape.constant(Tensor::new(vec![1], vec![T::of(clipped * adv)])?));
                }
                if entropy_weight != 0.0 {
                    let lg = tape.log(p);
                    let plogp = tape.mul(p, lg)?;
                    let s = tape.sum(plogp);
                    terms.push(tape.scale(s, T::of(-entropy_weight)));
                }
            }
        }
        let all = tape.concat(&terms, 0)?;
        let total = tape.sum(all);
        Ok(tape.scale(total, T::of(1.0 / (batch.len() * DECISIONS) as f64)))
    }

    /// One ascent step on the surrogate for the given advantages.
    pub fn step_with_advantages(&mut self, batch: &SampledBatch<T>, advantages: &[f64]) -> Result<()> {
        let mut tape = Tape::new();
        let obj = self.surrogate(&mut tape, batch, advantages, self.config.entropy_weight)?;
        let loss = tape.neg(obj);
        let grads = tape.backward(loss)?.params_for(self.params.id());
        self.adam.step(&mut self.params, &grads)
    }

    /// Full round: rewards from losses, advantages against the EMA baseline,
    /// one optimizer step, baseline update. Non-finite losses skip the round.
    pub fn update(&mut self, batch: &SampledBatch<T>, losses: &[f64]) -> Result<UpdateOutcome> {
        if losses.len() != batch.len() {
            return Err(Error::invalid(
                "update_controller",
                format!("{} rewards for {} policies", losses.len(), batch.len()),
            ));
        }
        if losses.iter().any(|v| !v.is_finite()) {
            let msg = format!("non-finite reward in {losses:?}; controller update skipped");
            log::warn!("{msg}");
            return Ok(UpdateOutcome::Skipped(msg));
        }
        let rewards = reward_from_losses(losses, &mut self.normalizer)?;
        let advantages: Vec<f64> = rewards.iter().map(|r| r - self.baseline).collect();
        self.step_with_advantages(batch, &advantages)?;
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let k = self.config.baseline_decay;
        self.baseline = k * self.baseline + (1.0 - k) * mean;
        Ok(UpdateOutcome::Applied { rewards, advantages })
    }
}
