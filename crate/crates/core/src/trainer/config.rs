//! Flat `key=value` run configuration.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::Policy;
use crate::controller::ControllerConfig;
use crate::descriptor::NetConfig;
use crate::error::{Error, Result};

/// Which rows of the policy ablation a run reproduces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Standard preprocessing only.
    Baseline,
    /// Standard preprocessing plus one hard-coded policy.
    Fixed,
    /// Policies drawn uniformly from the search space.
    Random,
    /// Policies from the adversarially trained controller.
    Adversarial,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Fixed, Mode::Random, Mode::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Fixed => "fixed",
            Mode::Random => "random",
            Mode::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (baseline|fixed|random|adversarial)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Hand-picked policy used by the `fixed` mode.
pub const DEFAULT_FIXED_POLICY: &str = "Rotate(0.4,3) ; Color(0.6,5) | Brightness(0.6,6) ; ShearX(0.3,4) | \
Equalize(0.4,0) ; TranslateY(0.3,3) | Sharpness(0.5,7) ; AutoContrast(0.5,0) | TranslateX(0.3,4) ; Solarize(0.2,8)";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub precision: Precision,
    /// Training data: manifest file or directory holding `manifest.csv`.
    pub data: Option<PathBuf>,
    /// Held-out evaluation data; falls back to `data`.
    pub eval_data: Option<PathBuf>,
    pub generations: usize,
    pub epochs: usize,
    /// Policies per round (D).
    pub policies: usize,
    /// Positives per tuple (k).
    pub positives: usize,
    /// Hard negative regions per tuple (N).
    pub negatives: usize,
    pub lr: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub taus: Vec<f64>,
    pub radius: f64,
    /// Training queries visited per epoch; 0 means all.
    pub queries_per_epoch: usize,
    pub recall: Vec<usize>,
    pub fixed_policy: Policy,
    pub net: NetConfig,
    pub controller: ControllerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Adversarial,
            seed: 0,
            precision: Precision::F32,
            data: None,
            eval_data: None,
            generations: 4,
            epochs: 5,
            policies: 5,
            positives: 10,
            negatives: 10,
            lr: 0.001,
            momentum: 0.9,
            alpha: 0.5,
            taus: vec![0.10, 0.07, 0.05, 0.05],
            radius: crate::harness::synth::DEFAULT_RADIUS,
            queries_per_epoch: 0,
            recall: vec![1, 5, 10],
            fixed_policy: parse_policy(DEFAULT_FIXED_POLICY).expect("valid built-in policy"),
            net: NetConfig::default(),
            controller: ControllerConfig::default(),
        }
    }
}

/// Parses a policy written on one line with sub-policies separated by `|`;
/// `identity` is the do-nothing policy.
pub fn parse_policy(s: &str) -> Result<Policy> {
    if s.trim() == "identity" {
        return Ok(Policy::identity());
    }
    s.replace('|', "\n").parse()
}

fn policy_line(p: &Policy) -> String {
    p.to_string().trim().replace('\n', " | ")
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| Error::Config(format!("{key}: bad list item {x:?}"))))
        .collect()
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision must be f32 or f64, got {v:?}"))),
                }
            }
            "data" => self.data = Some(PathBuf::from(v)),
            "eval_data" => self.eval_data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "generations" => self.generations = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "policies" => self.policies = num(key, v)?,
            "positives" => self.positives = num(key, v)?,
            "negatives" => self.negatives = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "taus" => self.taus = list(key, v)?,
            "radius" => self.radius = num(key, v)?,
            "queries_per_epoch" => self.queries_per_epoch = num(key, v)?,
            "recall" => self.recall = list(key, v)?,
            "fixed_policy" => self.fixed_policy = parse_policy(v)?,
            "resolution" => self.net.resolution = num(key, v)?,
            "widths" => self.net.widths = list(key, v)?,
            "pooled_stages" => self.net.pooled_stages = num(key, v)?,
            "clusters" => self.net.clusters = num(key, v)?,
            "assign_scale" => self.net.assign_scale = num(key, v)?,
            "normalize_features" => self.net.normalize_features = num(key, v)?,
            "hidden" => self.controller.hidden = num(key, v)?,
            "embed" => self.controller.embed = num(key, v)?,
            "controller_lr" => self.controller.adam.lr = num(key, v)?,
            "entropy_weight" => self.controller.entropy_weight = num(key, v)?,
            "clip" => self.controller.clip = num(key, v)?,
            "baseline_decay" => self.controller.baseline_decay = num(key, v)?,
            "reward_window" => self.controller.reward_window = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text: one `key=value` per line, `#` comments allowed.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                e => Error::Config(format!("line {}: {e}", n + 1)),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.generations == 0 || self.epochs == 0 || self.policies == 0 {
            return bad("generations, epochs and policies must be at least 1");
        }
        if self.positives == 0 || self.negatives == 0 {
            return bad("positives and negatives must be at least 1");
        }
        if !(self.lr > 0.0 && self.controller.adam.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if self.taus.is_empty() || self.taus.iter().any(|t| !(*t > 0.0)) {
            return bad("taus must be a non-empty list of positive values");
        }
        if !(self.radius > 0.0) {
            return bad("radius must be positive");
        }
        if self.recall.is_empty() || self.recall.contains(&0) {
            return bad("recall list must hold positive K values");
        }
        self.net.validate()
    }

    /// Temperature of the snapshot taken after generation `g` (1-based);
    /// the last value repeats.
    pub fn tau(&self, g: usize) -> f64 {
        self.taus[(g.max(1) - 1).min(self.taus.len() - 1)]
    }

    /// Canonical `key=value` text; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("mode", self.mode.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
        );
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        if let Some(d) = &self.eval_data {
            kv("eval_data", d.display().to_string());
        }
        kv("generations", self.generations.to_string());
        kv("epochs", self.epochs.to_string());
        kv("policies", self.policies.to_string());
        kv("positives", self.positives.to_string());
        kv("negatives", self.negatives.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("alpha", self.alpha.to_string());
        kv("taus", join(&self.taus));
        kv("radius", self.radius.to_string());
        kv("queries_per_epoch", self.queries_per_epoch.to_string());
        kv("recall", join(&self.recall));
        kv("fixed_policy", policy_line(&self.fixed_policy));
        kv("resolution", self.net.resolution.to_string());
        kv("widths", join(&self.net.widths));
        kv("pooled_stages", self.net.pooled_stages.to_string());
        kv("clusters", self.net.clusters.to_string());
        kv("assign_scale", self.net.assign_scale.to_string());
        kv("normalize_features", self.net.normalize_features.to_string());
        kv("hidden", self.controller.hidden.to_string());
        kv("embed", self.controller.embed.to_string());
        kv("controller_lr", self.controller.adam.lr.to_string());
        kv("entropy_weight", self.controller.entropy_weight.to_string());
        kv("clip", self.controller.clip.to_string());
        kv("baseline_decay", self.controller.baseline_decay.to_string());
        kv("reward_window", self.controller.reward_window.to_string());
        s
    }
}
