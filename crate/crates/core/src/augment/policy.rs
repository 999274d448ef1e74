use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use rand::Rng;

use super::kernels as k;
use crate::error::{Error, Result};

/// Number of magnitude bins per operation.
pub const MAG_BINS: u8 = 10;
/// Number of probability bins (0.0, 0.1, ..., 1.0).
pub const PROB_BINS: u8 = 11;
pub const OPS_PER_SUB: usize = 2;
pub const SUBS_PER_POLICY: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum OpKind {
    ShearX = 0,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    AutoContrast,
    Invert,
    Equalize,
    Solarize,
    Posterize,
    Color,
    Brightness,
    Sharpness,
    SamplePairing,
}

impl OpKind {
    pub const COUNT: usize = 14;

    pub const ALL: [OpKind; 14] = [
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::Rotate,
        OpKind::AutoContrast,
        OpKind::Invert,
        OpKind::Equalize,
        OpKind::Solarize,
        OpKind::Posterize,
        OpKind::Color,
        OpKind::Brightness,
        OpKind::Sharpness,
        OpKind::SamplePairing,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::ShearX => "ShearX",
            OpKind::ShearY => "ShearY",
            OpKind::TranslateX => "TranslateX",
            OpKind::TranslateY => "TranslateY",
            OpKind::Rotate => "Rotate",
            OpKind::AutoContrast => "AutoContrast",
            OpKind::Invert => "Invert",
            OpKind::Equalize => "Equalize",
            OpKind::Solarize => "Solarize",
            OpKind::Posterize => "Posterize",
            OpKind::Color => "Color",
            OpKind::Brightness => "Brightness",
            OpKind::Sharpness => "Sharpness",
            OpKind::SamplePairing => "SamplePairing",
        }
    }

    /// Geometric kinds whose magnitude gets a random sign.
    pub fn is_signed(self) -> bool {
        matches!(
            self,
            OpKind::ShearX | OpKind::ShearY | OpKind::TranslateX | OpKind::TranslateY | OpKind::Rotate
        )
    }

    /// Kinds that act on pixel values only (no spatial resampling, no partner).
    pub fn is_color_only(self) -> bool {
        matches!(
            self,
            OpKind::AutoContrast
                | OpKind::Invert
                | OpKind::Equalize
                | OpKind::Solarize
                | OpKind::Posterize
                | OpKind::Color
                | OpKind::Brightness
                | OpKind::Sharpness
        )
    }

    /// Unsigned magnitude for `bin` (linear over the kind's range).
    ///
    /// Shear: factor 0..0.3. Translate: fraction of side 0..0.33. Rotate:
    /// 0..30 degrees. Solarize: threshold 256..0. Posterize: bits 8..4.
    /// Color/Brightness/Sharpness: factor 0.1..1.9. SamplePairing: weight
    /// 0..0.4. AutoContrast/Invert/Equalize ignore it.
    pub fn magnitude(self, bin: u8) -> f32 {
        let t = bin.min(MAG_BINS - 1) as f32 / (MAG_BINS - 1) as f32;
        match self {
            OpKind::ShearX | OpKind::ShearY => 0.3 * t,
            OpKind::TranslateX | OpKind::TranslateY => 0.33 * t,
            OpKind::Rotate => 30.0 * t,
            OpKind::Solarize => 256.0 * (1.0 - t),
            OpKind::Posterize => 8.0 - 4.0 * t,
            OpKind::Color | OpKind::Brightness | OpKind::Sharpness => 0.1 + 1.8 * t,
            OpKind::SamplePairing => 0.4 * t,
            OpKind::AutoContrast | OpKind::Invert | OpKind::Equalize => 0.0,
        }
    }
}

impl TryFrom<u8> for OpKind {
    type Error = Error;

    fn try_from(code: u8) -> Result<Self> {
        OpKind::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Augment(format!("unknown op kind {code}")))
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Augment(format!("unknown op kind {s:?}")))
    }
}

/// One operation slot: kind, application probability bin and magnitude bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OpSpec {
    kind: OpKind,
    prob_bin: u8,
    mag_bin: u8,
}

impl OpSpec {
    pub fn new(kind: OpKind, prob_bin: u8, mag_bin: u8) -> Result<Self> {
        if prob_bin >= PROB_BINS || mag_bin >= MAG_BINS {
            return Err(Error::Augment(format!(
                "{kind}: prob_bin {prob_bin} / mag_bin {mag_bin} out of range"
            )));
        }
        Ok(OpSpec {
            kind,
            prob_bin,
            mag_bin,
        })
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn prob_bin(&self) -> u8 {
        self.prob_bin
    }

    pub fn mag_bin(&self) -> u8 {
        self.mag_bin
    }

    pub fn probability(&self) -> f32 {
        self.prob_bin as f32 / (PROB_BINS - 1) as f32
    }
}

impl fmt::Display for OpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({:.1},{})", self.kind, self.probability(), self.mag_bin)
    }
}

impl FromStr for OpSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Augment(format!("malformed op {s:?}, expected Name(prob,magBin)"));
        let s = s.trim();
        let open = s.find('(').ok_or_else(bad)?;
        let inner = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let (p, m) = inner.split_once(',').ok_or_else(bad)?;
        let prob: f32 = p.trim().parse().map_err(|_| bad())?;
        let mag: u8 = m.trim().parse().map_err(|_| bad())?;
        if !(0.0..=1.0).contains(&prob) {
            return Err(bad());
        }
        let prob_bin = (prob * (PROB_BINS - 1) as f32).round() as u8;
        OpSpec::new(s[..open].trim().parse()?, prob_bin, mag)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SubPolicy {
    pub ops: [OpSpec; OPS_PER_SUB],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Policy {
    pub subs: [SubPolicy; SUBS_PER_POLICY],
}

impl Policy {
    /// Every slot `Invert` with zero probability: applying it never changes an image.
    pub fn identity() -> Self {
        let op = OpSpec::new(OpKind::Invert, 0, 0).expect("valid");
        Policy {
            subs: [SubPolicy { ops: [op; 2] }; SUBS_PER_POLICY],
        }
    }

    pub fn ops(&self) -> impl Iterator<Item = &OpSpec> {
        self.subs.iter().flat_map(|s| s.ops.iter())
    }

    /// Builds a policy from 10 slots in sub-policy-major order.
    pub fn from_slots(slots: &[OpSpec]) -> Result<Self> {
        if slots.len() != SUBS_PER_POLICY * OPS_PER_SUB {
            return Err(Error::Augment(format!("policy needs 10 ops, got {}", slots.len())));
        }
        let sub = |i: usize| SubPolicy {
            ops: [slots[2 * i], slots[2 * i + 1]],
        };
        Ok(Policy {
            subs: [sub(0), sub(1), sub(2), sub(3), sub(4)],
        })
    }

    /// Uniform over kinds, magnitude bins and probability bins.
    pub fn random(rng: &mut impl Rng) -> Self {
        let slots: Vec<OpSpec> = (0..SUBS_PER_POLICY * OPS_PER_SUB)
            .map(|_| {
                let kind = OpKind::ALL[rng.random_range(0..OpKind::COUNT)];
                OpSpec::new(kind, rng.random_range(0..PROB_BINS), rng.random_range(0..MAG_BINS))
                    .expect("in range")
            })
            .collect();
        Policy::from_slots(&slots).expect("10 slots")
    }

    pub fn uses_pairing(&self) -> bool {
        self.ops().any(|o| o.kind == OpKind::SamplePairing)
    }
}

impl fmt::Display for Policy {
    /// Five lines of `Name(prob,magBin) ; Name(prob,magBin)`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.subs.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{} ; {}", s.ops[0], s.ops[1])?;
        }
        Ok(())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut slots = Vec::new();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let parts: Vec<&str> = line.split(';').collect();
            if parts.len() != OPS_PER_SUB {
                return Err(Error::Augment(format!("sub-policy line {line:?} needs two ops")));
            }
            for p in parts {
                slots.push(p.parse()?);
            }
        }
        Policy::from_slots(&slots)
    }
}

/// Applies one operation with its probability. `partner` is required exactly
/// for `SamplePairing`.
pub fn apply_op(
    image: &RgbImage,
    spec: &OpSpec,
    rng: &mut impl Rng,
    partner: Option<&RgbImage>,
) -> Result<RgbImage> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Augment("empty image".into()));
    }
    if spec.kind == OpKind::SamplePairing && partner.is_none() {
        return Err(Error::Augment("SamplePairing needs a partner image".into()));
    }
    let u: f32 = rng.random();
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    if u >= spec.probability() {
        return Ok(image.clone());
    }
    let m = spec.kind.magnitude(spec.mag_bin);
    let signed = if spec.kind.is_signed() { sign * m } else { m };
    let out = match spec.kind {
        OpKind::ShearX => k::shear_x(image, signed),
        OpKind::ShearY => k::shear_y(image, signed),
        OpKind::TranslateX => k::translate_x(image, signed * image.width() as f32),
        OpKind::TranslateY => k::translate_y(image, signed * image.height() as f32),
        OpKind::Rotate => k::rotate(image, signed),
        OpKind::AutoContrast => k::auto_contrast(image),
        OpKind::Invert => k::invert(image),
        OpKind::Equalize => k::equalize(image),
        OpKind::Solarize => k::solarize(image, m.round() as u16),
        OpKind::Posterize => k::posterize(image, m.round() as u8),
        OpKind::Color => k::color(image, m),
        OpKind::Brightness => k::brightness(image, m),
        OpKind::Sharpness => k::sharpness(image, m),
        OpKind::SamplePairing => k::sample_pairing(image, partner.expect("checked"), m),
    };
    Ok(out)
}

/// Picks one sub-policy uniformly and applies its two operations in order.
/// Returns the augmented image and the chosen sub-policy index.
pub fn apply_policy(
    image: &RgbImage,
    policy: &Policy,
    rng: &mut impl Rng,
    partner_pool: &[RgbImage],
) -> Result<(RgbImage, usize)> {
    if policy.uses_pairing() && partner_pool.is_empty() {
        return Err(Error::Augment("policy uses SamplePairing but the partner pool is empty".into()));
    }
    let idx = rng.random_range(0..SUBS_PER_POLICY);
    let mut img = image.clone();
    for spec in &policy.subs[idx].ops {
        let partner = if spec.kind == OpKind::SamplePairing {
            Some(&partner_pool[rng.random_range(0..partner_pool.len())])
        } else {
            None
        };
        img = apply_op(&img, spec, rng, partner)?;
    }
    Ok((img, idx))
}

/// Size of the kind × magnitude search space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchSpace {
    /// Kind × magnitude choices for one operation slot.
    pub per_slot: u64,
    /// Operation slots in one policy.
    pub slots: u32,
}

impl SearchSpace {
    pub fn total(&self) -> u128 {
        (self.per_slot as u128).pow(self.slots)
    }

    pub fn log10_total(&self) -> f64 {
        self.slots as f64 * (self.per_slot as f64).log10()
    }
}

pub fn search_space_cardinality() -> SearchSpace {
    SearchSpace {
        per_slot: OpKind::COUNT as u64 * MAG_BINS as u64,
        slots: (SUBS_PER_POLICY * OPS_PER_SUB) as u32,
    }
}
