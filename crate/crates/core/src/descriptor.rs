//! Retrieval network: a small convolutional backbone followed by
//! region-decomposed VLAD pooling.
//!
//! The feature map is split into four quarters. Each quarter yields a VLAD
//! residual matrix; halves and the global matrix are sums of quarter residuals.
//! All nine matrices are intra-normalized, flattened and L2-normalized.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Region order inside a descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    TopLeft = 0,
    TopRight,
    BottomLeft,
    BottomRight,
    Top,
    Bottom,
    Left,
    Right,
    Global,
}

impl Region {
    pub const COUNT: usize = 9;
    pub const ALL: [Region; 9] = [
        Region::TopLeft,
        Region::TopRight,
        Region::BottomLeft,
        Region::BottomRight,
        Region::Top,
        Region::Bottom,
        Region::Left,
        Region::Right,
        Region::Global,
    ];
    pub const QUARTERS: [Region; 4] = [
        Region::TopLeft,
        Region::TopRight,
        Region::BottomLeft,
        Region::BottomRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Square input side in pixels.
    pub resolution: usize,
    /// Output channels of each 3×3 conv stage.
    pub widths: Vec<usize>,
    /// Number of leading stages followed by a 2×2 max-pool.
    pub pooled_stages: usize,
    /// VLAD clusters.
    pub clusters: usize,
    /// Sharpness of the centroid-derived soft-assignment initialization.
    pub assign_scale: f64,
    /// L2-normalize local features across channels before VLAD.
    pub normalize_features: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            resolution: 96,
            widths: vec![16, 32, 48, 64],
            pooled_stages: 3,
            clusters: 8,
            assign_scale: 10.0,
            normalize_features: true,
        }
    }
}

impl NetConfig {
    /// `(channels, height, width)` of the backbone output.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        let side = self.resolution >> self.pooled_stages;
        (*self.widths.last().unwrap_or(&3), side, side)
    }

    /// Length of each region vector (`K * D_f`).
    pub fn descriptor_dim(&self) -> usize {
        self.clusters * self.feature_dims().0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("stage widths must be non-empty and positive: {:?}", self.widths));
        }
        if self.pooled_stages > self.widths.len() {
            return bad("more pooled stages than stages".into());
        }
        if self.clusters == 0 {
            return bad("need at least one cluster".into());
        }
        if self.resolution % (1 << self.pooled_stages) != 0 {
            return bad(format!(
                "resolution {} not divisible by 2^{}",
                self.resolution, self.pooled_stages
            ));
        }
        let (_, h, w) = self.feature_dims();
        if h == 0 || h % 2 != 0 || w % 2 != 0 {
            return bad(format!("feature map {h}x{w} must have even, non-zero sides"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layout {
    convs: Vec<(ParamId, ParamId)>,
    centroids: ParamId,
    assign_w: ParamId,
    assign_b: ParamId,
}

/// The retrieval network and its parameters θ.
#[derive(Clone, Debug)]
pub struct RetrievalNet<T: Real> {
    config: NetConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Parameters of one network bound onto a tape.
#[derive(Clone, Debug)]
pub struct BoundNet {
    convs: Vec<(Var, Var)>,
    centroids: Var,
    assign_w: Var,
    assign_b: Var,
}

/// Nine unit-norm region vectors of one image, stored row-major `[9, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionDescriptor<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> RegionDescriptor<T> {
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != Region::COUNT * dim {
            return Err(Error::ShapeMismatch {
                op: "region descriptor",
                lhs: vec![Region::COUNT, dim],
                rhs: vec![data.len()],
            });
        }
        Ok(RegionDescriptor { dim, data })
    }

    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        let dim = t.shape().last().copied().unwrap_or(0);
        Self::new(dim, t.into_data())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn region(&self, r: Region) -> &[T] {
        self.row(r.index())
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn global(&self) -> &[T] {
        self.region(Region::Global)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![Region::COUNT, self.dim], self.data.clone()).expect("9 rows")
    }
}

fn he_normal<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

impl<T: Real> RetrievalNet<T> {
    pub fn new(config: NetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            let wid = params.add(format!("conv{i}.weight"), he_normal(rng, &[w, in_ch, 3, 3], in_ch * 9));
            let bid = params.add(format!("conv{i}.bias"), Tensor::zeros(&[w]));
            convs.push((wid, bid));
            in_ch = w;
        }
        let (d, _, _) = config.feature_dims();
        let k = config.clusters;
        let mut cent = vec![0.0f64; k * d];
        for row in cent.chunks_mut(d) {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        // logits_k(x) = 2α<c_k, f> - α|c_k|^2: a softened nearest-centroid rule
        let a = config.assign_scale;
        let assign_w: Vec<f64> = cent.iter().map(|c| 2.0 * a * c).collect();
        let assign_b = vec![-a; k];
        let centroids = params.add("vlad.centroids", Tensor::from_f64(&[k, d], &cent)?);
        let assign_w = params.add("vlad.assign.weight", Tensor::from_f64(&[k, d, 1, 1], &assign_w)?);
        let assign_b = params.add("vlad.assign.bias", Tensor::from_f64(&[k], &assign_b)?);
        Ok(RetrievalNet {
            config,
            params,
            layout: Layout {
                convs,
                centroids,
                assign_w,
                assign_b,
            },
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replaces the centroids (e.g. with a k-means warm start) and re-derives
    /// the assignment projection from them.
    pub fn set_centroids(&mut self, centroids: Tensor<T>) -> Result<()> {
        let k = self.config.clusters;
        let d = self.config.feature_dims().0;
        if centroids.shape() != [k, d] {
            return Err(Error::ShapeMismatch {
                op: "set_centroids",
                lhs: vec![k, d],
                rhs: centroids.shape().to_vec(),
            });
        }
        let a = T::of(self.config.assign_scale);
        let two = T::of(2.0);
        let w = centroids.map(|c| two * a * c).reshaped(&[k, d, 1, 1])?;
        let b = Tensor::from_fn(&[k], |i| {
            let row = &centroids.data()[i * d..(i + 1) * d];
            -a * row.iter().map(|&v| v * v).sum::<T>()
        });
        *self.params.get_mut(self.layout.centroids) = centroids;
        *self.params.get_mut(self.layout.assign_w) = w;
        *self.params.get_mut(self.layout.assign_b) = b;
        Ok(())
    }

    /// Records the parameters on `tape`, tracked when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundNet {
        let mut leaf = |id: ParamId| {
            if trainable {
                tape.param(&self.params, id)
            } else {
                tape.frozen(&self.params, id)
            }
        };
        BoundNet {
            convs: self.layout.convs.iter().map(|&(w, b)| (leaf(w), leaf(b))).collect(),
            centroids: leaf(self.layout.centroids),
            assign_w: leaf(self.layout.assign_w),
            assign_b: leaf(self.layout.assign_b),
        }
    }

    /// `[3,R,R]` normalized image → `[D_f,H',W']` feature map.
    pub fn backbone_forward(&self, tape: &mut Tape<T>, net: &BoundNet, image: Var) -> Result<Var> {
        let r = self.config.resolution;
        if tape.shape(image) != [3, r, r] {
            return Err(Error::ShapeMismatch {
                op: "backbone input",
                lhs: vec![3, r, r],
                rhs: tape.shape(image).to_vec(),
            });
        }
        let mut x = image;
        for (i, &(w, b)) in net.convs.iter().enumerate() {
            x = tape.conv2d(x, w, Some(b), 1, 1)?;
            x = tape.relu(x);
            if i < self.config.pooled_stages {
                x = tape.max_pool(x, 2, 2)?;
            }
        }
        if self.config.normalize_features {
            x = tape.l2_normalize(x, 0)?;
        }
        Ok(x)
    }

    /// Soft-assignment maps `[K,H',W']` (softmax over clusters per location).
    pub fn soft_assign(&self, tape: &mut Tape<T>, net: &BoundNet, features: Var) -> Result<Var> {
        let logits = tape.conv2d(features, net.assign_w, Some(net.assign_b), 1, 0)?;
        tape.softmax(logits, 0)
    }

    /// Full pipeline on the tape; returns the stacked `[9, K*D_f]` descriptor.
    pub fn describe_on_tape(&self, tape: &mut Tape<T>, net: &BoundNet, image: Var) -> Result<Var> {
        let f = self.backbone_forward(tape, net, image)?;
        let a = self.soft_assign(tape, net, f)?;
        let q = quarter_residuals(tape, f, a, net.centroids)?;
        let regions = assemble_regions(tape, q)?;
        tape.concat(&regions, 0)
    }

    /// Forward-only descriptor with frozen parameters.
    pub fn describe(&self, image: &Tensor<T>) -> Result<RegionDescriptor<T>> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let d = self.describe_on_tape(&mut tape, &net, x)?;
        RegionDescriptor::from_tensor(tape.value(d).clone())
    }

    /// Descriptors for many images, fanned out over worker threads.
    pub fn describe_all(&self, images: &[Tensor<T>]) -> Result<Vec<RegionDescriptor<T>>> {
        crate::exec::try_map_range(images.len(), |i| self.describe(&images[i]))
    }
}

/// VLAD residuals of the four quarters, each `[K,D]`:
/// `Σ_{x∈R} a_k(x)·(f(x) − c_k)`.
///
/// `features` is `[D,H,W]`, `assign` is `[K,H,W]`, `centroids` is `[K,D]`.
pub fn quarter_residuals<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    assign: Var,
    centroids: Var,
) -> Result<[Var; 4]> {
    let fs = tape.shape(features).to_vec();
    let as_ = tape.shape(assign).to_vec();
    let cs = tape.shape(centroids).to_vec();
    if fs.len() != 3 || as_.len() != 3 || fs[1..] != as_[1..] || cs != [as_[0], fs[0]] {
        return Err(Error::ShapeMismatch {
            op: "quarter_residuals",
            lhs: fs,
            rhs: as_,
        });
    }
    let (d, h, w) = (fs[0], fs[1], fs[2]);
    let k = as_[0];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("quarter_residuals", format!("odd feature map {h}x{w}")));
    }
    let (hh, hw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(4);
    for (r0, c0) in [(0, 0), (0, hw), (hh, 0), (hh, hw)] {
        let f = tape.slice(features, 1, r0, hh)?;
        let f = tape.slice(f, 2, c0, hw)?;
        let f = tape.reshape(f, &[d, hh * hw])?;
        let a = tape.slice(assign, 1, r0, hh)?;
        let a = tape.slice(a, 2, c0, hw)?;
        let a = tape.reshape(a, &[k, hh * hw])?;
        let ft = tape.transpose(f)?;
        let weighted = tape.matmul(a, ft)?;
        let mass = tape.sum_axis(a, 1)?;
        let shift = tape.mul(mass, centroids)?;
        out.push(tape.sub(weighted, shift)?);
    }
    Ok([out[0], out[1], out[2], out[3]])
}

/// Raw (pre-normalization) residual matrices for all nine regions, in
/// [`Region`] order.
pub fn region_residuals<T: Real>(tape: &mut Tape<T>, q: [Var; 4]) -> Result<[Var; 9]> {
    let [tl, tr, bl, br] = q;
    let top = tape.add(tl, tr)?;
    let bottom = tape.add(bl, br)?;
    let left = tape.add(tl, bl)?;
    let right = tape.add(tr, br)?;
    let global = tape.add(top, bottom)?;
    Ok([tl, tr, bl, br, top, bottom, left, right, global])
}

/// Nine unit-norm `[1, K*D]` vectors from the four quarter residual matrices.
pub fn assemble_regions<T: Real>(tape: &mut Tape<T>, q: [Var; 4]) -> Result<[Var; 9]> {
    let raw = region_residuals(tape, q)?;
    let (k, d) = (tape.shape(q[0])[0], tape.shape(q[0])[1]);
    let mut out = [raw[0]; 9];
    for (slot, &m) in out.iter_mut().zip(raw.iter()) {
        let intra = tape.l2_normalize(m, 1)?;
        let flat = tape.reshape(intra, &[1, k * d])?;
        *slot = tape.l2_normalize(flat, 1)?;
    }
    Ok(out)
}
