//! Tuple mining, region similarity labels and the hard/soft retrieval losses.

use std::cmp::Ordering;

use crate::descriptor::{Region, RegionDescriptor};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Regions compared against the query in the similarity vector, per positive.
pub const SIMILARITY_REGIONS: [Region; 5] = [
    Region::Global,
    Region::TopLeft,
    Region::TopRight,
    Region::BottomLeft,
    Region::BottomRight,
];

/// One database image offered to [`mine`].
#[derive(Clone, Copy, Debug)]
pub struct Candidate<'a, T> {
    pub id: usize,
    pub desc: &'a RegionDescriptor<T>,
}

/// A region of a database image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RegionRef {
    pub image: usize,
    pub region: Region,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinedTuple {
    /// Top-k positives, nearest first.
    pub positives: Vec<usize>,
    /// Region of the nearest positive most similar to the query.
    pub hardest_positive: RegionRef,
    /// Negative regions most similar to the query, most similar first.
    pub hard_negatives: Vec<RegionRef>,
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn cmp_real<T: Real>(a: T, b: T) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Nearest `k` of `candidates` to `query` by Euclidean distance of global
/// descriptors; ties go to the lower id.
pub fn nearest<T: Real>(query: &[T], candidates: &[Candidate<'_, T>], k: usize) -> Result<Vec<usize>> {
    if k > candidates.len() {
        return Err(Error::Mining(format!(
            "asked for {k} neighbours from {} candidates",
            candidates.len()
        )));
    }
    let mut scored: Vec<(T, usize)> = candidates
        .iter()
        .map(|c| (sq_dist(query, c.desc.global()), c.id))
        .collect();
    scored.sort_by(|a, b| cmp_real(a.0, b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
}

/// Mines positives, the hardest positive region and hard negative regions.
///
/// `positives` holds database images within the positive radius of the query,
/// `negatives` those beyond it. Fewer than `n_neg` negative regions yields all
/// of them.
pub fn mine<T: Real>(
    query: &RegionDescriptor<T>,
    positives: &[Candidate<'_, T>],
    negatives: &[Candidate<'_, T>],
    k: usize,
    n_neg: usize,
) -> Result<MinedTuple> {
    if k == 0 || n_neg == 0 {
        return Err(Error::Mining("k and N must be positive".into()));
    }
    if negatives.is_empty() {
        return Err(Error::Mining("no negatives beyond the positive radius".into()));
    }
    let q = query.global();
    let pos = nearest(q, positives, k)?;
    let top = positives.iter().find(|c| c.id == pos[0]).expect("mined id exists");
    let mut best = (T::neg_infinity(), Region::TopLeft);
    for r in Region::ALL {
        let s = dot(q, top.desc.region(r));
        if s > best.0 {
            best = (s, r);
        }
    }
    let mut negs: Vec<(T, RegionRef)> = negatives
        .iter()
        .flat_map(|c| {
            Region::ALL.iter().map(move |&r| {
                (
                    dot(q, c.desc.region(r)),
                    RegionRef {
                        image: c.id,
                        region: r,
                    },
                )
            })
        })
        .collect();
    negs.sort_by(|a, b| {
        cmp_real(b.0, a.0)
            .then(a.1.image.cmp(&b.1.image))
            .then(a.1.region.cmp(&b.1.region))
    });
    Ok(MinedTuple {
        positives: pos,
        hardest_positive: RegionRef {
            image: top.id,
            region: best.1,
        },
        hard_negatives: negs.into_iter().take(n_neg).map(|(_, r)| r).collect(),
    })
}

/// Similarity vector `[1, 5*i]`: softmax over `<q, p/τ>` for the global and
/// quarter regions of each positive.
///
/// `query` is `[1,dim]`; each positive is a stacked `[9,dim]` descriptor.
pub fn similarity_vector<T: Real>(
    tape: &mut Tape<T>,
    query: Var,
    positives: &[Var],
    tau: T,
) -> Result<Var> {
    if positives.is_empty() {
        return Err(Error::invalid("similarity_vector", "no positives"));
    }
    if !(tau > T::zero()) {
        return Err(Error::invalid("similarity_vector", "temperature must be positive"));
    }
    let mut rows = Vec::with_capacity(positives.len() * SIMILARITY_REGIONS.len());
    for &p in positives {
        for r in SIMILARITY_REGIONS {
            rows.push(tape.slice(p, 0, r.index(), 1)?);
        }
    }
    let stacked = tape.concat(&rows, 0)?;
    let st = tape.transpose(stacked)?;
    let logits = tape.matmul(query, st)?;
    let logits = tape.scale(logits, T::one() / tau);
    tape.softmax(logits, 1)
}

/// Value-only [`similarity_vector`] for fixed descriptors.
pub fn similarity_values<T: Real>(
    query: &RegionDescriptor<T>,
    positives: &[&RegionDescriptor<T>],
    tau: T,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new(vec![1, query.dim()], query.global().to_vec())?);
    let ps: Vec<Var> = positives.iter().map(|p| tape.constant(p.to_tensor())).collect();
    let s = similarity_vector(&mut tape, q, &ps, tau)?;
    Ok(tape.value(s).clone())
}

/// Soft cross-entropy `-Σ target·log(current)`. No gradient reaches `target`.
pub fn soft_ce_loss<T: Real>(tape: &mut Tape<T>, current: Var, target: Var) -> Result<Var> {
    if tape.shape(current) != tape.shape(target) {
        return Err(Error::ShapeMismatch {
            op: "soft_ce_loss",
            lhs: tape.shape(current).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    let t = tape.constant(tape.value(target).clone());
    let l = tape.log(current);
    let prod = tape.mul(t, l)?;
    let s = tape.sum(prod);
    Ok(tape.neg(s))
}

/// Hard loss `-Σ_j log(e^{<q,p>} / (e^{<q,p>} + e^{<q,n_j>}))`.
///
/// `query` and `positive` are `[1,dim]`, `negatives` is `[N,dim]`.
pub fn hard_loss<T: Real>(tape: &mut Tape<T>, query: Var, positive: Var, negatives: Var) -> Result<Var> {
    let pt = tape.transpose(positive)?;
    let a = tape.matmul(query, pt)?;
    let nt = tape.transpose(negatives)?;
    let b = tape.matmul(query, nt)?;
    let ea = tape.exp(a);
    let eb = tape.exp(b);
    let denom = tape.add(ea, eb)?;
    let ratio = tape.div(ea, denom)?;
    let l = tape.log(ratio);
    let s = tape.sum(l);
    Ok(tape.neg(s))
}

/// `L_h + α·L_s`, or just `L_h` without soft labels.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, hard: Var, soft: Option<Var>, alpha: T) -> Result<Var> {
    match soft {
        None => Ok(hard),
        Some(s) => {
            let w = tape.scale(s, alpha);
            tape.add(hard, w)
        }
    }
}

/// Frozen copy of the previous generation's network, used for soft labels.
#[derive(Clone, Debug)]
pub struct GenerationSnapshot<T: Real> {
    pub net: crate::descriptor::RetrievalNet<T>,
    pub tau: T,
    fingerprint: String,
}

impl<T: Real> GenerationSnapshot<T> {
    pub fn capture(net: &crate::descriptor::RetrievalNet<T>, tau: T) -> Self {
        GenerationSnapshot {
            net: net.clone(),
            tau,
            fingerprint: net.params().fingerprint(),
        }
    }

    /// Fingerprint of the parameters at capture time.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// True while the parameters still hash to the captured fingerprint.
    pub fn is_intact(&self) -> bool {
        self.net.params().fingerprint() == self.fingerprint
    }

    /// Soft labels for a query against its positives.
    pub fn labels(&self, query: &RegionDescriptor<T>, positives: &[&RegionDescriptor<T>]) -> Result<Tensor<T>> {
        similarity_values(query, positives, self.tau)
    }
}
