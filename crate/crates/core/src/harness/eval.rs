//! Retrieval evaluation: recall@K and mean average precision.

use serde::{Deserialize, Serialize};

use super::dataset::PlaceDataset;
use crate::augment::Normalizer;
use crate::descriptor::{RegionDescriptor, RetrievalNet};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    /// Fraction of evaluated queries with a match in the top K, per K.
    pub recalls: Vec<f64>,
    pub map: f64,
    /// 1-based rank of the first correct result, per evaluated query.
    pub first_correct: Vec<Option<usize>>,
    pub evaluated: usize,
    /// Queries with no in-radius database image.
    pub excluded: usize,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recalls[i])
    }
}

/// Average precision of a ranked relevance list.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total as f64
}

/// One retrieval item: coordinates plus global descriptor.
#[derive(Clone, Debug)]
pub struct Item<'a, T> {
    pub x: f64,
    pub y: f64,
    pub global: &'a [T],
}

/// Ranks the database for every query by Euclidean distance (ties: lower
/// database index) and scores the rankings.
pub fn evaluate_items<T: Real>(
    queries: &[Item<'_, T>],
    database: &[Item<'_, T>],
    ks: &[usize],
    radius: f64,
) -> Result<EvalReport> {
    if queries.is_empty() || database.is_empty() {
        return Err(Error::invalid("evaluate", "empty query or database set"));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let per_query = crate::exec::map_slice(queries, |q| {
        let rel: Vec<bool> = database
            .iter()
            .map(|d| ((q.x - d.x).powi(2) + (q.y - d.y).powi(2)).sqrt() <= radius)
            .collect();
        if !rel.iter().any(|&r| r) {
            return None;
        }
        let mut order: Vec<(f64, usize)> = database
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let s: f64 = q.global.iter().zip(d.global).map(|(&a, &b)| (a - b).f64().powi(2)).sum();
                (s, i)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let ranked: Vec<bool> = order.iter().map(|&(_, i)| rel[i]).collect();
        let first = ranked.iter().position(|&r| r).map(|p| p + 1);
        Some((first, average_precision(&ranked)))
    });
    let scored: Vec<(Option<usize>, f64)> = per_query.iter().flatten().copied().collect();
    let evaluated = scored.len();
    let excluded = queries.len() - evaluated;
    if evaluated == 0 {
        return Err(Error::invalid("evaluate", "no query has an in-radius database image"));
    }
    let recalls = ks
        .iter()
        .map(|&k| scored.iter().filter(|(f, _)| f.is_some_and(|r| r <= k)).count() as f64 / evaluated as f64)
        .collect();
    Ok(EvalReport {
        ks,
        recalls,
        map: scored.iter().map(|s| s.1).sum::<f64>() / evaluated as f64,
        first_correct: scored.iter().map(|s| s.0).collect(),
        evaluated,
        excluded,
    })
}

/// Describes every image in `dataset` with `net`, in record order.
pub fn describe_dataset<T: Real>(
    net: &RetrievalNet<T>,
    dataset: &PlaceDataset,
    images: &[image::RgbImage],
    norm: &Normalizer,
) -> Result<Vec<RegionDescriptor<T>>> {
    if images.len() != dataset.records.len() {
        return Err(Error::invalid("describe_dataset", "image count differs from record count"));
    }
    crate::exec::try_map_range(images.len(), |i| net.describe(&norm.to_tensor(&images[i])))
}

pub fn evaluate<T: Real>(
    net: &RetrievalNet<T>,
    dataset: &PlaceDataset,
    images: &[image::RgbImage],
    norm: &Normalizer,
    ks: &[usize],
) -> Result<(EvalReport, Vec<RegionDescriptor<T>>)> {
    let descs = describe_dataset(net, dataset, images, norm)?;
    let item = |i: usize| Item {
        x: dataset.records[i].x,
        y: dataset.records[i].y,
        global: descs[i].global(),
    };
    let qs: Vec<_> = dataset.queries().iter().map(|&i| item(i)).collect();
    let db: Vec<_> = dataset.database().iter().map(|&i| item(i)).collect();
    let report = evaluate_items(&qs, &db, ks, dataset.radius)?;
    Ok((report, descs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_example() {
        let ap = average_precision(&[true, false, true, false, false]);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false]), 0.0);
    }
}
