//! Retrieval evaluation: CMC and mAP with same-identity-same-camera
//! exclusion, always over raw Euclidean distances.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, AbmtError, Result};
use crate::tensor::Tensor;

/// Ranks reported in the metrics JSON.
pub const REPORT_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSplit {
    pub query_sigs: Tensor,
    pub gallery_sigs: Tensor,
    pub query_ids: Vec<i64>,
    pub gallery_ids: Vec<i64>,
    pub query_cams: Vec<i64>,
    pub gallery_cams: Vec<i64>,
}

impl RetrievalSplit {
    pub fn new(
        query_sigs: Tensor,
        gallery_sigs: Tensor,
        query_ids: Vec<i64>,
        gallery_ids: Vec<i64>,
        query_cams: Vec<i64>,
        gallery_cams: Vec<i64>,
    ) -> Result<Self> {
        if query_sigs.shape().len() != 2 || gallery_sigs.shape().len() != 2 {
            return dim_err("signatures must be matrices");
        }
        if query_sigs.row_len() != gallery_sigs.row_len() {
            return dim_err("query and gallery signature widths differ");
        }
        if query_ids.len() != query_sigs.rows()
            || query_cams.len() != query_sigs.rows()
            || gallery_ids.len() != gallery_sigs.rows()
            || gallery_cams.len() != gallery_sigs.rows()
        {
            return dim_err("id/camera arrays do not match signature rows");
        }
        Ok(Self {
            query_sigs,
            gallery_sigs,
            query_ids,
            gallery_ids,
            query_cams,
            gallery_cams,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.query_ids.len()
    }

    fn distance(&self, q: usize, g: usize) -> f64 {
        self.query_sigs
            .row(q)
            .iter()
            .zip(self.gallery_sigs.row(g))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn relevant(&self, q: usize, g: usize) -> bool {
        self.gallery_ids[g] == self.query_ids[q]
    }
}

/// Valid gallery indices for query `q`, nearest first, ties by index.
pub fn rank_gallery(split: &RetrievalSplit, q: usize) -> Result<Vec<usize>> {
    if q >= split.num_queries() {
        return Err(AbmtError::Evaluation(format!("query {q} out of range")));
    }
    let mut scored: Vec<(f64, usize)> = (0..split.gallery_ids.len())
        .filter(|&g| !(split.gallery_ids[g] == split.query_ids[q] && split.gallery_cams[g] == split.query_cams[q]))
        .map(|g| (split.distance(q, g), g))
        .collect();
    if scored.is_empty() {
        return Err(AbmtError::Evaluation(format!("query {q} has an empty valid gallery")));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, g)| g).collect())
}

/// 1-based ranks of the relevant items in the query's ranking, or `None`
/// when the query has no valid gallery or no relevant item.
fn hit_positions(split: &RetrievalSplit, q: usize) -> Option<Vec<usize>> {
    let order = rank_gallery(split, q).ok()?;
    let hits: Vec<usize> = order
        .iter()
        .enumerate()
        .filter(|(_, &g)| split.relevant(q, g))
        .map(|(r, _)| r + 1)
        .collect();
    (!hits.is_empty()).then_some(hits)
}

pub fn average_precision(hits: &[usize]) -> f64 {
    hits.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum::<f64>() / hits.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub num_queries: usize,
    pub num_skipped: usize,
}

/// mAP and CMC at `ranks` over all valid queries. Queries with no valid
/// relevant gallery item are skipped and counted.
pub fn evaluate(split: &RetrievalSplit, ranks: &[usize]) -> Result<Metrics> {
    if ranks.contains(&0) {
        return Err(AbmtError::Evaluation("CMC ranks start at 1".into()));
    }
    let hits: Vec<Vec<usize>> = (0..split.num_queries()).filter_map(|q| hit_positions(split, q)).collect();
    if hits.is_empty() {
        return Err(AbmtError::Evaluation("no valid queries".into()));
    }
    let valid = hits.len() as f64;
    let map = hits.iter().map(|h| average_precision(h)).sum::<f64>() / valid;
    let cmc = ranks
        .iter()
        .map(|&k| (k, hits.iter().filter(|h| h[0] <= k).count() as f64 / valid))
        .collect();
    Ok(Metrics {
        map,
        cmc,
        num_queries: hits.len(),
        num_skipped: split.num_queries() - hits.len(),
    })
}

pub fn mean_average_precision(split: &RetrievalSplit) -> Result<f64> {
    Ok(evaluate(split, &[])?.map)
}

pub fn cmc(split: &RetrievalSplit, ranks: &[usize]) -> Result<Vec<f64>> {
    let m = evaluate(split, ranks)?;
    Ok(ranks.iter().map(|k| m.cmc[k]).collect())
}

/// Expected mAP of a uniformly random gallery ordering, estimated by
/// shuffling each valid query's gallery `trials` times.
pub fn random_ranking_map(split: &RetrievalSplit, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for q in 0..split.num_queries() {
        let Ok(mut order) = rank_gallery(split, q) else {
            continue;
        };
        if !order.iter().any(|&g| split.relevant(q, g)) {
            continue;
        }
        for _ in 0..trials {
            order.shuffle(&mut rng);
            let hits: Vec<usize> = order
                .iter()
                .enumerate()
                .filter(|(_, &g)| split.relevant(q, g))
                .map(|(r, _)| r + 1)
                .collect();
            total += average_precision(&hits);
        }
        count += 1;
    }
    if count == 0 {
        return Err(AbmtError::Evaluation("no valid queries".into()));
    }
    Ok(total / (count * trials.max(1)) as f64)
}
