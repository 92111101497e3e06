//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

pub mod gradcases;

use std::collections::{BTreeMap, BTreeSet};

use abmt::evaluation::RetrievalSplit;
use abmt::pseudo_labels::DistanceMatrix;
use abmt::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rand_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn distance_oracle(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points.iter().map(|p| points.iter().map(|q| euclid(p, q)).collect()).collect()
}

pub fn to_matrix(d: &[Vec<f64>]) -> DistanceMatrix {
    DistanceMatrix::new(d.len(), d.iter().flatten().copied().collect()).unwrap()
}

/// Relabels clusters by first appearance so partitions compare directly.
pub fn canonical(labels: &[i64]) -> Vec<i64> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            if l < 0 {
                -1
            } else {
                let next = map.len() as i64;
                *map.entry(l).or_insert(next)
            }
        })
        .collect()
}

/// Reference DBSCAN: core points are joined by union-find over the
/// eps-graph; a border point goes to the adjacent cluster whose smallest core
/// index is lowest.
pub fn dbscan_oracle(d: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = d.len();
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| d[i][j] <= eps).count() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && d[i][j] <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    // Component key: smallest core index in the component.
    let mut min_core: BTreeMap<usize, usize> = BTreeMap::new();
    for i in (0..n).filter(|&i| core[i]) {
        let r = find(&mut parent, i);
        min_core.entry(r).and_modify(|m| *m = (*m).min(i)).or_insert(i);
    }
    let mut labels = vec![-1i64; n];
    for i in 0..n {
        if core[i] {
            labels[i] = min_core[&find(&mut parent, i)] as i64;
        } else {
            labels[i] = (0..n)
                .filter(|&j| core[j] && d[i][j] <= eps)
                .map(|j| min_core[&find(&mut parent, j)] as i64)
                .min()
                .unwrap_or(-1);
        }
    }
    canonical(&labels)
}

fn knn_set(d: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = d[i].iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pairs.into_iter().take(k + 1).map(|(_, j)| j).collect()
}

fn reciprocal_set(d: &[Vec<f64>], i: usize, k: usize) -> BTreeSet<usize> {
    knn_set(d, i, k)
        .into_iter()
        .filter(|&j| knn_set(d, j, k).contains(&i))
        .collect()
}

/// Reference k-reciprocal re-ranking with explicit sets and sparse vectors.
pub fn rerank_oracle(d: &[Vec<f64>], k1: usize, k2: usize, lambda: f64) -> Vec<Vec<f64>> {
    let n = d.len();
    let half = (k1 + 1) / 2;
    let v: Vec<BTreeMap<usize, f64>> = (0..n)
        .map(|i| {
            let r = reciprocal_set(d, i, k1);
            let mut expanded = r.clone();
            for &c in &r {
                let rc = reciprocal_set(d, c, half);
                let overlap = rc.intersection(&r).count() as f64;
                if overlap >= 2.0 / 3.0 * rc.len() as f64 {
                    expanded.extend(rc);
                }
            }
            let raw: BTreeMap<usize, f64> = expanded.iter().map(|&j| (j, (-d[i][j] * d[i][j]).exp())).collect();
            let z: f64 = raw.values().sum();
            raw.into_iter().map(|(j, w)| (j, w / z)).collect()
        })
        .collect();
    let vq: Vec<BTreeMap<usize, f64>> = (0..n)
        .map(|i| {
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            let nbrs = knn_set(d, i, k2 - 1);
            for &j in &nbrs {
                for (&c, &w) in &v[j] {
                    *acc.entry(c).or_default() += w / nbrs.len() as f64;
                }
            }
            acc
        })
        .collect();
    let jac = |i: usize, j: usize| -> f64 {
        if i == j {
            return 0.0;
        }
        let keys: BTreeSet<usize> = vq[i].keys().chain(vq[j].keys()).copied().collect();
        let (mut mn, mut mx) = (0.0, 0.0);
        for c in keys {
            let a = vq[i].get(&c).copied().unwrap_or(0.0);
            let b = vq[j].get(&c).copied().unwrap_or(0.0);
            mn += a.min(b);
            mx += a.max(b);
        }
        1.0 - mn / mx
    };
    let m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| lambda * d[i][j] + (1.0 - lambda) * jac(i, j)).collect())
        .collect();
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { (m[i][j] + m[j][i]) / 2.0 }).collect())
        .collect()
}

/// Random retrieval split with small id/camera alphabets so exclusions,
/// ties and missing matches all occur.
pub fn random_split(rng: &mut ChaCha8Rng) -> RetrievalSplit {
    let nq = rng.random_range(1..8);
    let ng = rng.random_range(1..=30);
    let d = rng.random_range(1..4);
    let n_ids = rng.random_range(1..6);
    // Coarse coordinates produce exact distance ties.
    let mut coords = |n: usize| {
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| f64::from(rng.random_range(-3i32..=3)) * 0.5).collect(),
        )
        .unwrap()
    };
    let q = coords(nq);
    let g = coords(ng);
    let ids = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(0..n_ids)).collect::<Vec<i64>>();
    let cams = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(0..3)).collect::<Vec<i64>>();
    let (qi, gi) = (ids(nq, rng), ids(ng, rng));
    let (qc, gc) = (cams(nq, rng), cams(ng, rng));
    RetrievalSplit::new(q, g, qi, gi, qc, gc).unwrap()
}

/// Per-query `(AP, first hit rank)` by full sort and direct precision sums;
/// `None` for queries without a valid relevant item.
pub fn retrieval_oracle(s: &RetrievalSplit) -> Vec<Option<(f64, usize)>> {
    (0..s.query_ids.len())
        .map(|q| {
            let mut list: Vec<(f64, usize)> = (0..s.gallery_ids.len())
                .filter(|&g| s.gallery_ids[g] != s.query_ids[q] || s.gallery_cams[g] != s.query_cams[q])
                .map(|g| (euclid(s.query_sigs.row(q), s.gallery_sigs.row(g)), g))
                .collect();
            list.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rel: Vec<bool> = list.iter().map(|&(_, g)| s.gallery_ids[g] == s.query_ids[q]).collect();
            let total = rel.iter().filter(|&&r| r).count();
            if total == 0 {
                return None;
            }
            let mut ap = 0.0;
            for r in 0..rel.len() {
                if rel[r] {
                    let hits_in_prefix = rel[..=r].iter().filter(|&&x| x).count();
                    ap += hits_in_prefix as f64 / (r + 1) as f64;
                }
            }
            let first = rel.iter().position(|&r| r).unwrap() + 1;
            Some((ap / total as f64, first))
        })
        .collect()
}
