//! Hard pseudo labels for the unlabeled target domain.
//!
//! Teacher signatures go through pairwise Euclidean distances, k-reciprocal
//! re-ranking and DBSCAN over the re-ranked matrix. K-Means++ is available as
//! the fixed-cluster-count alternative. Cluster means of each branch become
//! the rows of the dynamic classifiers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{normalize_rows, EncoderState};
use crate::error::{dim_err, AbmtError, Result};
use crate::tensor::Tensor;

/// Label of samples that belong to no cluster.
pub const NOISE: i64 = -1;

/// Dense `n x n` distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return dim_err(format!("{} values for a {n} x {n} matrix", values.len()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(AbmtError::Contract("distances must be finite and non-negative".into()));
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Restriction to the leading `m x m` block.
    pub fn leading(&self, m: usize) -> DistanceMatrix {
        let mut values = Vec::with_capacity(m * m);
        for i in 0..m {
            values.extend_from_slice(&self.row(i)[..m]);
        }
        DistanceMatrix { n: m, values }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringMethod {
    DbscanRerank,
    Kmeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Absolute DBSCAN radius. When `None` the radius is the
    /// `eps_quantile`-quantile of the positive re-ranked distances.
    pub eps: Option<f64>,
    pub eps_quantile: f64,
    pub min_pts: usize,
    pub k1: usize,
    pub k2: usize,
    pub lambda_rerank: f64,
    /// Shrink `k1` to `n - 1` on small inputs instead of failing.
    pub clamp_k: bool,
    /// Include source signatures in the re-ranking encoding set.
    pub rerank_with_source: bool,
    /// Cluster count for K-Means; `None` scales 500 clusters per 16522
    /// training images to the target size.
    pub kmeans_k: Option<usize>,
    pub kmeans_max_iter: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            eps: None,
            eps_quantile: 0.02,
            min_pts: 4,
            k1: 20,
            k2: 6,
            lambda_rerank: 0.3,
            clamp_k: true,
            rerank_with_source: false,
            kmeans_k: None,
            kmeans_max_iter: 100,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AbmtError::Parameter(m.to_string()));
        if let Some(e) = self.eps {
            if !(e > 0.0) {
                return bad("eps must be positive");
            }
        }
        if !(self.eps_quantile > 0.0 && self.eps_quantile <= 1.0) {
            return bad("eps_quantile must lie in (0, 1]");
        }
        if self.min_pts < 2 {
            return bad("min_pts must be at least 2");
        }
        if self.k1 == 0 || self.k2 == 0 || self.k2 > self.k1 {
            return bad("re-ranking needs 1 <= k2 <= k1");
        }
        if !(0.0..=1.0).contains(&self.lambda_rerank) {
            return bad("lambda_rerank must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn kmeans_clusters(&self, n: usize) -> usize {
        self.kmeans_k
            .unwrap_or_else(|| ((n as f64) * 500.0 / 16522.0).round() as usize)
            .clamp(2, n.max(2))
    }
}

pub fn pairwise_euclidean(signatures: &Tensor) -> DistanceMatrix {
    let n = signatures.rows();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = signatures
                .row(i)
                .iter()
                .zip(signatures.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    DistanceMatrix { n, values }
}

/// Row-wise neighbor order by `(distance, index)`.
fn rank_rows(dist: &DistanceMatrix) -> Vec<Vec<usize>> {
    (0..dist.n)
        .map(|i| {
            let row = dist.row(i);
            let mut idx: Vec<usize> = (0..dist.n).collect();
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// `{j in kNN(i, k) : i in kNN(j, k)}` where `kNN(i, k)` is the first
/// `k + 1` entries of the rank list (the sample itself included).
fn reciprocal(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    rank[i][..=k]
        .iter()
        .copied()
        .filter(|&j| rank[j][..=k].contains(&i))
        .collect()
}

/// k-reciprocal re-ranking. Returns
/// `lambda * d + (1 - lambda) * d_jaccard`, symmetrized as `(M + M^T) / 2`.
pub fn k_reciprocal_rerank(dist: &DistanceMatrix, cfg: &ClusterConfig) -> Result<DistanceMatrix> {
    let n = dist.n;
    let mut k1 = cfg.k1;
    if n <= k1 {
        if !cfg.clamp_k || n < 2 {
            return Err(AbmtError::Parameter(format!("re-ranking needs more than k1 = {k1} samples, got {n}")));
        }
        k1 = n - 1;
    }
    let k2 = cfg.k2.clamp(1, k1);
    let half = k1.div_ceil(2);
    let rank = rank_rows(dist);

    let mut v = vec![0.0; n * n];
    for i in 0..n {
        let base = reciprocal(&rank, i, k1);
        let mut expanded = base.clone();
        for &c in &base {
            let cand = reciprocal(&rank, c, half);
            let overlap = cand.iter().filter(|j| base.contains(j)).count();
            if 3 * overlap >= 2 * cand.len() {
                expanded.extend_from_slice(&cand);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let weights: Vec<f64> = expanded.iter().map(|&j| (-dist.get(i, j).powi(2)).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (&j, w) in expanded.iter().zip(&weights) {
            v[i * n + j] = w / total;
        }
    }

    let mut vq = vec![0.0; n * n];
    for i in 0..n {
        for &j in &rank[i][..k2] {
            for c in 0..n {
                vq[i * n + c] += v[j * n + c];
            }
        }
        vq[i * n..(i + 1) * n].iter_mut().for_each(|x| *x /= k2 as f64);
    }

    let nonzero: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&c| vq[i * n + c] > 0.0).collect())
        .collect();
    let mut out = vec![0.0; n * n];
    let lam = cfg.lambda_rerank;
    for i in 0..n {
        let vi = &vq[i * n..(i + 1) * n];
        let sum_i: f64 = vi.iter().sum();
        for j in 0..n {
            let vj = &vq[j * n..(j + 1) * n];
            let min_sum: f64 = nonzero[i].iter().map(|&c| vi[c].min(vj[c])).sum();
            let max_sum = sum_i + vj.iter().sum::<f64>() - min_sum;
            let jac = if i == j { 0.0 } else { 1.0 - min_sum / max_sum };
            out[i * n + j] = lam * dist.get(i, j) + (1.0 - lam) * jac;
        }
    }
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = if i == j {
                0.0
            } else {
                0.5 * (out[i * n + j] + out[j * n + i])
            };
        }
    }
    DistanceMatrix::new(n, sym)
}

/// Classical DBSCAN over a precomputed matrix. Neighborhoods include the
/// point itself; clusters are numbered in discovery order and a border point
/// joins the first cluster that reaches it.
pub fn dbscan(dist: &DistanceMatrix, eps: f64, min_pts: usize) -> Vec<i64> {
    let n = dist.n;
    let neighbors = |i: usize| -> Vec<usize> { (0..n).filter(|&j| dist.get(i, j) <= eps).collect() };
    let mut labels: Vec<Option<i64>> = vec![None; n];
    let mut next = 0i64;
    for i in 0..n {
        if labels[i].is_some() {
            continue;
        }
        let nb = neighbors(i);
        if nb.len() < min_pts {
            labels[i] = Some(NOISE);
            continue;
        }
        let c = next;
        next += 1;
        labels[i] = Some(c);
        let mut queue: std::collections::VecDeque<usize> = nb.into_iter().filter(|&j| j != i).collect();
        while let Some(q) = queue.pop_front() {
            match labels[q] {
                Some(NOISE) => labels[q] = Some(c),
                Some(_) => continue,
                None => {
                    labels[q] = Some(c);
                    let qn = neighbors(q);
                    if qn.len() >= min_pts {
                        queue.extend(qn.into_iter().filter(|&j| labels[j].is_none_or(|l| l == NOISE)));
                    }
                }
            }
        }
    }
    labels.into_iter().map(|l| l.unwrap_or(NOISE)).collect()
}

/// The `q`-quantile (nearest rank) of the positive off-diagonal distances.
pub fn eps_from_quantile(dist: &DistanceMatrix, q: f64) -> Result<f64> {
    let mut vals: Vec<f64> = (0..dist.n)
        .flat_map(|i| ((i + 1)..dist.n).map(move |j| (i, j)))
        .map(|(i, j)| dist.get(i, j))
        .filter(|&d| d > 0.0)
        .collect();
    if vals.is_empty() {
        return Err(AbmtError::DegenerateClustering("no positive distances".into()));
    }
    vals.sort_by(f64::total_cmp);
    let idx = ((q * (vals.len() - 1) as f64).round() as usize).min(vals.len() - 1);
    Ok(vals[idx])
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignment: Vec<i64>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after seeding and after each Lloyd iteration.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(point, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// K-Means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iter` is reached. Empty clusters keep their centroid.
pub fn kmeans_pp(signatures: &Tensor, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let n = signatures.rows();
    if k < 1 || k > n {
        return Err(AbmtError::Parameter(format!("k = {k} needs 1 <= k <= n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![signatures.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(signatures.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            while d2[chosen] == 0.0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(signatures.row(pick).to_vec());
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(signatures.row(i), &centroids[centroids.len() - 1]));
        }
    }

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut inertia = 0.0;
        let a = (0..n)
            .map(|i| {
                let (c, d) = nearest(signatures.row(i), centroids);
                inertia += d;
                c
            })
            .collect();
        (a, inertia)
    };
    let (mut assignment, inertia0) = assign(&centroids);
    let mut inertia = vec![inertia0];
    let width = signatures.row_len();
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; width]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            sums[c].iter_mut().zip(signatures.row(i)).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let (next, cost) = assign(&centroids);
        inertia.push(cost);
        let done = next == assignment;
        assignment = next;
        if done {
            break;
        }
    }
    Ok(KMeans {
        assignment: assignment.into_iter().map(|c| c as i64).collect(),
        centroids,
        inertia,
    })
}

/// Maps cluster ids to dense `0..k` in ascending id order; noise stays noise.
pub fn densify(assignment: &[i64]) -> (Vec<i64>, usize) {
    let ids: BTreeMap<i64, i64> = assignment
        .iter()
        .copied()
        .filter(|&l| l >= 0)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(dense, id)| (id, dense as i64))
        .collect();
    let out = assignment.iter().map(|l| if *l >= 0 { ids[l] } else { NOISE }).collect();
    (out, ids.len())
}

/// Per-cluster mean of each branch's features, L2-normalized. Returns the
/// means together with the densified assignment they index.
pub fn cluster_means(f_a: &Tensor, f_m: &Tensor, assignment: &[i64]) -> Result<(Tensor, Tensor, Vec<i64>)> {
    if f_a.shape() != f_m.shape() || f_a.rows() != assignment.len() {
        return dim_err("features and assignment disagree in size");
    }
    let (dense, k) = densify(assignment);
    if k == 0 {
        return Err(AbmtError::DegenerateClustering("every sample is noise".into()));
    }
    let d = f_a.row_len();
    let mean = |f: &Tensor| -> Result<Tensor> {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in dense.iter().enumerate() {
            if c < 0 {
                continue;
            }
            let c = c as usize;
            counts[c] += 1;
            sums[c * d..(c + 1) * d].iter_mut().zip(f.row(i)).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            sums[c * d..(c + 1) * d].iter_mut().for_each(|s| *s /= counts[c] as f64);
        }
        Ok(normalize_rows(&Tensor::new(vec![k, d], sums)?))
    };
    Ok((mean(f_a)?, mean(f_m)?, dense))
}

/// Cluster assignment of the target training set plus per-branch means.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabeling {
    pub assignment: Vec<i64>,
    pub k: usize,
    pub means_a: Tensor,
    pub means_m: Tensor,
    /// DBSCAN radius actually used (0 for K-Means).
    pub eps: f64,
}

impl PseudoLabeling {
    pub fn num_outliers(&self) -> usize {
        self.assignment.iter().filter(|&&l| l == NOISE).count()
    }

    /// `sample_index,pseudo_label,is_outlier` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_index,pseudo_label,is_outlier\n");
        for (i, &l) in self.assignment.iter().enumerate() {
            s.push_str(&format!("{i},{l},{}\n", u8::from(l == NOISE)));
        }
        s
    }
}

/// Clusters whose size is below `min_pts` become noise.
fn drop_small_clusters(assignment: &mut [i64], min_pts: usize) {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &l in assignment.iter().filter(|&&l| l >= 0) {
        *counts.entry(l).or_default() += 1;
    }
    for l in assignment.iter_mut() {
        if *l >= 0 && counts[l] < min_pts {
            *l = NOISE;
        }
    }
}

const INFER_CHUNK: usize = 256;

/// Runs teacher inference over `target` (`N x P x d_in`) and clusters the
/// signatures. `source` joins the re-ranking set when
/// `cfg.rerank_with_source` is on.
pub fn generate_pseudo_labels(
    teacher: &EncoderState,
    target: &Tensor,
    source: Option<&Tensor>,
    cfg: &ClusterConfig,
    method: ClusteringMethod,
    seed: u64,
) -> Result<PseudoLabeling> {
    cfg.validate()?;
    let n = target.rows();
    let (sig, (f_a, f_m)) = teacher.forward_chunked(target, INFER_CHUNK)?;
    let (assignment, eps) = match method {
        ClusteringMethod::DbscanRerank => {
            let dist = match source.filter(|_| cfg.rerank_with_source) {
                Some(src) => {
                    let src_sig = teacher.signatures(src, INFER_CHUNK)?;
                    let mut all = sig.data().to_vec();
                    all.extend_from_slice(src_sig.data());
                    let joint = Tensor::new(vec![n + src_sig.rows(), sig.row_len()], all)?;
                    k_reciprocal_rerank(&pairwise_euclidean(&joint), cfg)?.leading(n)
                }
                None => k_reciprocal_rerank(&pairwise_euclidean(&sig), cfg)?,
            };
            let eps = match cfg.eps {
                Some(e) => e,
                None => eps_from_quantile(&dist, cfg.eps_quantile)?,
            };
            let mut labels = dbscan(&dist, eps, cfg.min_pts);
            drop_small_clusters(&mut labels, cfg.min_pts);
            (labels, eps)
        }
        ClusteringMethod::Kmeans => {
            let k = cfg.kmeans_clusters(n).min(n);
            (kmeans_pp(&sig, k, seed, cfg.kmeans_max_iter)?.assignment, 0.0)
        }
    };
    let (means_a, means_m, dense) = cluster_means(&f_a, &f_m, &assignment)?;
    let k = means_a.rows();
    if k < 2 {
        return Err(AbmtError::DegenerateClustering(format!("{k} cluster(s) found")));
    }
    Ok(PseudoLabeling {
        assignment: dense,
        k,
        means_a,
        means_m,
        eps,
    })
}
