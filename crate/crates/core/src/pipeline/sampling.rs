use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{AbmtError, Result};
use crate::tensor::Tensor;

/// PK batch: `p` distinct labels, then `k_inst` members of each, drawn with
/// replacement only when a label has fewer than `k_inst` members. Negative
/// labels are never sampled. When fewer than `p` labels are eligible, all of
/// them are used.
pub fn sample_pk_batch(labels: &[i64], p: usize, k_inst: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if p == 0 || k_inst == 0 {
        return Err(AbmtError::Batch("p and k_inst must be positive".into()));
    }
    let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate().filter(|(_, l)| **l >= 0) {
        members.entry(l).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(AbmtError::Batch(format!("{} eligible label(s); need at least 2", members.len())));
    }
    let keys: Vec<i64> = members.keys().copied().collect();
    let chosen: Vec<i64> = keys.choose_multiple(rng, p.min(keys.len())).copied().collect();
    let mut batch = Vec::with_capacity(chosen.len() * k_inst);
    for l in chosen {
        let m = &members[&l];
        if m.len() >= k_inst {
            batch.extend(m.choose_multiple(rng, k_inst).copied());
        } else {
            batch.extend((0..k_inst).map(|_| m[rng.random_range(0..m.len())]));
        }
    }
    Ok(batch)
}

/// With probability `prob`, independently per sample, zeroes one uniformly
/// chosen part vector.
pub fn part_erasing(batch: &Tensor, prob: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(AbmtError::Parameter(format!("erasing probability {prob} outside [0, 1]")));
    }
    let &[n, p, d] = batch.shape() else {
        return Err(AbmtError::Dimension(format!("expected N x P x d_in, got {:?}", batch.shape())));
    };
    let mut out = batch.clone();
    out.set_requires_grad(false);
    if prob == 0.0 {
        return Ok(out);
    }
    let data = out.data_mut();
    for i in 0..n {
        if rng.random::<f64>() < prob {
            let part = rng.random_range(0..p);
            data[(i * p + part) * d..(i * p + part + 1) * d].fill(0.0);
        }
    }
    Ok(out)
}
