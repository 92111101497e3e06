//! Training objectives: hard and soft cross-entropy, batch-hard triplet,
//! softmax triplet distance with its soft triplet loss, and the combined
//! source and target objectives.
//!
//! All losses are batch means. Teacher quantities enter as plain tensors, so
//! no gradient can reach teacher weights.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderOutput, OutputVars};
use crate::error::{contract_err, dim_err, AbmtError, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ce_s: f64,
    pub lambda_tri_s: f64,
    pub lambda_ce_t: f64,
    pub lambda_sce_t: f64,
    pub lambda_stri_t: f64,
    pub triplet_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce_s: 0.5,
            lambda_tri_s: 0.5,
            lambda_ce_t: 0.5,
            lambda_sce_t: 0.5,
            lambda_stri_t: 1.0,
            triplet_margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_ce_s,
            self.lambda_tri_s,
            self.lambda_ce_t,
            self.lambda_sce_t,
            self.lambda_stri_t,
            self.triplet_margin,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(AbmtError::Parameter("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Wiring of the teacher-to-student soft losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetOptions {
    /// Teacher branch A supervises student branch M and vice versa. When
    /// false each teacher branch supervises its own student branch.
    pub cross_branch: bool,
    /// Use only the `-T' log T` term of the soft triplet loss.
    pub literal_soft_triplet: bool,
}

impl Default for TargetOptions {
    fn default() -> Self {
        Self {
            cross_branch: true,
            literal_soft_triplet: false,
        }
    }
}

pub fn cross_entropy(g: &mut Graph, log_probs: Var, labels: &[usize]) -> Result<Var> {
    g.nll(log_probs, labels)
}

/// Hardest positive (farthest same label, excluding the anchor) and hardest
/// negative (closest other label) per anchor. Ties go to the lowest index.
/// `None` marks anchors lacking either.
pub fn mine_hardest(dist: &[f64], labels: &[usize]) -> Vec<Option<(usize, usize)>> {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d = dist[i * n + j];
                if labels[j] == labels[i] {
                    if pos.is_none_or(|p| d > dist[i * n + p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| d < dist[i * n + q]) {
                    neg = Some(j);
                }
            }
            pos.zip(neg)
        })
        .collect()
}

fn check_labels(g: &Graph, features: Var, labels: &[usize]) -> Result<usize> {
    let n = match g.shape(features) {
        [n, _] => *n,
        s => return dim_err(format!("expected N x D features, got {s:?}")),
    };
    if labels.len() != n {
        return dim_err(format!("{} labels for {n} samples", labels.len()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return contract_err("batch holds a single identity; no negatives");
    }
    Ok(n)
}

struct Mined {
    dp: Var,
    dn: Var,
    anchors: Vec<usize>,
}

fn mined_distances(g: &mut Graph, features: Var, labels: &[usize]) -> Result<Mined> {
    let n = check_labels(g, features, labels)?;
    let dist = g.pairwise_distance(features)?;
    let mined = mine_hardest(g.value(dist), labels);
    let mut anchors = Vec::new();
    let (mut pi, mut ni) = (Vec::new(), Vec::new());
    for (i, m) in mined.iter().enumerate() {
        if let Some((p, q)) = m {
            anchors.push(i);
            pi.push(i * n + p);
            ni.push(i * n + q);
        }
    }
    if anchors.is_empty() {
        return contract_err("no anchor has both a positive and a negative");
    }
    let dp = g.gather(dist, pi)?;
    let dn = g.gather(dist, ni)?;
    Ok(Mined { dp, dn, anchors })
}

/// Mean over valid anchors of `max(0, margin + d_pos - d_neg)`.
pub fn batch_hard_triplet(g: &mut Graph, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let m = mined_distances(g, features, labels)?;
    let diff = g.sub(m.dp, m.dn)?;
    let shifted = g.add_scalar(diff, margin)?;
    let hinge = g.relu(shifted)?;
    g.mean(hinge)
}

/// Mean over rows of `-sum_c exp(teacher[i,c]) * student[i,c]`.
pub fn soft_cross_entropy(g: &mut Graph, teacher_log_probs: &Tensor, student_log_probs: Var) -> Result<Var> {
    if teacher_log_probs.shape() != g.shape(student_log_probs) {
        return dim_err(format!(
            "teacher {:?} vs student {:?}",
            teacher_log_probs.shape(),
            g.shape(student_log_probs)
        ));
    }
    let probs: Vec<f64> = teacher_log_probs.data().iter().map(|v| v.exp()).collect();
    g.soft_nll(student_log_probs, &probs)
}

/// Softmax triplet distances `exp(d_p) / (exp(d_p) + exp(d_n))` for the
/// anchors that have both a positive and a negative.
#[derive(Clone, Debug)]
pub struct SoftmaxTriplet {
    pub values: Var,
    pub anchors: Vec<usize>,
}

pub fn softmax_triplet(g: &mut Graph, features: Var, labels: &[usize]) -> Result<SoftmaxTriplet> {
    let m = mined_distances(g, features, labels)?;
    let z = g.sub(m.dp, m.dn)?;
    let values = g.sigmoid(z)?;
    Ok(SoftmaxTriplet {
        values,
        anchors: m.anchors,
    })
}

/// Detached softmax triplet distances, `None` for skipped anchors.
pub fn softmax_triplet_values(features: &Tensor, labels: &[usize]) -> Result<Vec<Option<f64>>> {
    let mut g = Graph::new();
    let f = g.constant(features);
    let st = softmax_triplet(&mut g, f, labels)?;
    let mut out = vec![None; labels.len()];
    for (k, &i) in st.anchors.iter().enumerate() {
        out[i] = Some(g.value(st.values)[k]);
    }
    Ok(out)
}

/// Soft triplet loss of student distances against detached teacher ones.
pub fn soft_triplet(g: &mut Graph, t_teacher: &[f64], t_student: Var, literal: bool) -> Result<Var> {
    g.binary_soft_ce(t_student, t_teacher, literal)
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let s = g.scale(v, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| AbmtError::Contract("empty loss".into()))
}

/// Supervised source loss: weighted CE of both branches plus weighted
/// batch-hard triplet of both branch features.
pub fn source_objective(g: &mut Graph, out: &OutputVars, labels: &[usize], w: &LossWeights) -> Result<Var> {
    let ce_a = cross_entropy(g, out.p_a, labels)?;
    let ce_m = cross_entropy(g, out.p_m, labels)?;
    let tri_a = batch_hard_triplet(g, out.f_a, labels, w.triplet_margin)?;
    let tri_m = batch_hard_triplet(g, out.f_m, labels, w.triplet_margin)?;
    weighted_sum(
        g,
        &[
            (w.lambda_ce_s, ce_a),
            (w.lambda_ce_s, ce_m),
            (w.lambda_tri_s, tri_a),
            (w.lambda_tri_s, tri_m),
        ],
    )
}

/// Target loss handle plus its unweighted component values.
#[derive(Clone, Copy, Debug)]
pub struct TargetLoss {
    pub total: Var,
    pub ce: f64,
    pub sce: f64,
    pub stri: f64,
}

/// Pseudo-label adaptation loss: hard CE on both student branches, teacher to
/// student soft CE and soft triplet terms (cross-branch when enabled).
pub fn target_objective(
    g: &mut Graph,
    student: &OutputVars,
    teacher: &EncoderOutput,
    labels: &[usize],
    w: &LossWeights,
    opts: TargetOptions,
) -> Result<TargetLoss> {
    let ce_a = cross_entropy(g, student.p_a, labels)?;
    let ce_m = cross_entropy(g, student.p_m, labels)?;

    // (teacher source, student target) pairs
    let (sce_pairs, stri_pairs) = if opts.cross_branch {
        (
            [(&teacher.p_a, student.p_m), (&teacher.p_m, student.p_a)],
            [(&teacher.f_a, student.f_m), (&teacher.f_m, student.f_a)],
        )
    } else {
        (
            [(&teacher.p_a, student.p_a), (&teacher.p_m, student.p_m)],
            [(&teacher.f_a, student.f_a), (&teacher.f_m, student.f_m)],
        )
    };
    let sce1 = soft_cross_entropy(g, sce_pairs[0].0, sce_pairs[0].1)?;
    let sce2 = soft_cross_entropy(g, sce_pairs[1].0, sce_pairs[1].1)?;

    let mut stri = Vec::with_capacity(2);
    for (tf, sf) in stri_pairs {
        let tt = softmax_triplet_values(tf, labels)?;
        let st = softmax_triplet(g, sf, labels)?;
        let target: Vec<f64> = st
            .anchors
            .iter()
            .map(|&i| tt[i].expect("anchor set depends on labels only"))
            .collect();
        stri.push(soft_triplet(g, &target, st.values, opts.literal_soft_triplet)?);
    }

    let ce = g.scalar(ce_a) + g.scalar(ce_m);
    let sce = g.scalar(sce1) + g.scalar(sce2);
    let stri_v = g.scalar(stri[0]) + g.scalar(stri[1]);
    let total = weighted_sum(
        g,
        &[
            (w.lambda_ce_t, ce_a),
            (w.lambda_ce_t, ce_m),
            (w.lambda_sce_t, sce1),
            (w.lambda_sce_t, sce2),
            (w.lambda_stri_t, stri[0]),
            (w.lambda_stri_t, stri[1]),
        ],
    )?;
    Ok(TargetLoss {
        total,
        ce,
        sce,
        stri: stri_v,
    })
}
