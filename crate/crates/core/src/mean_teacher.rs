//! EMA mean teacher and the feature-divergence diagnostics used to watch for
//! teacher/student coupling.

use serde::{Deserialize, Serialize};

use crate::encoder::{normalize_rows, EncoderState};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// Samples per inference chunk when sweeping a dataset.
const INFER_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    params: EncoderState,
    alpha: f64,
    step: u64,
}

impl TeacherState {
    /// Teacher weights start as an exact copy of the student's.
    pub fn new(student: &EncoderState, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return contract_err(format!("EMA coefficient {alpha} outside [0, 1]"));
        }
        Ok(Self {
            params: student.detached(),
            alpha,
            step: 0,
        })
    }

    pub fn encoder(&self) -> &EncoderState {
        &self.params
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// `teacher = alpha * teacher + (1 - alpha) * student`, coordinate-wise.
    pub fn ema_update(&mut self, student: &EncoderState) -> Result<()> {
        let sp = student.params();
        let tp = self.params.params();
        if sp.len() != tp.len() || sp.iter().zip(tp).any(|(s, t)| !s.same_shape(t)) {
            return contract_err("teacher and student parameter shapes differ");
        }
        let a = self.alpha;
        for (t, s) in self.params.params_mut().iter_mut().zip(sp) {
            for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = a * *tv + (1.0 - a) * sv;
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Copies the student's classifiers (and class count) into the teacher
    /// after a dynamic re-initialization.
    pub fn sync_classifiers(&mut self, student: &EncoderState) -> Result<()> {
        let (a, m) = student.classifier_indices();
        let means_a = student.params()[a].clone();
        let means_m = student.params()[m].clone();
        self.params.init_dynamic_classifiers(&means_a, &means_m)
    }
}

pub fn init_teacher(student: &EncoderState, alpha: f64) -> Result<TeacherState> {
    TeacherState::new(student, alpha)
}

/// Sum over rows of the Euclidean distance between matching rows.
pub fn feature_divergence(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return dim_err(format!("divergence of {:?} vs {:?}", x.shape(), y.shape()));
    }
    Ok((0..x.rows())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(y.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceTrace {
    pub epoch: usize,
    pub cross_branch_distance: f64,
    pub teacher_student_distance: f64,
}

/// Both diagnostics over `samples` (`N x P x d_in`): teacher branch A vs
/// branch M on normalized features, and teacher vs student signatures.
pub fn record_divergence(
    teacher: &EncoderState,
    student: &EncoderState,
    samples: &Tensor,
    epoch: usize,
) -> Result<DivergenceTrace> {
    let (t_sig, (t_fa, t_fm)) = teacher.forward_chunked(samples, INFER_CHUNK)?;
    let (s_sig, _) = student.forward_chunked(samples, INFER_CHUNK)?;
    Ok(DivergenceTrace {
        epoch,
        cross_branch_distance: feature_divergence(&normalize_rows(&t_fa), &normalize_rows(&t_fm))?,
        teacher_student_distance: feature_divergence(&t_sig, &s_sig)?,
    })
}
