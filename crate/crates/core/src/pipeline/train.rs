use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderState};
use crate::error::{AbmtError, Result};
use crate::evaluation::{evaluate, Metrics, RetrievalSplit, REPORT_RANKS};
use crate::losses::{source_objective, target_objective, LossWeights, TargetOptions};
use crate::mean_teacher::{init_teacher, record_divergence, DivergenceTrace, TeacherState};
use crate::pseudo_labels::{generate_pseudo_labels, ClusterConfig, ClusteringMethod, PseudoLabeling};
use crate::tensor::{adam_step, AdamHyper, AdamState, Graph, Tensor};

use super::dataset::{Dataset, Split};
use super::sampling::{part_erasing, sample_pk_batch};

const INFER_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_pretrain: usize,
    pub iters_pretrain: usize,
    pub epochs_adapt: usize,
    pub iters_adapt: usize,
    pub lr: f64,
    /// Pre-training epochs at which the rate is multiplied by
    /// `lr_decay_factor`. Empty means half and seven eighths of the run.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub batch_identities: usize,
    pub instances_per_identity: usize,
    pub alpha: f64,
    pub losses: LossWeights,
    pub cluster: ClusterConfig,
    pub encoder: EncoderConfig,
    pub use_asymmetric_branches: bool,
    pub use_cross_branch: bool,
    pub clustering_method: ClusteringMethod,
    pub source_pretrain: bool,
    pub literal_soft_triplet: bool,
    pub part_erasing_prob: f64,
    /// Feed the teacher the same erased batch as the student.
    pub erase_teacher_input: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_pretrain: 40,
            iters_pretrain: 50,
            epochs_adapt: 20,
            iters_adapt: 100,
            lr: 3.5e-4,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            weight_decay: 5e-4,
            batch_identities: 4,
            instances_per_identity: 4,
            alpha: 0.992,
            losses: LossWeights::default(),
            cluster: ClusterConfig::default(),
            encoder: EncoderConfig::default(),
            use_asymmetric_branches: true,
            use_cross_branch: true,
            clustering_method: ClusteringMethod::DbscanRerank,
            source_pretrain: true,
            literal_soft_triplet: false,
            part_erasing_prob: 0.5,
            erase_teacher_input: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AbmtError::Parameter(m.to_string()));
        if self.iters_pretrain == 0 || self.iters_adapt == 0 || self.batch_identities == 0 || self.instances_per_identity == 0 {
            return bad("iteration and batch counts must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.part_erasing_prob) {
            return bad("part_erasing_prob must lie in [0, 1]");
        }
        self.losses.validate()?;
        self.cluster.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_identities * self.instances_per_identity
    }

    /// Encoder configuration with the branch ablation applied.
    pub fn encoder_config(&self, d_in: usize, num_classes: usize) -> EncoderConfig {
        let cfg = EncoderConfig {
            d_in,
            num_classes,
            ..self.encoder.clone()
        };
        if self.use_asymmetric_branches {
            EncoderConfig { asymmetric: true, ..cfg }
        } else {
            cfg.symmetric()
        }
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }

    /// Step-decayed rate for a pre-training epoch.
    pub fn pretrain_lr(&self, epoch: usize) -> f64 {
        let e = self.epochs_pretrain as f64;
        let milestones = if self.lr_decay_epochs.is_empty() {
            vec![(0.5 * e).round() as usize, (0.875 * e).round() as usize]
        } else {
            self.lr_decay_epochs.clone()
        };
        let drops = milestones.iter().filter(|&&m| m > 0 && epoch >= m).count();
        self.lr * self.lr_decay_factor.powi(drops as i32)
    }

    fn target_options(&self) -> TargetOptions {
        TargetOptions {
            cross_branch: self.use_cross_branch,
            literal_soft_triplet: self.literal_soft_triplet,
        }
    }
}

fn adam_states(state: &EncoderState, hyper: AdamHyper) -> Vec<AdamState> {
    state.params().iter().map(|p| AdamState::for_tensor(p, hyper)).collect()
}

/// Accumulates `loss`'s gradients into the student and takes one Adam step.
fn optimize(g: &mut Graph, vars: &[crate::tensor::Var], loss: crate::tensor::Var, student: &mut EncoderState, states: &mut [AdamState]) -> Result<()> {
    let grads = g.backward(loss)?;
    for (v, p) in vars.iter().zip(student.params_mut()) {
        p.zero_grad();
        grads.accumulate_into(*v, p)?;
    }
    let mut refs: Vec<&mut Tensor> = student.params_mut().iter_mut().collect();
    adam_step(&mut refs, states)
}

/// Dense `0..C` labels for identities in first-appearance order.
fn dense_labels(ids: &[i64]) -> (Vec<i64>, usize) {
    let mut map = std::collections::BTreeMap::new();
    let labels = ids
        .iter()
        .map(|id| {
            let next = map.len() as i64;
            *map.entry(*id).or_insert(next)
        })
        .collect();
    (labels, map.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean source loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Source loss of every iteration.
    pub iteration_losses: Vec<f64>,
}

/// Supervised training of a fresh encoder on the labeled source training
/// split with PK batches, Adam and step-decayed learning rate.
pub fn pretrain_source(config: &TrainConfig, source: &Dataset, seed: u64) -> Result<(EncoderState, PretrainReport)> {
    config.validate()?;
    let train = source.subset(Split::Train);
    if train.ids.is_empty() {
        return Err(AbmtError::Training("source has no training samples".into()));
    }
    let (labels, classes) = dense_labels(&train.ids);
    let mut student = EncoderState::new(config.encoder_config(source.d_in(), classes), seed)?;
    let mut states = adam_states(&student, config.hyper());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut report = PretrainReport {
        epoch_losses: Vec::new(),
        iteration_losses: Vec::new(),
    };
    for epoch in 0..config.epochs_pretrain {
        let lr = config.pretrain_lr(epoch);
        states.iter_mut().for_each(|s| s.hyper.lr = lr);
        let mut total = 0.0;
        for _ in 0..config.iters_pretrain {
            let idx = sample_pk_batch(&labels, config.batch_identities, config.instances_per_identity, &mut rng)?;
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i] as usize).collect();
            let x = part_erasing(&train.samples.select_rows(&idx), config.part_erasing_prob, &mut rng)?;
            let mut g = Graph::new();
            let vars = student.register(&mut g);
            let xv = g.constant(&x);
            let out = student.forward_graph(&mut g, &vars, xv)?;
            let loss = source_objective(&mut g, &out, &batch_labels, &config.losses)?;
            let value = g.scalar(loss);
            optimize(&mut g, &vars, loss, &mut student, &mut states)?;
            report.iteration_losses.push(value);
            total += value;
        }
        let mean = total / config.iters_pretrain as f64;
        info!("pretrain epoch {epoch}: lr {lr:.2e} loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    Ok((student, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_sce: f64,
    pub loss_stri: f64,
    pub num_clusters: usize,
    pub num_outliers: usize,
    pub eps: f64,
    pub cross_branch_distance: f64,
    pub teacher_student_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub divergence: Vec<DivergenceTrace>,
    pub skipped_epochs: Vec<usize>,
    /// Teacher metrics before the first adaptation epoch.
    pub initial: Option<Metrics>,
    #[serde(rename = "final")]
    pub final_metrics: Option<Metrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Run-log CSV: one row per completed epoch.
    pub fn run_log_csv(&self) -> String {
        let mut s = String::from(
            "epoch,loss_total,loss_ce,loss_sce,loss_stri,num_clusters,num_outliers,eps,cross_branch_distance,teacher_student_distance\n",
        );
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{},{},{:?},{:?},{:?}\n",
                r.epoch,
                r.loss_total,
                r.loss_ce,
                r.loss_sce,
                r.loss_stri,
                r.num_clusters,
                r.num_outliers,
                r.eps,
                r.cross_branch_distance,
                r.teacher_student_distance
            ));
        }
        s
    }

    pub fn divergence_csv(&self) -> String {
        let mut s = String::from("epoch,cross_branch_distance,teacher_student_distance\n");
        for d in &self.divergence {
            s.push_str(&format!("{},{:?},{:?}\n", d.epoch, d.cross_branch_distance, d.teacher_student_distance));
        }
        s
    }
}

/// Hooks into the adaptation loop.
pub enum AdaptEvent<'a> {
    /// Pseudo labels of an epoch, after both classifiers were re-initialized.
    Labels { epoch: usize, labeling: &'a PseudoLabeling },
    /// Training batch indices (into the target train split) and the student
    /// right after its optimizer step, before the EMA update.
    Step { epoch: usize, batch: &'a [usize], student: &'a EncoderState },
}

/// Pseudo-label adaptation on the target training split. `init` is the
/// pre-trained encoder; `None` starts from a fresh one (fully unsupervised
/// mode). Evaluation runs on the teacher.
pub fn adapt_target(
    config: &TrainConfig,
    init: Option<&EncoderState>,
    source: Option<&Dataset>,
    target: &Dataset,
    seed: u64,
) -> Result<(EncoderState, MetricsReport)> {
    adapt_target_observed(config, init, source, target, seed, &mut |_| {})
}

pub fn adapt_target_observed(
    config: &TrainConfig,
    init: Option<&EncoderState>,
    source: Option<&Dataset>,
    target: &Dataset,
    seed: u64,
    observer: &mut dyn FnMut(AdaptEvent<'_>),
) -> Result<(EncoderState, MetricsReport)> {
    config.validate()?;
    let train = target.subset(Split::Train);
    if train.ids.is_empty() {
        return Err(AbmtError::Training("target has no training samples".into()));
    }
    let mut student = match init {
        Some(s) => {
            let mut s = s.clone();
            s.params_mut().iter_mut().for_each(|p| p.set_requires_grad(true));
            s
        }
        None => EncoderState::new(config.encoder_config(target.d_in(), 2), seed)?,
    };
    let mut teacher: TeacherState = init_teacher(&student, config.alpha)?;
    let source_train = source.map(|s| s.subset(Split::Train).samples);
    let mut states = adam_states(&student, config.hyper());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let opts = config.target_options();

    let mut report = MetricsReport {
        seed,
        config: config.clone(),
        epochs: Vec::new(),
        divergence: Vec::new(),
        skipped_epochs: Vec::new(),
        initial: run_eval(teacher.encoder(), target).ok(),
        final_metrics: None,
    };

    for epoch in 0..config.epochs_adapt {
        let labeling = match generate_pseudo_labels(
            teacher.encoder(),
            &train.samples,
            source_train.as_ref(),
            &config.cluster,
            config.clustering_method,
            seed.wrapping_add(epoch as u64),
        ) {
            Ok(l) => l,
            Err(AbmtError::DegenerateClustering(msg)) => {
                warn!("epoch {epoch} skipped: {msg}");
                report.skipped_epochs.push(epoch);
                continue;
            }
            Err(e) => return Err(e),
        };
        student.init_dynamic_classifiers(&labeling.means_a, &labeling.means_m)?;
        teacher.sync_classifiers(&student)?;
        let (ca, cm) = student.classifier_indices();
        for i in [ca, cm] {
            states[i] = AdamState::for_tensor(&student.params()[i], config.hyper());
        }
        observer(AdaptEvent::Labels { epoch, labeling: &labeling });

        let (mut ce, mut sce, mut stri, mut total) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..config.iters_adapt {
            let idx = sample_pk_batch(&labeling.assignment, config.batch_identities, config.instances_per_identity, &mut rng)?;
            let labels: Vec<usize> = idx.iter().map(|&i| labeling.assignment[i] as usize).collect();
            let clean = train.samples.select_rows(&idx);
            let erased = part_erasing(&clean, config.part_erasing_prob, &mut rng)?;
            let teacher_out = teacher
                .encoder()
                .forward(if config.erase_teacher_input { &erased } else { &clean })?;

            let mut g = Graph::new();
            let vars = student.register(&mut g);
            let xv = g.constant(&erased);
            let out = student.forward_graph(&mut g, &vars, xv)?;
            let loss = target_objective(&mut g, &out, &teacher_out, &labels, &config.losses, opts)?;
            total += g.scalar(loss.total);
            ce += loss.ce;
            sce += loss.sce;
            stri += loss.stri;
            optimize(&mut g, &vars, loss.total, &mut student, &mut states)?;
            observer(AdaptEvent::Step {
                epoch,
                batch: &idx,
                student: &student,
            });
            teacher.ema_update(&student)?;
        }

        let div = record_divergence(teacher.encoder(), &student, &train.samples, epoch)?;
        let it = config.iters_adapt as f64;
        let rec = EpochRecord {
            epoch,
            loss_total: total / it,
            loss_ce: ce / it,
            loss_sce: sce / it,
            loss_stri: stri / it,
            num_clusters: labeling.k,
            num_outliers: labeling.num_outliers(),
            eps: labeling.eps,
            cross_branch_distance: div.cross_branch_distance,
            teacher_student_distance: div.teacher_student_distance,
        };
        info!(
            "adapt epoch {epoch}: {} clusters, {} outliers, loss {:.4}",
            rec.num_clusters, rec.num_outliers, rec.loss_total
        );
        report.epochs.push(rec);
        report.divergence.push(div);
    }

    if 2 * report.skipped_epochs.len() > config.epochs_adapt {
        return Err(AbmtError::Training(format!(
            "{} of {} epochs skipped on degenerate clustering",
            report.skipped_epochs.len(),
            config.epochs_adapt
        )));
    }
    let teacher = teacher.encoder().clone();
    report.final_metrics = Some(run_eval(&teacher, target)?);
    Ok((teacher, report))
}

/// Source pre-training (when enabled and a source is given) followed by
/// target adaptation.
pub fn run_uda(
    config: &TrainConfig,
    source: Option<&Dataset>,
    target: &Dataset,
    seed: u64,
) -> Result<(EncoderState, Option<PretrainReport>, MetricsReport)> {
    let pre = match source.filter(|_| config.source_pretrain) {
        Some(src) => Some(pretrain_source(config, src, seed)?),
        None => None,
    };
    let (teacher, report) = adapt_target(config, pre.as_ref().map(|(m, _)| m), source, target, seed)?;
    Ok((teacher, pre.map(|(_, r)| r), report))
}

/// Retrieval split of `target`'s query and gallery images under `state`.
pub fn retrieval_split(state: &EncoderState, target: &Dataset) -> Result<RetrievalSplit> {
    let q = target.subset(Split::Query);
    let g = target.subset(Split::Gallery);
    if q.ids.is_empty() || g.ids.is_empty() {
        return Err(AbmtError::Evaluation("target has no query or gallery split".into()));
    }
    RetrievalSplit::new(
        state.signatures(&q.samples, INFER_CHUNK)?,
        state.signatures(&g.samples, INFER_CHUNK)?,
        q.ids,
        g.ids,
        q.cams,
        g.cams,
    )
}

/// mAP and CMC of `state`'s signatures on the target query/gallery splits.
pub fn run_eval(state: &EncoderState, target: &Dataset) -> Result<Metrics> {
    evaluate(&retrieval_split(state, target)?, &REPORT_RANKS)
}

/// Writes the divergence CSV of `report`.
pub fn diagnose(report: &MetricsReport, out_path: &std::path::Path) -> Result<()> {
    if report.divergence.len() < 2 {
        return Err(AbmtError::Parameter(format!(
            "diagnostics need at least 2 epochs, report has {}",
            report.divergence.len()
        )));
    }
    std::fs::write(out_path, report.divergence_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_scales_with_epochs() {
        let cfg = TrainConfig {
            epochs_pretrain: 80,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.pretrain_lr(39), 3.5e-4);
        assert!((cfg.pretrain_lr(40) - 3.5e-5).abs() < 1e-18);
        assert!((cfg.pretrain_lr(70) - 3.5e-6).abs() < 1e-18);
        let explicit = TrainConfig {
            lr_decay_epochs: vec![3],
            ..TrainConfig::default()
        };
        assert_eq!(explicit.pretrain_lr(2), 3.5e-4);
        assert!((explicit.pretrain_lr(3) - 3.5e-5).abs() < 1e-18);
    }

    #[test]
    fn dense_labels_first_appearance() {
        assert_eq!(dense_labels(&[7, 3, 7, 9]), (vec![0, 1, 0, 2], 3));
    }

    #[test]
    fn symmetric_ablation_halves_signature() {
        let cfg = TrainConfig {
            use_asymmetric_branches: false,
            ..TrainConfig::default()
        };
        let sym = cfg.encoder_config(8, 3);
        let asym = TrainConfig::default().encoder_config(8, 3);
        assert_eq!(2 * sym.signature_width(), asym.signature_width());
        assert_eq!(sym.branch_a_blocks, sym.branch_m_blocks);
    }

    #[test]
    fn csv_columns() {
        let report = MetricsReport {
            seed: 1,
            config: TrainConfig::default(),
            epochs: Vec::new(),
            divergence: vec![
                DivergenceTrace {
                    epoch: 0,
                    cross_branch_distance: 1.5,
                    teacher_student_distance: 0.25,
                },
                DivergenceTrace {
                    epoch: 1,
                    cross_branch_distance: 1.0,
                    teacher_student_distance: 0.5,
                },
            ],
            skipped_epochs: Vec::new(),
            initial: None,
            final_metrics: None,
        };
        assert_eq!(
            report.divergence_csv(),
            "epoch,cross_branch_distance,teacher_student_distance\n0,1.5,0.25\n1,1.0,0.5\n"
        );
        let back = MetricsReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }
}
