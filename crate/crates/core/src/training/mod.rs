//! Two-step training: a teacher on ground truth alone, then a student on a
//! blend of ground truth and the frozen teacher's confidence maps.
//!
//! Both steps share one loop. Every stage of the trained network is
//! supervised and the per-stage losses are summed; the batch loss is the
//! mean over samples. A student stage is always compared against the
//! teacher's final-stage maps.

mod checkpoint;
mod optimizer;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, Checkpoint,
    RngState, CHECKPOINT_VERSION,
};
pub use optimizer::{RmsProp, RmsPropConfig, StepDecay};

use crate::datasets::{augment, AugmentParams, Image, Sample};
use crate::error::{FpdError, Result};
use crate::exec::Exec;
use crate::heatmap::{
    decode_heatmaps, encode_joints, ConfidenceMapStack, GaussianConfig, JointSet, MapSource,
};
use crate::losses::{
    ce_distill_loss_with_grad, fpd_loss_with_grad, mse_loss_with_grad, Divergence, LossConfig,
};
use crate::metrics::{evaluate, EvalResult, Protocol};
use crate::network::{HourglassConfig, PoseNetwork, Tensor};

/// Floor applied to raw maps before L1 normalisation in the cross-entropy
/// variant (network outputs are unconstrained).
pub const CE_MAP_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: RmsPropConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Validate every this many epochs; 0 validates only after the last one.
    pub eval_interval: usize,
    pub gaussian: GaussianConfig,
    /// `None` trains on the crops as given.
    pub augment: Option<AugmentParams>,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub val_protocol: Protocol,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::mpii()
    }
}

impl TrainConfig {
    pub fn mpii() -> Self {
        Self {
            optimizer: RmsPropConfig::default(),
            batch_size: 4,
            epochs: 130,
            loss: LossConfig::default(),
            seed: 0,
            eval_interval: 1,
            gaussian: GaussianConfig::default(),
            augment: Some(AugmentParams::for_joints(16)),
            max_steps: None,
            val_protocol: Protocol::PckhHalf,
            exec: Exec::default(),
        }
    }

    pub fn lsp() -> Self {
        Self {
            epochs: 70,
            augment: Some(AugmentParams::for_joints(14)),
            val_protocol: Protocol::PckPointTwo,
            ..Self::mpii()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size < 1 {
            return Err(FpdError::Config("batch_size must be >= 1".into()));
        }
        self.loss.validate()?;
        self.gaussian.validate()
    }
}

/// Training and held-out crops.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Source of the distillation targets.
pub enum TeacherTargets<'a> {
    /// Final-stage maps of a frozen network.
    Network(&'a PoseNetwork),
    /// Ground-truth maps presented as teacher maps.
    GroundTruthOracle,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        alpha: f64,
        learning_rate: f64,
        loss_total: f64,
        loss_mse: f64,
        /// Absent when training without a teacher.
        loss_distill: Option<f64>,
    },
    Validation {
        epoch: usize,
        step: usize,
        protocol: Protocol,
        mean_pck: f64,
        auc: f64,
    },
}

/// Stacks sample images into an `N x 3 x S x S` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Tensor {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend_from_slice(&img.data);
    }
    Tensor::from_vec([images.len(), 3, h, w], data)
}

fn stack_of(t: &Tensor, i: usize, source: MapSource) -> ConfidenceMapStack {
    let data = t.sample(i).iter().map(|&v| v as f64).collect();
    ConfidenceMapStack::from_vec(t.c(), t.h(), t.w(), data, source).expect("tensor shape")
}

/// Decoded final-stage joints for each sample, in crop coordinates.
pub fn predict_joints(net: &PoseNetwork, samples: &[Sample], batch_size: usize) -> Result<Vec<JointSet>> {
    let spec = net.config().image_spec();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let outs = net.infer(&images_to_tensor(&imgs))?;
        let last = outs.last().expect("at least one stage");
        for i in 0..chunk.len() {
            out.push(decode_heatmaps(&stack_of(last, i, MapSource::Student), &spec, true)?);
        }
    }
    Ok(out)
}

/// Scores `net` on `samples` under `protocol`.
pub fn evaluate_samples(net: &PoseNetwork, samples: &[Sample], protocol: Protocol) -> Result<EvalResult> {
    let preds = predict_joints(net, samples, 8)?;
    let records: Vec<_> = samples.iter().map(Sample::eval_record).collect();
    evaluate(&preds, &records, protocol)
}

fn check_data(data: &TrainData, cfg: &HourglassConfig) -> Result<()> {
    if data.train.is_empty() {
        return Err(FpdError::Data("training set is empty".into()));
    }
    for (i, s) in data.train.iter().chain(&data.val).enumerate() {
        if s.image.height != cfg.input_size || s.image.width != cfg.input_size {
            return Err(FpdError::Contract(format!(
                "sample {i} is {}x{}, network expects {}x{}",
                s.image.height, s.image.width, cfg.input_size, cfg.input_size
            )));
        }
        if s.joints.len() != cfg.num_joints {
            return Err(FpdError::Contract(format!(
                "sample {i} has {} joints, network predicts {}",
                s.joints.len(),
                cfg.num_joints
            )));
        }
    }
    Ok(())
}

/// Per-sample loss summed over stages: `(mse, distill, d loss / d outputs)`.
fn sample_loss(
    outputs: &[Tensor],
    i: usize,
    gt: &ConfidenceMapStack,
    teacher: Option<&ConfidenceMapStack>,
    mask: &[bool],
    loss: &LossConfig,
) -> Result<(f64, f64, Vec<ConfidenceMapStack>)> {
    let (mut mse, mut pd) = (0.0, 0.0);
    let mut grads = Vec::with_capacity(outputs.len());
    for out in outputs {
        let student = stack_of(out, i, MapSource::Student);
        let (report, grad) = match (teacher, loss.distill_divergence) {
            (None, _) => mse_loss_with_grad(&student, gt, mask)?,
            (Some(t), Divergence::Mse) => fpd_loss_with_grad(&student, t, gt, loss, mask)?,
            (Some(t), Divergence::CrossEntropy) => ce_blend(&student, t, gt, loss, mask)?,
        };
        mse += report.mse_term;
        pd += report.distill_term;
        grads.push(grad);
    }
    Ok((mse, pd, grads))
}

fn floored(maps: &ConfidenceMapStack, source: MapSource) -> ConfidenceMapStack {
    let data = maps.data().iter().map(|v| v.max(CE_MAP_FLOOR)).collect();
    let (k, h, w) = maps.shape();
    ConfidenceMapStack::from_vec(k, h, w, data, source).expect("same shape")
}

fn ce_blend(
    student: &ConfidenceMapStack,
    teacher: &ConfidenceMapStack,
    gt: &ConfidenceMapStack,
    loss: &LossConfig,
    mask: &[bool],
) -> Result<(crate::losses::LossReport, ConfidenceMapStack)> {
    let (mse, mut grad) = mse_loss_with_grad(student, gt, mask)?;
    let (pd, g_pd) = ce_distill_loss_with_grad(
        &floored(student, MapSource::Student),
        &floored(teacher, MapSource::Teacher),
        mask,
    )?;
    let a = loss.alpha;
    for ((g, p), x) in grad.data_mut().iter_mut().zip(g_pd.data()).zip(student.data()) {
        let p = if *x > CE_MAP_FLOOR { *p } else { 0.0 };
        *g = a * p + (1.0 - a) * *g;
    }
    let report = crate::losses::LossReport {
        total: a * pd.distill_term + (1.0 - a) * mse.mse_term,
        mse_term: mse.mse_term,
        distill_term: pd.distill_term,
        per_joint_mse: mse.per_joint_mse,
        per_joint_distill: pd.per_joint_distill,
    };
    Ok((report, grad))
}

fn run(
    data: &TrainData,
    mut net: PoseNetwork,
    tc: &TrainConfig,
    teacher: Option<&TeacherTargets<'_>>,
    sink: &mut dyn FnMut(&LogRecord),
) -> Result<Checkpoint> {
    tc.validate()?;
    let cfg = *net.config();
    check_data(data, &cfg)?;
    if let Some(a) = &tc.augment {
        a.validate(cfg.num_joints)?;
    }
    let spec = cfg.image_spec();
    let exec = tc.exec;
    net.exec = exec;
    net.zero_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);
    let mut opt = RmsProp::new(tc.optimizer);
    let alpha = if teacher.is_some() { tc.loss.alpha } else { 0.0 };

    let mut best: Option<(f64, PoseNetwork, usize, usize)> = None;
    let mut step = 0usize;
    let mut epochs_done = 0usize;
    let capped = |s: usize| tc.max_steps.is_some_and(|m| s >= m);

    'epochs: for epoch in 0..tc.epochs {
        if capped(step) {
            break;
        }
        let lr = tc.optimizer.learning_rate_at(epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(tc.batch_size) {
            let jobs: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.random())).collect();
            let samples: Vec<Sample> = exec
                .map(&jobs, |&(i, seed)| match &tc.augment {
                    Some(p) => augment(&data.train[i], p, seed),
                    None => Ok(data.train[i].clone()),
                })
                .into_iter()
                .collect::<Result<_>>()?;
            let imgs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
            let x = images_to_tensor(&imgs);
            let gts: Vec<ConfidenceMapStack> = exec
                .map(&samples, |s| encode_joints(&s.joints, &spec, &tc.gaussian))
                .into_iter()
                .collect::<Result<_>>()?;
            let teacher_maps: Option<Vec<ConfidenceMapStack>> = match teacher {
                None => None,
                Some(TeacherTargets::GroundTruthOracle) => Some(
                    gts.iter()
                        .map(|g| g.clone().with_source(MapSource::Teacher))
                        .collect(),
                ),
                Some(TeacherTargets::Network(t)) => {
                    let outs = t.infer(&x)?;
                    let last = outs.last().expect("at least one stage");
                    Some((0..samples.len()).map(|i| stack_of(last, i, MapSource::Teacher)).collect())
                }
            };

            let outputs = net.forward(&x)?;
            let per_sample = exec.map_range(samples.len(), |i| {
                sample_loss(
                    &outputs,
                    i,
                    &gts[i],
                    teacher_maps.as_ref().map(|t| &t[i]),
                    &samples[i].joints.mask(),
                    &tc.loss,
                )
            });
            let b = samples.len() as f64;
            let (mut mse, mut pd) = (0.0, 0.0);
            let mut d_outputs: Vec<Tensor> = outputs.iter().map(|o| Tensor::zeros(o.shape())).collect();
            for (i, r) in per_sample.into_iter().enumerate() {
                let (m, p, grads) = r?;
                mse += m;
                pd += p;
                for (d, g) in d_outputs.iter_mut().zip(&grads) {
                    for (dst, v) in d.sample_mut(i).iter_mut().zip(g.data()) {
                        *dst = (v / b) as f32;
                    }
                }
            }
            let (mse, pd) = (mse / b, pd / b);
            let total = if teacher.is_some() {
                alpha * pd + (1.0 - alpha) * mse
            } else {
                mse
            };
            if !total.is_finite() || !outputs.iter().all(Tensor::is_finite) {
                return Err(FpdError::Divergence {
                    step,
                    detail: format!("loss {total} (mse {mse}, distill {pd}) at epoch {epoch}"),
                });
            }
            net.backward(&d_outputs)?;
            opt.step(&mut net, lr);
            net.zero_grad();
            sink(&LogRecord::Step {
                epoch,
                step,
                alpha,
                learning_rate: lr,
                loss_total: total,
                loss_mse: mse,
                loss_distill: teacher.is_some().then_some(pd),
            });
            step += 1;
            if capped(step) {
                epochs_done = epoch + 1;
                break 'epochs;
            }
        }
        epochs_done = epoch + 1;
        let due = tc.eval_interval > 0 && epochs_done % tc.eval_interval == 0;
        if due && !data.val.is_empty() && epochs_done < tc.epochs {
            validate_into(&net, data, tc, epoch, step, &mut best, sink)?;
        }
    }
    // The last epoch (or the step cap) always ends with a validation.
    if epochs_done > 0 && !data.val.is_empty() {
        validate_into(&net, data, tc, epochs_done - 1, step, &mut best, sink)?;
    }

    let (best_metric, net, epoch, step) = match best {
        Some((m, n, e, s)) => (Some(m), n, e + 1, s),
        None => (None, net, epochs_done, step),
    };
    let mut ck = Checkpoint::capture(&net, tc, &rng);
    ck.epoch = epoch;
    ck.step = step;
    ck.best_metric = best_metric;
    Ok(ck)
}

fn validate_into(
    net: &PoseNetwork,
    data: &TrainData,
    tc: &TrainConfig,
    epoch: usize,
    step: usize,
    best: &mut Option<(f64, PoseNetwork, usize, usize)>,
    sink: &mut dyn FnMut(&LogRecord),
) -> Result<()> {
    let r = evaluate_samples(net, &data.val, tc.val_protocol)?;
    sink(&LogRecord::Validation {
        epoch,
        step,
        protocol: tc.val_protocol,
        mean_pck: r.mean_pck,
        auc: r.auc,
    });
    if best.as_ref().is_none_or(|b| r.mean_pck > b.0) {
        *best = Some((r.mean_pck, net.clone(), epoch, step));
    }
    Ok(())
}

/// Trains `config` on ground truth alone; returns the best-validation weights
/// (the final ones when there is no validation split).
pub fn train_teacher(data: &TrainData, config: HourglassConfig, tc: &TrainConfig) -> Result<Checkpoint> {
    train_teacher_logged(data, config, tc, &mut |_| {})
}

pub fn train_teacher_logged(
    data: &TrainData,
    config: HourglassConfig,
    tc: &TrainConfig,
    sink: &mut dyn FnMut(&LogRecord),
) -> Result<Checkpoint> {
    let net = PoseNetwork::new(config, tc.seed)?;
    run(data, net, tc, None, sink)
}

/// Trains `config` against ground truth and the frozen `teacher`.
pub fn distill_student(
    data: &TrainData,
    teacher: &Checkpoint,
    config: HourglassConfig,
    tc: &TrainConfig,
) -> Result<Checkpoint> {
    distill_student_logged(data, teacher, config, tc, &mut |_| {})
}

pub fn distill_student_logged(
    data: &TrainData,
    teacher: &Checkpoint,
    config: HourglassConfig,
    tc: &TrainConfig,
    sink: &mut dyn FnMut(&LogRecord),
) -> Result<Checkpoint> {
    let tnet = teacher.to_network()?;
    distill_with_targets(data, TeacherTargets::Network(&tnet), config, tc, sink)
}

/// Distillation against an arbitrary target source. For a network teacher
/// the weight digest is checked before and after and recorded in the result.
pub fn distill_with_targets(
    data: &TrainData,
    targets: TeacherTargets<'_>,
    config: HourglassConfig,
    tc: &TrainConfig,
    sink: &mut dyn FnMut(&LogRecord),
) -> Result<Checkpoint> {
    config.validate()?;
    let digest = match &targets {
        TeacherTargets::Network(t) => {
            let tc_ = t.config();
            if tc_.num_joints != config.num_joints {
                return Err(FpdError::Contract(format!(
                    "teacher predicts {} joints, student {}",
                    tc_.num_joints, config.num_joints
                )));
            }
            if tc_.input_size != config.input_size {
                return Err(FpdError::Contract(format!(
                    "teacher input {} differs from student input {}",
                    tc_.input_size, config.input_size
                )));
            }
            Some(t.digest())
        }
        TeacherTargets::GroundTruthOracle => None,
    };
    let net = PoseNetwork::new(config, tc.seed)?;
    let mut ck = run(data, net, tc, Some(&targets), sink)?;
    if let (TeacherTargets::Network(t), Some(before)) = (&targets, &digest) {
        let after = t.digest();
        if &after != before {
            return Err(FpdError::Contract(format!(
                "teacher weights changed during distillation ({before} -> {after})"
            )));
        }
    }
    ck.teacher_digest = digest;
    Ok(ck)
}
