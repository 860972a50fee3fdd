//! Supervision, mimicry and combined losses over confidence-map stacks.
//!
//! All squared norms are summed over pixels and averaged over the joints whose
//! mask flag is set; masked joints contribute nothing, to either the value or
//! the gradient. Each loss comes in a value-only form and a `*_with_grad` form
//! that also returns the gradient with respect to the first (predicted /
//! student) argument. Teacher and ground-truth maps are constants.

use serde::{Deserialize, Serialize};

use crate::error::{FpdError, Result};
use crate::heatmap::{ConfidenceMapStack, MapSource};

/// Guard inside `log` for the cross-entropy variant.
pub const CE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the distillation term; `1 - alpha` goes to ground truth.
    pub alpha: f64,
    pub distill_divergence: Divergence,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            distill_divergence: Divergence::Mse,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.alpha) {
            Ok(())
        } else {
            Err(FpdError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse_term: f64,
    pub distill_term: f64,
    pub total: f64,
    /// Per-joint squared norm (or cross-entropy) before the 1/K average.
    pub per_joint_mse: Vec<f64>,
    pub per_joint_distill: Vec<f64>,
}

impl LossReport {
    fn supervised(value: f64, per_joint: Vec<f64>) -> Self {
        let k = per_joint.len();
        Self {
            mse_term: value,
            distill_term: 0.0,
            total: value,
            per_joint_mse: per_joint,
            per_joint_distill: vec![0.0; k],
        }
    }

    fn mimicry(value: f64, per_joint: Vec<f64>) -> Self {
        let k = per_joint.len();
        Self {
            mse_term: 0.0,
            distill_term: value,
            total: value,
            per_joint_mse: vec![0.0; k],
            per_joint_distill: per_joint,
        }
    }
}

fn check_mask(maps: &ConfidenceMapStack, mask: &[bool]) -> Result<usize> {
    if mask.len() != maps.joints() {
        return Err(FpdError::Contract(format!(
            "mask has {} flags for {} joints",
            mask.len(),
            maps.joints()
        )));
    }
    Ok(mask.iter().filter(|&&m| m).count())
}

/// `(1/K') sum_k ||a_k - b_k||^2` and its gradient w.r.t. `a`.
fn squared_error(
    a: &ConfidenceMapStack,
    b: &ConfidenceMapStack,
    mask: &[bool],
    want_grad: bool,
) -> Result<(f64, Vec<f64>, Option<ConfidenceMapStack>)> {
    a.check_same_shape(b)?;
    let active = check_mask(a, mask)?;
    let mut per_joint = vec![0.0; a.joints()];
    let mut grad = want_grad.then(|| {
        ConfidenceMapStack::zeros(a.joints(), a.height(), a.width(), MapSource::Student)
    });
    if active == 0 {
        return Ok((0.0, per_joint, grad));
    }
    let scale = 2.0 / active as f64;
    for k in 0..a.joints() {
        if !mask[k] {
            continue;
        }
        let (ak, bk) = (a.map(k), b.map(k));
        per_joint[k] = ak.iter().zip(bk).map(|(x, y)| (x - y) * (x - y)).sum();
        if let Some(g) = grad.as_mut() {
            for ((gi, x), y) in g.map_mut(k).iter_mut().zip(ak).zip(bk) {
                *gi = scale * (x - y);
            }
        }
    }
    let value = per_joint.iter().sum::<f64>() / active as f64;
    Ok((value, per_joint, grad))
}

pub fn mse_loss(
    pred: &ConfidenceMapStack,
    gt: &ConfidenceMapStack,
    mask: &[bool],
) -> Result<LossReport> {
    let (v, per_joint, _) = squared_error(pred, gt, mask, false)?;
    Ok(LossReport::supervised(v, per_joint))
}

pub fn mse_loss_with_grad(
    pred: &ConfidenceMapStack,
    gt: &ConfidenceMapStack,
    mask: &[bool],
) -> Result<(LossReport, ConfidenceMapStack)> {
    let (v, per_joint, g) = squared_error(pred, gt, mask, true)?;
    Ok((LossReport::supervised(v, per_joint), g.expect("gradient requested")))
}

fn check_teacher(teacher: &ConfidenceMapStack) -> Result<()> {
    if teacher.source != MapSource::Teacher {
        return Err(FpdError::Contract(format!(
            "distillation target must be tagged as teacher output, got {:?}",
            teacher.source
        )));
    }
    Ok(())
}

pub fn distill_loss(
    student: &ConfidenceMapStack,
    teacher: &ConfidenceMapStack,
    mask: &[bool],
) -> Result<LossReport> {
    check_teacher(teacher)?;
    let (v, per_joint, _) = squared_error(student, teacher, mask, false)?;
    Ok(LossReport::mimicry(v, per_joint))
}

pub fn distill_loss_with_grad(
    student: &ConfidenceMapStack,
    teacher: &ConfidenceMapStack,
    mask: &[bool],
) -> Result<(LossReport, ConfidenceMapStack)> {
    check_teacher(teacher)?;
    let (v, per_joint, g) = squared_error(student, teacher, mask, true)?;
    Ok((LossReport::mimicry(v, per_joint), g.expect("gradient requested")))
}

fn cross_entropy(
    student: &ConfidenceMapStack,
    teacher: &ConfidenceMapStack,
    mask: &[bool],
    want_grad: bool,
) -> Result<(LossReport, Option<ConfidenceMapStack>)> {
    check_teacher(teacher)?;
    student.check_same_shape(teacher)?;
    let active = check_mask(student, mask)?;
    for (name, maps) in [("student", student), ("teacher", teacher)] {
        if maps.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(FpdError::Contract(format!(
                "{name} maps must be finite and non-negative for cross-entropy"
            )));
        }
    }
    let k_total = student.joints();
    let mut per_joint = vec![0.0; k_total];
    let mut grad = want_grad.then(|| {
        ConfidenceMapStack::zeros(k_total, student.height(), student.width(), MapSource::Student)
    });
    if active == 0 {
        return Ok((LossReport::mimicry(0.0, per_joint), grad));
    }
    let inv_k = 1.0 / active as f64;
    for k in 0..k_total {
        if !mask[k] {
            continue;
        }
        let (s_raw, t_raw) = (student.map(k), teacher.map(k));
        let s_sum: f64 = s_raw.iter().sum();
        let t_sum: f64 = t_raw.iter().sum();
        if s_sum <= 0.0 {
            return Err(FpdError::DegenerateMap { joint: k });
        }
        if t_sum <= 0.0 {
            return Err(FpdError::DegenerateMap { joint: k });
        }
        // Normalisation is always applied; it is the identity on unit-sum maps
        // and keeps the gradient consistent with the value.
        let mut ce = 0.0;
        for (s, t) in s_raw.iter().zip(t_raw) {
            ce -= (t / t_sum) * (s / s_sum + CE_EPSILON).ln();
        }
        per_joint[k] = ce;
        if let Some(g) = grad.as_mut() {
            // d/dx_j of -sum_i t_i log(x_i/S + eps):
            //   (1/S) (g_j - sum_i g_i x_i / S),  g_i = -t_i / (x_i/S + eps)
            let gi: Vec<f64> = s_raw
                .iter()
                .zip(t_raw)
                .map(|(s, t)| -(t / t_sum) / (s / s_sum + CE_EPSILON))
                .collect();
            let proj: f64 = gi.iter().zip(s_raw).map(|(g, s)| g * s / s_sum).sum();
            for (out, g) in g.map_mut(k).iter_mut().zip(&gi) {
                *out = inv_k * (g - proj) / s_sum;
            }
        }
    }
    let value = per_joint.iter().sum::<f64>() * inv_k;
    Ok((LossReport::mimicry(value, per_joint), grad))
}

/// Cross-entropy of the L1-normalised student maps against the L1-normalised
/// teacher maps, `-sum t log(s + eps)` averaged over unmasked joints.
pub fn ce_distill_loss(
    student: &ConfidenceMapStack,
    teacher: &ConfidenceMapStack,
    mask: &[bool],
) -> Result<LossReport> {
    cross_entropy(student, teacher, mask, false).map(|(r, _)| r)
}

pub fn ce_distill_loss_with_grad(
    student: &ConfidenceMapStack,
    teacher: &ConfidenceMapStack,
    mask: &[bool],
) -> Result<(LossReport, ConfidenceMapStack)> {
    cross_entropy(student, teacher, mask, true).map(|(r, g)| (r, g.expect("gradient requested")))
}

fn combine(alpha: f64, pd: LossReport, mse: LossReport) -> LossReport {
    LossReport {
        total: alpha * pd.distill_term + (1.0 - alpha) * mse.mse_term,
        mse_term: mse.mse_term,
        distill_term: pd.distill_term,
        per_joint_mse: mse.per_joint_mse,
        per_joint_distill: pd.per_joint_distill,
    }
}

/// `alpha * L_pd + (1 - alpha) * L_mse`, with the distillation divergence
/// chosen by `cfg`.
pub fn fpd_loss(
    student: &ConfidenceMapStack,
    teacher: &ConfidenceMapStack,
    gt: &ConfidenceMapStack,
    cfg: &LossConfig,
    mask: &[bool],
) -> Result<LossReport> {
    cfg.validate()?;
    let mse = mse_loss(student, gt, mask)?;
    let pd = match cfg.distill_divergence {
        Divergence::Mse => distill_loss(student, teacher, mask)?,
        Divergence::CrossEntropy => ce_distill_loss(student, teacher, mask)?,
    };
    Ok(combine(cfg.alpha, pd, mse))
}

pub fn fpd_loss_with_grad(
    student: &ConfidenceMapStack,
    teacher: &ConfidenceMapStack,
    gt: &ConfidenceMapStack,
    cfg: &LossConfig,
    mask: &[bool],
) -> Result<(LossReport, ConfidenceMapStack)> {
    cfg.validate()?;
    let (mse, g_mse) = mse_loss_with_grad(student, gt, mask)?;
    let (pd, g_pd) = match cfg.distill_divergence {
        Divergence::Mse => distill_loss_with_grad(student, teacher, mask)?,
        Divergence::CrossEntropy => ce_distill_loss_with_grad(student, teacher, mask)?,
    };
    let a = cfg.alpha;
    let mut grad = g_mse;
    for (g, p) in grad.data_mut().iter_mut().zip(g_pd.data()) {
        *g = a * p + (1.0 - a) * *g;
    }
    Ok((combine(a, pd, mse), grad))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_stack(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize, src: MapSource) -> ConfidenceMapStack {
        let data = (0..k * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        ConfidenceMapStack::from_vec(k, h, w, data, src).unwrap()
    }

    // Scalar-loop oracle: nested loops over joints, rows and columns.
    fn oracle_mse(a: &ConfidenceMapStack, b: &ConfidenceMapStack, mask: &[bool]) -> f64 {
        let (k, h, w) = a.shape();
        let mut total = 0.0;
        let mut count = 0;
        for j in 0..k {
            if !mask[j] {
                continue;
            }
            count += 1;
            for y in 0..h {
                for x in 0..w {
                    let d = a.get(j, x, y) - b.get(j, x, y);
                    total += d * d;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    fn oracle_ce(s: &ConfidenceMapStack, t: &ConfidenceMapStack, mask: &[bool]) -> f64 {
        let (k, h, w) = s.shape();
        let mut total = 0.0;
        let mut count = 0;
        for j in 0..k {
            if !mask[j] {
                continue;
            }
            count += 1;
            let (mut ss, mut ts) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    ss += s.get(j, x, y);
                    ts += t.get(j, x, y);
                }
            }
            for y in 0..h {
                for x in 0..w {
                    total -= t.get(j, x, y) / ts * (s.get(j, x, y) / ss + CE_EPSILON).ln();
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn identical_maps_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_stack(&mut rng, 3, 8, 8, MapSource::Student);
        let t = a.clone().with_source(MapSource::Teacher);
        assert_eq!(mse_loss(&a, &a, &[true; 3]).unwrap().total, 0.0);
        assert_eq!(distill_loss(&a, &t, &[true; 3]).unwrap().total, 0.0);
    }

    #[test]
    fn single_pixel_error() {
        let gt = ConfidenceMapStack::zeros(4, 8, 8, MapSource::GroundTruth);
        let mut pred = gt.clone().with_source(MapSource::Student);
        pred.map_mut(2)[13] = 0.7;
        let r = mse_loss(&pred, &gt, &[true; 4]).unwrap();
        assert_abs_diff_eq!(r.total, 0.49 / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.per_joint_mse[2], 0.49, epsilon = 1e-15);
    }

    #[test]
    fn masked_joints_shrink_k() {
        let gt = ConfidenceMapStack::zeros(4, 8, 8, MapSource::GroundTruth);
        let mut pred = gt.clone();
        pred.map_mut(0)[0] = 1.0;
        pred.map_mut(3)[0] = 5.0;
        let r = mse_loss(&pred, &gt, &[true, true, false, false]).unwrap();
        assert_abs_diff_eq!(r.total, 0.5, epsilon = 1e-15);
        let (_, g) = mse_loss_with_grad(&pred, &gt, &[true, true, false, false]).unwrap();
        assert!(g.map(3).iter().all(|&v| v == 0.0));
        let none = mse_loss(&pred, &gt, &[false; 4]).unwrap();
        assert_eq!(none.total, 0.0);
    }

    #[test]
    fn random_stacks_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_stack(&mut rng, 3, 8, 8, MapSource::Student);
            let b = random_stack(&mut rng, 3, 8, 8, MapSource::Teacher);
            let mask: Vec<bool> = (0..3).map(|_| rng.random_bool(0.7)).collect();
            let mse = mse_loss(&a, &b, &mask).unwrap().total;
            let pd = distill_loss(&a, &b, &mask).unwrap().total;
            let o = oracle_mse(&a, &b, &mask);
            assert_abs_diff_eq!(mse, o, epsilon = 1e-12);
            assert_abs_diff_eq!(pd, o, epsilon = 1e-12);
            if mask.iter().any(|&m| m) {
                let ce = ce_distill_loss(&a, &b, &mask).unwrap().total;
                assert_abs_diff_eq!(ce, oracle_ce(&a, &b, &mask), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn teacher_equal_to_ground_truth_matches_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_stack(&mut rng, 2, 8, 8, MapSource::Student);
        let gt = random_stack(&mut rng, 2, 8, 8, MapSource::GroundTruth);
        let t = gt.clone().with_source(MapSource::Teacher);
        let m = [true, true];
        assert_eq!(
            distill_loss(&s, &t, &m).unwrap().total,
            mse_loss(&s, &gt, &m).unwrap().total
        );
    }

    #[test]
    fn fpd_degenerate_alphas_and_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_stack(&mut rng, 3, 8, 8, MapSource::Student);
        let t = random_stack(&mut rng, 3, 8, 8, MapSource::Teacher);
        let gt = random_stack(&mut rng, 3, 8, 8, MapSource::GroundTruth);
        let m = [true; 3];
        let mse = mse_loss(&s, &gt, &m).unwrap().total;
        let pd = distill_loss(&s, &t, &m).unwrap().total;
        let at = |alpha| {
            let cfg = LossConfig { alpha, distill_divergence: Divergence::Mse };
            fpd_loss(&s, &t, &gt, &cfg, &m).unwrap()
        };
        assert_eq!(at(0.0).total, mse);
        assert_eq!(at(1.0).total, pd);
        let half = at(0.5);
        assert_abs_diff_eq!(half.total, 0.5 * pd + 0.5 * mse, epsilon = 1e-15);
        assert!(matches!(
            fpd_loss(&s, &t, &gt, &LossConfig { alpha: 1.5, distill_divergence: Divergence::Mse }, &m),
            Err(FpdError::Config(_))
        ));
    }

    #[test]
    fn linear_combination_example() {
        let r = combine(
            0.5,
            LossReport::mimicry(0.2, vec![0.2]),
            LossReport::supervised(0.4, vec![0.4]),
        );
        assert_abs_diff_eq!(r.total, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn ce_uniform_is_log_p() {
        let p = 64;
        let u = ConfidenceMapStack::from_vec(2, 8, 8, vec![1.0 / p as f64; 2 * p], MapSource::Student).unwrap();
        let t = u.clone().with_source(MapSource::Teacher);
        let r = ce_distill_loss(&u, &t, &[true, true]).unwrap();
        assert_abs_diff_eq!(r.total, (p as f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn ce_one_hot_teacher() {
        let mut t = ConfidenceMapStack::zeros(1, 4, 4, MapSource::Teacher);
        t.map_mut(0)[5] = 1.0;
        let mut s = ConfidenceMapStack::from_vec(1, 4, 4, vec![0.05; 16], MapSource::Student).unwrap();
        s.map_mut(0)[5] = 0.25;
        // Student already sums to 1: 15 * 0.05 + 0.25.
        let r = ce_distill_loss(&s, &t, &[true]).unwrap();
        assert_abs_diff_eq!(r.total, -(0.25f64 + CE_EPSILON).ln(), epsilon = 1e-12);
    }

    #[test]
    fn ce_is_directional() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_stack(&mut rng, 1, 4, 4, MapSource::Student);
        let b = random_stack(&mut rng, 1, 4, 4, MapSource::Student);
        let ab = ce_distill_loss(&a, &b.clone().with_source(MapSource::Teacher), &[true]).unwrap();
        let ba = ce_distill_loss(&b, &a.clone().with_source(MapSource::Teacher), &[true]).unwrap();
        assert!((ab.total - ba.total).abs() > 1e-6);
    }

    #[test]
    fn contract_errors() {
        let a = ConfidenceMapStack::zeros(2, 4, 4, MapSource::Student);
        let b = ConfidenceMapStack::zeros(2, 4, 5, MapSource::Teacher);
        assert!(matches!(mse_loss(&a, &b, &[true; 2]), Err(FpdError::Contract(_))));
        assert!(matches!(mse_loss(&a, &a, &[true; 3]), Err(FpdError::Contract(_))));
        assert!(matches!(distill_loss(&a, &a, &[true; 2]), Err(FpdError::Contract(_))));
        let mut neg = ConfidenceMapStack::from_vec(2, 4, 4, vec![0.1; 32], MapSource::Student).unwrap();
        neg.map_mut(0)[0] = -0.1;
        let t = ConfidenceMapStack::from_vec(2, 4, 4, vec![0.1; 32], MapSource::Teacher).unwrap();
        assert!(matches!(ce_distill_loss(&neg, &t, &[true; 2]), Err(FpdError::Contract(_))));
    }

    proptest! {
        #[test]
        fn mse_symmetric_and_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_stack(&mut rng, 2, 5, 5, MapSource::Student);
            let b = random_stack(&mut rng, 2, 5, 5, MapSource::Student);
            let m = [true, rng.random_bool(0.5)];
            let ab = mse_loss(&a, &b, &m).unwrap().total;
            let ba = mse_loss(&b, &a, &m).unwrap().total;
            prop_assert_eq!(ab, ba);
            prop_assert!(ab > 0.0);
        }

        #[test]
        fn fpd_total_is_affine_in_alpha(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_stack(&mut rng, 2, 4, 4, MapSource::Student);
            let t = random_stack(&mut rng, 2, 4, 4, MapSource::Teacher);
            let gt = random_stack(&mut rng, 2, 4, 4, MapSource::GroundTruth);
            let cfg = LossConfig { alpha, distill_divergence: Divergence::Mse };
            let r = fpd_loss(&s, &t, &gt, &cfg, &[true, true]).unwrap();
            let expected = r.mse_term + alpha * (r.distill_term - r.mse_term);
            prop_assert!((r.total - expected).abs() < 1e-12);
        }
    }
}
