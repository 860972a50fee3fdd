//! PCK / PCKh accuracy, PCK curves and their area.
//!
//! A joint counts as correct when its distance to ground truth is at most
//! `tau * normalizer` (boundary inclusive). Joints unlabelled in the ground
//! truth are skipped; an unlabelled prediction for a labelled joint is wrong.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::AnnotationRecord;
use crate::error::{FpdError, Result};
use crate::heatmap::JointSet;
use crate::network::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerKind {
    Head,
    Torso,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// Head-normalized, tau = 0.5.
    #[serde(rename = "pckh05")]
    PckhHalf,
    /// Torso-normalized, tau = 0.2.
    #[serde(rename = "pck02")]
    PckPointTwo,
}

impl Protocol {
    pub fn tau(self) -> f64 {
        match self {
            Protocol::PckhHalf => 0.5,
            Protocol::PckPointTwo => 0.2,
        }
    }

    pub fn normalizer_kind(self) -> NormalizerKind {
        match self {
            Protocol::PckhHalf => NormalizerKind::Head,
            Protocol::PckPointTwo => NormalizerKind::Torso,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::PckhHalf => "pckh05",
            Protocol::PckPointTwo => "pck02",
        }
    }
}

impl FromStr for Protocol {
    type Err = FpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pckh05" => Ok(Protocol::PckhHalf),
            "pck02" => Ok(Protocol::PckPointTwo),
            other => Err(FpdError::Config(format!(
                "unknown protocol {other:?} (expected pckh05 or pck02)"
            ))),
        }
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Per-joint correctness; `None` where the ground truth is unlabelled.
pub fn pck(pred: &JointSet, gt: &JointSet, normalizer: f64, tau: f64) -> Result<Vec<Option<bool>>> {
    if !(normalizer > 0.0) || !normalizer.is_finite() {
        return Err(FpdError::Contract(format!(
            "normalizer must be positive, got {normalizer}"
        )));
    }
    if pred.len() != gt.len() {
        return Err(FpdError::Contract(format!(
            "{} predicted joints vs {} ground-truth joints",
            pred.len(),
            gt.len()
        )));
    }
    let limit = tau * normalizer;
    Ok((0..gt.len())
        .map(|k| {
            gt.is_labelled(k).then(|| {
                pred.is_labelled(k) && distance(pred.coords[k], gt.coords[k]) <= limit
            })
        })
        .collect())
}

/// Accuracy at each threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub normalizer_kind: NormalizerKind,
}

/// `0, 0.01, ..., 0.5`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 100.0).collect()
}

/// Trapezoidal area under the curve divided by the largest threshold.
pub fn auc(curve: &PckCurve) -> Result<f64> {
    let t = &curve.thresholds;
    if t.len() < 2 || t.len() != curve.accuracy.len() {
        return Err(FpdError::Contract(format!(
            "curve needs >= 2 matching points (thresholds {}, accuracy {})",
            t.len(),
            curve.accuracy.len()
        )));
    }
    if t.windows(2).any(|w| !(w[1] > w[0])) || t[0] < 0.0 {
        return Err(FpdError::Contract(
            "thresholds must be non-negative and strictly ascending".into(),
        ));
    }
    let t_max = t[t.len() - 1];
    let area: f64 = t
        .windows(2)
        .zip(curve.accuracy.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum();
    Ok(area / t_max)
}

/// Named joint groups used in reports.
pub fn joint_groups(k: usize) -> Vec<(&'static str, Vec<usize>)> {
    let names = ["Head", "Sho.", "Elb.", "Wri.", "Hip", "Knee", "Ank."];
    let idx: [[usize; 2]; 7] = match k {
        16 => [[8, 9], [12, 13], [11, 14], [10, 15], [2, 3], [1, 4], [0, 5]],
        14 => [[12, 13], [8, 9], [7, 10], [6, 11], [2, 3], [1, 4], [0, 5]],
        _ => return Vec::new(),
    };
    names.into_iter().zip(idx).map(|(n, i)| (n, i.to_vec())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub protocol: Protocol,
    /// Fraction correct per joint index; `None` for joints never labelled.
    pub per_joint_pck: Vec<Option<f64>>,
    /// Pooled accuracy per report group (empty for non-standard layouts).
    pub per_group_pck: Vec<(String, f64)>,
    /// Macro average over joint indices with at least one labelled instance.
    pub mean_pck: f64,
    pub auc: f64,
    /// Labelled ground-truth joint instances scored.
    pub num_joints_evaluated: usize,
    pub curve: PckCurve,
    pub cost: Option<ModelSpec>,
}

impl EvalResult {
    pub fn with_cost(mut self, cost: ModelSpec) -> Self {
        self.cost = Some(cost);
        self
    }

    /// One header and one value row; percentages, params in millions, GFLOPs.
    pub fn report(&self) -> String {
        let mut head = String::new();
        let mut row = String::new();
        let cols: Vec<(String, f64)> = if self.per_group_pck.is_empty() {
            self.per_joint_pck
                .iter()
                .enumerate()
                .map(|(k, v)| (format!("j{k}"), v.unwrap_or(f64::NAN)))
                .collect()
        } else {
            self.per_group_pck.clone()
        };
        for (name, v) in cols
            .iter()
            .map(|(n, v)| (n.as_str(), *v))
            .chain([("Mean", self.mean_pck), ("AUC", self.auc)])
        {
            let _ = write!(head, "{name:>7}");
            let _ = write!(row, "{:>7.1}", 100.0 * v);
        }
        if let Some(c) = &self.cost {
            let _ = write!(head, "{:>9}{:>9}", "#Param", "FLOPs");
            let _ = write!(row, "{:>8.2}M{:>8.2}G", c.params_millions(), c.gflops());
        }
        format!("{} ({}, tau={})\n{head}\n{row}\n", self.protocol.name(), "boundary inclusive", self.protocol.tau())
    }
}

fn normalizer(rec: &AnnotationRecord, kind: NormalizerKind, index: usize) -> Result<f64> {
    let (v, field) = match kind {
        NormalizerKind::Head => (rec.head_size, "head_size"),
        NormalizerKind::Torso => (rec.torso_diag, "torso_diag"),
    };
    v.ok_or_else(|| {
        FpdError::Data(format!(
            "record {index} ({}) has no {field} for the chosen protocol",
            rec.image_path
        ))
    })
}

/// Scores predictions against records with the protocol's normalizer; the
/// curve and AUC use [`default_thresholds`].
pub fn evaluate(predictions: &[JointSet], records: &[AnnotationRecord], protocol: Protocol) -> Result<EvalResult> {
    if predictions.len() != records.len() {
        return Err(FpdError::Contract(format!(
            "{} predictions for {} records",
            predictions.len(),
            records.len()
        )));
    }
    let k = records.first().map_or(0, |r| r.joints.len());
    let kind = protocol.normalizer_kind();
    let mut norms = Vec::with_capacity(records.len());
    for (i, (p, r)) in predictions.iter().zip(records).enumerate() {
        if r.joints.len() != k || p.len() != k {
            return Err(FpdError::Contract(format!(
                "record {i}: joint count differs from {k}"
            )));
        }
        norms.push(normalizer(r, kind, i)?);
    }

    let per_joint_at = |tau: f64| -> Result<(Vec<usize>, Vec<usize>)> {
        let (mut hit, mut total) = (vec![0usize; k], vec![0usize; k]);
        for ((p, r), &n) in predictions.iter().zip(records).zip(&norms) {
            for (j, f) in pck(p, &r.joints, n, tau)?.into_iter().enumerate() {
                if let Some(ok) = f {
                    total[j] += 1;
                    hit[j] += ok as usize;
                }
            }
        }
        Ok((hit, total))
    };
    let macro_mean = |hit: &[usize], total: &[usize]| {
        let fr: Vec<f64> = hit
            .iter()
            .zip(total)
            .filter(|(_, &t)| t > 0)
            .map(|(&h, &t)| h as f64 / t as f64)
            .collect();
        if fr.is_empty() {
            0.0
        } else {
            fr.iter().sum::<f64>() / fr.len() as f64
        }
    };

    let (hit, total) = per_joint_at(protocol.tau())?;
    let per_joint_pck = hit
        .iter()
        .zip(&total)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let per_group_pck = joint_groups(k)
        .into_iter()
        .map(|(name, idx)| {
            let h: usize = idx.iter().map(|&j| hit[j]).sum();
            let t: usize = idx.iter().map(|&j| total[j]).sum();
            (name.to_string(), if t > 0 { h as f64 / t as f64 } else { 0.0 })
        })
        .collect();
    let thresholds = default_thresholds();
    let accuracy = thresholds
        .iter()
        .map(|&t| per_joint_at(t).map(|(h, n)| macro_mean(&h, &n)))
        .collect::<Result<Vec<_>>>()?;
    let curve = PckCurve {
        thresholds,
        accuracy,
        normalizer_kind: kind,
    };
    Ok(EvalResult {
        protocol,
        per_joint_pck,
        per_group_pck,
        mean_pck: macro_mean(&hit, &total),
        auc: auc(&curve)?,
        num_joints_evaluated: total.iter().sum(),
        curve,
        cost: None,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::heatmap::Visibility;

    fn rec(joints: JointSet, head: f64) -> AnnotationRecord {
        AnnotationRecord {
            image_path: "r".into(),
            center: [0.0, 0.0],
            scale: 1.0,
            joints,
            head_size: Some(head),
            torso_diag: None,
        }
    }

    #[test]
    fn exact_predictions_are_all_correct() {
        let gt = JointSet::new(
            vec![[1.0, 2.0], [3.0, 4.0], [0.0, 0.0]],
            vec![Visibility::Visible, Visibility::Occluded, Visibility::Unlabelled],
        )
        .unwrap();
        assert_eq!(pck(&gt, &gt, 5.0, 1e-9).unwrap(), vec![Some(true), Some(true), None]);
    }

    #[test]
    fn boundary_is_inclusive() {
        let gt = JointSet::visible(vec![[10.0, 10.0]]);
        let pred = JointSet::visible(vec![[13.0, 14.0]]);
        assert_eq!(pck(&pred, &gt, 10.0, 0.5).unwrap(), vec![Some(true)]);
        assert_eq!(pck(&pred, &gt, 10.0, 0.49).unwrap(), vec![Some(false)]);
    }

    #[test]
    fn bad_normalizer_is_contract_error() {
        let gt = JointSet::visible(vec![[0.0, 0.0]]);
        assert!(matches!(pck(&gt, &gt, 0.0, 0.5), Err(FpdError::Contract(_))));
        assert!(matches!(pck(&gt, &gt, -1.0, 0.5), Err(FpdError::Contract(_))));
    }

    #[test]
    fn auc_reference_curves() {
        let t = default_thresholds();
        let c = |f: &dyn Fn(f64) -> f64| PckCurve {
            thresholds: t.clone(),
            accuracy: t.iter().map(|&x| f(x)).collect(),
            normalizer_kind: NormalizerKind::Head,
        };
        assert!((auc(&c(&|_| 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(auc(&c(&|_| 0.0)).unwrap(), 0.0);
        assert!((auc(&c(&|x| x / 0.5)).unwrap() - 0.5).abs() < 1e-12);
        let mut bad = c(&|_| 1.0);
        bad.thresholds.swap(3, 4);
        assert!(matches!(auc(&bad), Err(FpdError::Contract(_))));
    }

    #[test]
    fn evaluate_perfect_and_hopeless() {
        let gts: Vec<JointSet> = (0..5)
            .map(|i| JointSet::visible((0..16).map(|k| [50.0 + k as f64 * 3.0, 40.0 + i as f64]).collect()))
            .collect();
        let recs: Vec<_> = gts.iter().map(|g| rec(g.clone(), 20.0)).collect();
        let r = evaluate(&gts, &recs, Protocol::PckhHalf).unwrap();
        assert_eq!(r.mean_pck, 1.0);
        assert_eq!(r.num_joints_evaluated, 80);
        assert_eq!(r.per_group_pck.len(), 7);
        let corner: Vec<JointSet> = (0..5).map(|_| JointSet::visible(vec![[0.0, 0.0]; 16])).collect();
        let r = evaluate(&corner, &recs, Protocol::PckhHalf).unwrap();
        assert_eq!(r.mean_pck, 0.0);
        assert!(r.report().contains("Mean"));
    }

    #[test]
    fn missing_normalizer_is_data_error() {
        let g = JointSet::visible(vec![[1.0, 1.0]; 14]);
        let r = rec(g.clone(), 5.0);
        assert!(matches!(
            evaluate(&[g], &[r], Protocol::PckPointTwo),
            Err(FpdError::Data(_))
        ));
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in [Protocol::PckhHalf, Protocol::PckPointTwo] {
            assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.name()));
        }
    }

    fn joints(k: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec(prop::array::uniform2(-50.0f64..50.0), k)
    }

    proptest! {
        #[test]
        fn pck_monotone_in_tau(p in joints(6), g in joints(6), n in 1.0f64..30.0,
                               t1 in 0.0f64..1.0, dt in 0.0f64..1.0) {
            let (p, g) = (JointSet::visible(p), JointSet::visible(g));
            let lo = pck(&p, &g, n, t1).unwrap();
            let hi = pck(&p, &g, n, t1 + dt).unwrap();
            for (a, b) in lo.iter().zip(&hi) {
                prop_assert!(!(a.unwrap() && !b.unwrap()));
            }
        }

        #[test]
        fn pck_scale_equivariant(p in joints(5), g in joints(5), n in 1.0f64..30.0,
                                 tau in 0.01f64..1.0, e in -3i32..4) {
            // Power-of-two factors keep the comparison exact.
            let s = 2f64.powi(e);
            let scale = |v: &Vec<[f64; 2]>| JointSet::visible(v.iter().map(|q| [q[0] * s, q[1] * s]).collect());
            let a = pck(&JointSet::visible(p.clone()), &JointSet::visible(g.clone()), n, tau).unwrap();
            let b = pck(&scale(&p), &scale(&g), n * s, tau).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
