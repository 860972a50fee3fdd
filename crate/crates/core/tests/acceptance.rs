//! End-to-end acceptance checks. Each test prints one `PASS` or `FAIL` line
//! straight to stdout (bypassing capture) and then asserts.

use std::f64::consts::PI;
use std::io::Write;

use fpd_core::datasets::{corrupt_labels, synth_dataset_with, AugmentParams, Sample, SynthConfig};
use fpd_core::heatmap::{decode_heatmaps, encode_joints, ConfidenceMapStack, GaussianConfig, ImageSpec, JointSet, MapSource, Visibility};
use fpd_core::losses::{
    ce_distill_loss_with_grad, distill_loss_with_grad, fpd_loss, fpd_loss_with_grad, mse_loss_with_grad, Divergence,
    LossConfig,
};
use fpd_core::metrics::{auc, default_thresholds, evaluate, pck, PckCurve};
use fpd_core::network::{count_params, estimate_flops, HourglassConfig, PoseNetwork};
use fpd_core::training::{
    distill_student, distill_student_logged, train_teacher, LogRecord, RmsPropConfig, TrainConfig, TrainData,
};
use fpd_core::{datasets::AnnotationRecord, Protocol};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(name: &str, ok: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let tag = if ok { "PASS" } else { "FAIL" };
    writeln!(out, "{tag} {name}: {detail}").unwrap();
    assert!(ok, "{name}: {detail}");
}

fn arch(stages: usize, channels: usize) -> HourglassConfig {
    HourglassConfig::teacher().with_stages(stages).with_channels(channels)
}

fn within(v: f64, target: f64, rel: f64) -> bool {
    (v - target).abs() <= rel * target
}

#[test]
fn architecture_costs() {
    let teacher = count_params(&arch(8, 256)) as f64;
    let student = count_params(&arch(4, 128)) as f64;
    let mut ok = within(teacher, 26e6, 0.15) && within(student, 3e6, 0.20);

    let depth: Vec<u64> = [1, 2, 4, 8].iter().map(|&s| count_params(&arch(s, 256))).collect();
    let width: Vec<u64> = [32, 64, 128, 256].iter().map(|&c| count_params(&arch(4, c))).collect();
    ok &= depth.windows(2).all(|w| w[0] < w[1]) && width.windows(2).all(|w| w[0] < w[1]);
    let ratios: Vec<f64> = width.windows(2).map(|w| w[1] as f64 / w[0] as f64).collect();
    ok &= ratios.iter().all(|r| (3.2..=4.8).contains(r));

    // The counter must agree with the parameters a built network owns.
    for cfg in [arch(1, 32), arch(2, 16).with_joints(14)] {
        let net = PoseNetwork::new(cfg, 0).unwrap();
        ok &= net.param_count() as u64 == count_params(&cfg);
    }
    verdict(
        "architecture cost",
        ok,
        &format!(
            "(8,256) {:.2}M, (4,128) {:.2}M, width-halving ratios {:?}",
            teacher / 1e6,
            student / 1e6,
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn flops() {
    let spec = ImageSpec::square(256).unwrap();
    let t = estimate_flops(&arch(8, 256), &spec).unwrap() as f64;
    let s = estimate_flops(&arch(4, 128), &spec).unwrap() as f64;
    let ratio = s / t;
    let mut ok = within(t, 55e9, 0.25) && within(s, 9e9, 0.25) && (ratio - 0.16).abs() <= 0.05;
    let grid = [(8, 256), (4, 256), (2, 256), (1, 256), (4, 128), (4, 64), (4, 32)];
    let f: Vec<u64> = grid.iter().map(|&(a, b)| estimate_flops(&arch(a, b), &spec).unwrap()).collect();
    ok &= f[0] > f[1] && f[1] > f[2] && f[2] > f[3] && f[1] > f[4] && f[4] > f[5] && f[5] > f[6];
    verdict(
        "flops",
        ok,
        &format!("(8,256) {:.1}G, (4,128) {:.2}G, ratio {ratio:.3}", t / 1e9, s / 1e9),
    );
}

fn random_stack(rng: &mut ChaCha8Rng, source: MapSource, positive: bool) -> ConfidenceMapStack {
    let data = (0..2 * 64)
        .map(|_| if positive { rng.random_range(0.05..1.0) } else { rng.random_range(-1.0..1.0) })
        .collect();
    ConfidenceMapStack::from_vec(2, 8, 8, data, source).unwrap()
}

/// Largest relative disagreement between an analytic gradient and central
/// differences of `f`.
fn fd_error(x: &ConfidenceMapStack, grad: &ConfidenceMapStack, f: &dyn Fn(&ConfidenceMapStack) -> f64) -> f64 {
    let h = 1e-6;
    let mut num = vec![0.0; x.data().len()];
    for (i, n) in num.iter_mut().enumerate() {
        let (mut a, mut b) = (x.clone(), x.clone());
        a.data_mut()[i] += h;
        b.data_mut()[i] -= h;
        *n = (f(&a) - f(&b)) / (2.0 * h);
    }
    let diff: f64 = num.iter().zip(grad.data()).map(|(n, g)| (n - g).powi(2)).sum::<f64>().sqrt();
    let scale = num.iter().map(|n| n * n).sum::<f64>().sqrt().max(grad.data().iter().map(|g| g * g).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[test]
fn loss_gradients_and_alpha_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut worst_identity = 0.0f64;
    for case in 0..50 {
        let s = random_stack(&mut rng, MapSource::Student, true);
        let t = random_stack(&mut rng, MapSource::Teacher, true);
        let g = random_stack(&mut rng, MapSource::GroundTruth, true);
        let mask = [true, case % 5 != 0];
        let alpha = rng.random_range(0.0..=1.0);

        let (_, gm) = mse_loss_with_grad(&s, &g, &mask).unwrap();
        worst = worst.max(fd_error(&s, &gm, &|x| mse_loss_with_grad(x, &g, &mask).unwrap().0.total));
        let (_, gd) = distill_loss_with_grad(&s, &t, &mask).unwrap();
        worst = worst.max(fd_error(&s, &gd, &|x| distill_loss_with_grad(x, &t, &mask).unwrap().0.total));
        let (_, gc) = ce_distill_loss_with_grad(&s, &t, &mask).unwrap();
        worst = worst.max(fd_error(&s, &gc, &|x| ce_distill_loss_with_grad(x, &t, &mask).unwrap().0.total));
        for div in [Divergence::Mse, Divergence::CrossEntropy] {
            let cfg = LossConfig {
                alpha,
                distill_divergence: div,
            };
            let (r, gf) = fpd_loss_with_grad(&s, &t, &g, &cfg, &mask).unwrap();
            worst = worst.max(fd_error(&s, &gf, &|x| fpd_loss(x, &t, &g, &cfg, &mask).unwrap().total));

            let at = |a: f64| {
                fpd_loss(&s, &t, &g, &LossConfig { alpha: a, distill_divergence: div }, &mask).unwrap().total
            };
            let affine = at(0.0) + alpha * (at(1.0) - at(0.0));
            let blend = alpha * r.distill_term + (1.0 - alpha) * r.mse_term;
            worst_identity = worst_identity.max((r.total - blend).abs()).max((r.total - affine).abs());
        }
    }
    verdict(
        "loss correctness",
        worst < 1e-3 && worst_identity <= 1e-10,
        &format!("max relative gradient error {worst:.2e}, max alpha-identity gap {worst_identity:.1e}"),
    );
}

#[test]
fn codec() {
    let spec = ImageSpec::square(256).unwrap();
    let cfg = GaussianConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)];
        let maps = encode_joints(&JointSet::visible(vec![p]), &spec, &cfg).unwrap();
        let back = decode_heatmaps(&maps, &spec, false).unwrap();
        for a in 0..2 {
            worst = worst.max((back.coords[0][a] - p[a]).abs());
        }
    }
    let mut peak_gap = 0.0f64;
    for _ in 0..100 {
        let (hx, hy) = (rng.random_range(0..64usize), rng.random_range(0..64usize));
        let centre = [(hx as f64 + 0.5) * 4.0, (hy as f64 + 0.5) * 4.0];
        let maps = encode_joints(&JointSet::visible(vec![centre]), &spec, &cfg).unwrap();
        peak_gap = peak_gap.max((maps.get(0, hx, hy) - 1.0 / (2.0 * PI)).abs());
    }
    verdict(
        "codec",
        worst <= 0.5 * 4.0 && peak_gap <= 1e-9,
        &format!("max round-trip error {worst:.3} px, peak gap {peak_gap:.1e}"),
    );
}

fn random_joints(rng: &mut ChaCha8Rng, k: usize, unlabelled_p: f64) -> JointSet {
    let mut j = JointSet::visible((0..k).map(|_| [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)]).collect());
    for i in 0..k {
        if rng.random::<f64>() < unlabelled_p {
            j.set_unlabelled(i);
        }
    }
    j
}

/// Scalar reference: per-joint hit flags, macro mean and trapezoid AUC.
fn oracle(preds: &[JointSet], gts: &[JointSet], norms: &[f64], tau: f64) -> (Vec<Vec<Option<bool>>>, f64) {
    let mut flags = Vec::new();
    for i in 0..preds.len() {
        let mut row = Vec::new();
        for j in 0..gts[i].coords.len() {
            if gts[i].visibility[j] == Visibility::Unlabelled {
                row.push(None);
            } else if preds[i].visibility[j] == Visibility::Unlabelled {
                row.push(Some(false));
            } else {
                let dx = preds[i].coords[j][0] - gts[i].coords[j][0];
                let dy = preds[i].coords[j][1] - gts[i].coords[j][1];
                row.push(Some((dx * dx + dy * dy).sqrt() <= tau * norms[i]));
            }
        }
        flags.push(row);
    }
    let k = gts[0].coords.len();
    let mut means = Vec::new();
    for j in 0..k {
        let col: Vec<bool> = flags.iter().filter_map(|r| r[j]).collect();
        if !col.is_empty() {
            means.push(col.iter().filter(|&&b| b).count() as f64 / col.len() as f64);
        }
    }
    let mean = if means.is_empty() { 0.0 } else { means.iter().sum::<f64>() / means.len() as f64 };
    (flags, mean)
}

#[test]
fn metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for case in 0..100 {
        let n = rng.random_range(1..5);
        let k = if case % 2 == 0 { 16 } else { 14 };
        let gts: Vec<JointSet> = (0..n).map(|_| random_joints(&mut rng, k, 0.15)).collect();
        let preds: Vec<JointSet> = gts
            .iter()
            .map(|g| {
                let mut p = random_joints(&mut rng, k, 0.05);
                for j in 0..k {
                    if p.is_labelled(j) && g.is_labelled(j) && rng.random::<f64>() < 0.6 {
                        p.coords[j] = [g.coords[j][0] + rng.random_range(-6.0..6.0), g.coords[j][1]];
                    }
                }
                p
            })
            .collect();
        let norms: Vec<f64> = (0..n).map(|_| rng.random_range(4.0..20.0)).collect();
        let protocol = if k == 16 { Protocol::PckhHalf } else { Protocol::PckPointTwo };

        let (flags, mean) = oracle(&preds, &gts, &norms, protocol.tau());
        for i in 0..n {
            if pck(&preds[i], &gts[i], norms[i], protocol.tau()).unwrap() != flags[i] {
                mismatches += 1;
            }
        }
        let records: Vec<AnnotationRecord> = gts
            .iter()
            .zip(&norms)
            .map(|(g, &nm)| AnnotationRecord {
                image_path: "case".into(),
                center: [32.0, 32.0],
                scale: 1.0,
                joints: g.clone(),
                head_size: Some(nm),
                torso_diag: Some(nm),
            })
            .collect();
        let r = evaluate(&preds, &records, protocol).unwrap();
        let accuracy: Vec<f64> = default_thresholds().iter().map(|&t| oracle(&preds, &gts, &norms, t).1).collect();
        let mut area = 0.0;
        for w in 0..accuracy.len() - 1 {
            area += 0.01 * (accuracy[w] + accuracy[w + 1]) / 2.0;
        }
        let ref_auc = area / 0.5;
        let curve = PckCurve {
            thresholds: default_thresholds(),
            accuracy: accuracy.clone(),
            normalizer_kind: protocol.normalizer_kind(),
        };
        if (r.mean_pck - mean).abs() > 1e-12
            || (r.auc - ref_auc).abs() > 1e-12
            || (auc(&curve).unwrap() - ref_auc).abs() > 1e-12
            || r.curve.accuracy.iter().zip(&accuracy).any(|(a, b)| (a - b).abs() > 1e-12)
        {
            mismatches += 1;
        }
    }
    verdict("metric oracle", mismatches == 0, &format!("{mismatches} mismatching cases out of 100"));
}

fn synth(size: usize, n: usize, seed: u64) -> Vec<Sample> {
    synth_dataset_with(&SynthConfig::for_size(size), n, 16, seed)
        .unwrap()
        .into_iter()
        .map(|(s, _)| s)
        .collect()
}

fn step_losses(log: &[LogRecord]) -> Vec<f64> {
    log.iter()
        .filter_map(|r| match r {
            LogRecord::Step { loss_total, .. } => Some(*loss_total),
            _ => None,
        })
        .collect()
}

/// One stage, 32 channels, 16 synthetic crops at 128 px, validated on the
/// training crops themselves.
#[test]
fn overfit_sanity() {
    let train = synth(128, 16, 11);
    let data = TrainData {
        train: train.clone(),
        val: train,
    };
    let cfg = HourglassConfig::student().with_stages(1).with_channels(32).with_input_size(128);
    let tc = TrainConfig {
        epochs: 500,
        max_steps: Some(2000),
        augment: None,
        eval_interval: 25,
        seed: 0,
        ..TrainConfig::mpii()
    };
    let mut log = Vec::new();
    let ck = fpd_core::training::train_teacher_logged(&data, cfg, &tc, &mut |r| log.push(r.clone())).unwrap();
    let losses = step_losses(&log);
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[40..50].iter().sum::<f64>() / 10.0;
    let best = ck.best_metric.unwrap_or(0.0);
    verdict(
        "overfit sanity",
        best >= 0.95 && ck.step <= 2000 && tail < head,
        &format!("train PCKh@0.5 {best:.4} after <= {} steps; loss {head:.3} -> {tail:.3} over the first 50", ck.step),
    );
}

const DISTILL_SIZE: usize = 128;
const DISTILL_STEPS: usize = 1500;
const DISTILL_LR: f64 = 1e-3;

/// Clean-trained teacher, students on 20%-corrupted labels; alpha 0.5 must
/// match or beat alpha 0 on clean validation labels for most seeds.
#[test]
fn distillation_mechanism() {
    let mut all = synth(DISTILL_SIZE, 80, 7);
    let val = all.split_off(48);
    let clean = TrainData {
        train: all.clone(),
        val: val.clone(),
    };
    let mut noisy_train = all;
    corrupt_labels(&mut noisy_train, 0.2, 99).unwrap();
    let noisy = TrainData {
        train: noisy_train,
        val,
    };
    let base = TrainConfig {
        epochs: 100_000,
        max_steps: Some(DISTILL_STEPS),
        augment: Some(AugmentParams::for_joints(16)),
        eval_interval: 25,
        optimizer: RmsPropConfig {
            learning_rate: DISTILL_LR,
            ..Default::default()
        },
        ..TrainConfig::mpii()
    };
    let tcfg = HourglassConfig::student().with_stages(1).with_channels(32).with_input_size(DISTILL_SIZE);
    let teacher = train_teacher(&clean, tcfg, &base).unwrap();
    let scfg = tcfg.with_channels(16);

    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let score = |alpha: f64| {
            let tc = TrainConfig {
                seed,
                loss: LossConfig {
                    alpha,
                    ..Default::default()
                },
                ..base.clone()
            };
            distill_student(&noisy, &teacher, scfg, &tc).unwrap().best_metric.unwrap()
        };
        let (plain, distilled) = (score(0.0), score(0.5));
        wins += (distilled >= plain) as usize;
        rows.push(format!("seed {seed}: {plain:.3} vs {distilled:.3}"));
    }
    verdict(
        "distillation mechanism",
        wins >= 2,
        &format!(
            "teacher {:.3}; alpha 0 vs 0.5 PCKh@0.5 [{}]; {wins}/3 seeds favour distillation",
            teacher.best_metric.unwrap(),
            rows.join(", ")
        ),
    );
}

/// alpha in {0, 0.5, 1} runs end to end and every logged step decomposes.
#[test]
fn alpha_sweep_harness() {
    let mut all = synth(64, 10, 3);
    let val = all.split_off(8);
    let data = TrainData { train: all, val };
    let cfg = HourglassConfig::student().with_stages(2).with_channels(8).with_depth(2).with_input_size(64);
    let tc = TrainConfig {
        epochs: 2,
        augment: Some(AugmentParams::for_joints(16)),
        ..TrainConfig::mpii()
    };
    let teacher = train_teacher(&data, cfg.with_channels(16), &tc).unwrap();
    let mut ok = true;
    let mut steps = 0;
    let mut digests = Vec::new();
    for alpha in [0.0, 0.5, 1.0] {
        let mut tc = tc.clone();
        tc.loss.alpha = alpha;
        let mut log = Vec::new();
        let ck = distill_student_logged(&data, &teacher, cfg, &tc, &mut |r| log.push(r.clone())).unwrap();
        digests.push(ck.to_network().unwrap().digest());
        for r in &log {
            if let LogRecord::Step {
                alpha: a,
                loss_total,
                loss_mse,
                loss_distill: Some(d),
                ..
            } = r
            {
                steps += 1;
                let expect = a * d + (1.0 - a) * loss_mse;
                ok &= *a == alpha && (loss_total - expect).abs() <= 1e-10 * expect.abs().max(1.0);
            } else if matches!(r, LogRecord::Step { .. }) {
                ok = false;
            }
        }
    }
    ok &= steps == 12 && digests[0] != digests[1] && digests[1] != digests[2];
    verdict(
        "alpha sweep harness",
        ok,
        &format!("3 students, {steps} logged steps, per-term losses decompose"),
    );
}
