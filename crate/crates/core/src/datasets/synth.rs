//! Procedural stick figures with exactly known joints.
//!
//! A 16-joint skeleton (MPII order) is posed by jittering bone angles of a
//! fixed template, then drawn as grey limbs with one coloured disc per
//! joint on a noisy dark background. Each joint keeps the same colour in
//! every image, so a network can learn the mapping; the disc centre is the
//! ground-truth coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotations::{torso_size, AnnotationRecord, HEAD_BOX_FACTOR, MPII_TORSO_PAIR};
use super::image::{Affine2, Image};
use super::{Sample, SCALE_UNIT_PX};
use crate::error::{FpdError, Result};
use crate::exec::Exec;
use crate::heatmap::JointSet;

/// Template in figure units, MPII order, y pointing down.
const TEMPLATE: [[f64; 2]; 16] = [
    [-0.18, 0.90],  // r ankle
    [-0.17, 0.45],  // r knee
    [-0.16, 0.00],  // r hip
    [0.16, 0.00],   // l hip
    [0.17, 0.45],   // l knee
    [0.18, 0.90],   // l ankle
    [0.00, 0.00],   // pelvis
    [0.00, -0.50],  // thorax
    [0.00, -0.68],  // upper neck
    [0.00, -0.90],  // head top
    [-0.35, 0.05],  // r wrist
    [-0.30, -0.25], // r elbow
    [-0.20, -0.55], // r shoulder
    [0.20, -0.55],  // l shoulder
    [0.30, -0.25],  // l elbow
    [0.35, 0.05],   // l wrist
];

/// Parent of each joint in the kinematic tree (pelvis is the root).
const PARENT: [usize; 16] = [1, 2, 6, 6, 3, 4, 6, 6, 7, 8, 11, 12, 7, 7, 13, 14];

/// Joints posed in an order where parents come first.
const POSE_ORDER: [usize; 15] = [2, 3, 7, 1, 4, 8, 12, 13, 0, 5, 9, 11, 14, 10, 15];

/// LSP joint order expressed as MPII indices.
const LSP_FROM_MPII: [usize; 14] = [0, 1, 2, 3, 4, 5, 10, 11, 12, 13, 14, 15, 8, 9];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Joint disc radius in pixels.
    pub marker_radius: f64,
    /// Limb line half-width in pixels.
    pub limb_half_width: f64,
    /// Max per-bone angle perturbation, degrees.
    pub bone_jitter_deg: f64,
    /// Max whole-figure rotation, degrees.
    pub global_rotation_deg: f64,
    /// Figure height as a fraction of the image side.
    pub height_range: (f64, f64),
    /// Amplitude of uniform background noise.
    pub noise: f32,
}

impl SynthConfig {
    pub fn for_size(image_size: usize) -> Self {
        let s = image_size as f64;
        Self {
            image_size,
            marker_radius: (s / 48.0).max(2.0),
            limb_half_width: (s / 160.0).max(0.75),
            bone_jitter_deg: 25.0,
            global_rotation_deg: 20.0,
            height_range: (0.55, 0.75),
            noise: 0.03,
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::for_size(super::CROP_SIZE)
    }
}

/// Marker colour of joint `k` out of `total`: evenly spaced saturated hues.
pub fn joint_color(k: usize, total: usize) -> [f32; 3] {
    let h = 6.0 * k as f32 / total.max(1) as f32;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

const LIMB_COLOR: [f32; 3] = [0.45, 0.45, 0.45];

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Full 16-joint pose in pixel coordinates.
fn pose(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> [[f64; 2]; 16] {
    let mut p = TEMPLATE;
    for &j in &POSE_ORDER {
        let par = PARENT[j];
        let (dx, dy) = (TEMPLATE[j][0] - TEMPLATE[par][0], TEMPLATE[j][1] - TEMPLATE[par][1]);
        let a = rng.random_range(-cfg.bone_jitter_deg..=cfg.bone_jitter_deg).to_radians();
        let (s, c) = a.sin_cos();
        p[j] = [p[par][0] + c * dx - s * dy, p[par][1] + s * dx + c * dy];
    }
    let size = cfg.image_size as f64;
    let height = rng.random_range(cfg.height_range.0..=cfg.height_range.1) * size / 1.8;
    let rot = rng.random_range(-cfg.global_rotation_deg..=cfg.global_rotation_deg);
    let t = Affine2::scaling(height).then(&Affine2::rotation_deg(rot));
    let mut pts = p.map(|q| t.apply(q));

    let margin = cfg.marker_radius + 2.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for q in &pts {
        for a in 0..2 {
            lo[a] = lo[a].min(q[a]);
            hi[a] = hi[a].max(q[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let room = size - 2.0 * margin;
    let shrink = if span > room { room / span } else { 1.0 };
    let mut shift = [0.0; 2];
    for a in 0..2 {
        let extent = (hi[a] - lo[a]) * shrink;
        let slack = room - extent;
        shift[a] = margin + rng.random_range(0.0..=slack.max(0.0)) - lo[a] * shrink;
    }
    for q in pts.iter_mut() {
        *q = [q[0] * shrink + shift[0], q[1] * shrink + shift[1]];
    }
    pts
}

fn select(full: &[[f64; 2]; 16], k: usize) -> Vec<[f64; 2]> {
    match k {
        14 => LSP_FROM_MPII.iter().map(|&j| full[j]).collect(),
        k if k <= 16 => full[..k].to_vec(),
        k => (0..k)
            .map(|i| {
                if i < 16 {
                    full[i]
                } else {
                    // Extra joints sit at bone midpoints.
                    let j = (i - 16) % 16;
                    let par = PARENT[j];
                    let f = 0.5 / (1 + (i - 16) / 16) as f64;
                    [
                        full[j][0] + f * (full[par][0] - full[j][0]),
                        full[j][1] + f * (full[par][1] - full[j][1]),
                    ]
                }
            })
            .collect(),
    }
}

fn draw_segment(img: &mut Image, a: [f64; 2], b: [f64; 2], half_width: f64, color: [f32; 3]) {
    let lo_x = (a[0].min(b[0]) - half_width).floor().max(0.0) as usize;
    let hi_x = ((a[0].max(b[0]) + half_width).ceil() as usize).min(img.width);
    let lo_y = (a[1].min(b[1]) - half_width).floor().max(0.0) as usize;
    let hi_y = ((a[1].max(b[1]) + half_width).ceil() as usize).min(img.height);
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = (vx * vx + vy * vy).max(1e-12);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((px - a[0]) * vx + (py - a[1]) * vy) / len2).clamp(0.0, 1.0);
            if dist([px, py], [a[0] + t * vx, a[1] + t * vy]) <= half_width {
                img.set_pixel(x, y, color);
            }
        }
    }
}

fn draw_disc(img: &mut Image, c: [f64; 2], r: f64, color: [f32; 3]) {
    draw_segment(img, c, c, r, color);
}

fn render(cfg: &SynthConfig, full: &[[f64; 2]; 16], joints: &[[f64; 2]], rng: &mut ChaCha8Rng) -> Image {
    let n = cfg.image_size;
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.25));
    let mut img = Image::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let px = std::array::from_fn(|c| base[c] + rng.random_range(-cfg.noise..=cfg.noise));
            img.set_pixel(x, y, px);
        }
    }
    for (j, &par) in PARENT.iter().enumerate() {
        if j != par {
            draw_segment(&mut img, full[j], full[par], cfg.limb_half_width, LIMB_COLOR);
        }
    }
    for (k, &p) in joints.iter().enumerate() {
        draw_disc(&mut img, p, cfg.marker_radius, joint_color(k, joints.len()));
    }
    img
}

fn one(cfg: &SynthConfig, k: usize, seed: u64, index: usize) -> (Sample, AnnotationRecord) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Re-draw poses whose markers would overlap; keep the last one if none fit.
    // The template spacing makes a clear pose the common case.
    let min_gap = 2.0 * cfg.marker_radius + 1.0;
    let mut full = pose(cfg, &mut rng);
    for _ in 0..64 {
        let sel = select(&full, k);
        let clear = sel
            .iter()
            .enumerate()
            .all(|(i, a)| sel[i + 1..].iter().all(|b| dist(*a, *b) >= min_gap));
        if clear {
            break;
        }
        full = pose(cfg, &mut rng);
    }
    let coords = select(&full, k);
    let image = render(cfg, &full, &coords, &mut rng);
    let size = cfg.image_size as f64;
    let skeleton = JointSet::visible(full.to_vec());
    let record = AnnotationRecord {
        image_path: format!("synthetic/{index}"),
        center: [size / 2.0, size / 2.0],
        scale: size / SCALE_UNIT_PX,
        joints: JointSet::visible(coords),
        head_size: Some(HEAD_BOX_FACTOR * std::f64::consts::SQRT_2 * dist(full[8], full[9])),
        torso_diag: torso_size(&skeleton, MPII_TORSO_PAIR),
    };
    let sample = Sample {
        image,
        joints: record.joints.clone(),
        meta: record.clone(),
        transform: Affine2::identity(),
    };
    (sample, record)
}

/// `n` stick figures with `k` joints at the default 256 px crop size.
pub fn synth_dataset(n: usize, k: usize, rng_seed: u64) -> Result<Vec<(Sample, AnnotationRecord)>> {
    synth_dataset_with(&SynthConfig::default(), n, k, rng_seed)
}

pub fn synth_dataset_with(
    cfg: &SynthConfig,
    n: usize,
    k: usize,
    rng_seed: u64,
) -> Result<Vec<(Sample, AnnotationRecord)>> {
    if n == 0 || k == 0 {
        return Err(FpdError::InvalidInput(format!(
            "synthetic dataset needs n >= 1 and k >= 1 (got n={n}, k={k})"
        )));
    }
    if cfg.image_size < 16 {
        return Err(FpdError::Config(format!(
            "synthetic image size {} is too small",
            cfg.image_size
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(rng_seed);
    let seeds: Vec<u64> = (0..n).map(|_| master.random()).collect();
    let out = Exec::default().map_range(n, |i| one(cfg, k, seeds[i], i));
    Ok(out)
}

/// Moves each labelled joint, with probability `fraction`, to a uniformly
/// random in-frame position. Images are untouched. Returns how many joints
/// were moved.
pub fn corrupt_labels(samples: &mut [Sample], fraction: f64, rng_seed: u64) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(FpdError::Config(format!(
            "corruption fraction {fraction} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut moved = 0;
    for s in samples.iter_mut() {
        let (w, h) = (s.image.width as f64, s.image.height as f64);
        for k in 0..s.joints.len() {
            if s.joints.is_labelled(k) && rng.random::<f64>() < fraction {
                s.joints.coords[k] = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
                moved += 1;
            }
        }
    }
    Ok(moved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{apply_augment, AugmentDraw, MPII_FLIP_PAIRS};
    use crate::heatmap::{decode_heatmaps, encode_joints, GaussianConfig, ImageSpec};

    #[test]
    fn sixteen_fully_labelled_samples() {
        let data = synth_dataset_with(&SynthConfig::for_size(64), 16, 16, 1).unwrap();
        assert_eq!(data.len(), 16);
        for (s, r) in &data {
            assert_eq!(s.joints.labelled_count(), 16);
            assert_eq!((s.image.height, s.image.width), (64, 64));
            assert!(r.head_size.unwrap() > 0.0 && r.torso_diag.unwrap() > 0.0);
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn corruption_rate_and_bounds() {
        let mut data: Vec<Sample> = synth_dataset_with(&SynthConfig::for_size(64), 50, 16, 4)
            .unwrap()
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        let moved = corrupt_labels(&mut data, 0.2, 1).unwrap();
        // 800 joints, binomial(800, 0.2): mean 160, sd ~11.3
        assert!((120..=200).contains(&moved), "{moved}");
        for s in &data {
            s.joints.check_bounds(&crate::heatmap::ImageSpec::square(64).unwrap()).unwrap();
        }
        assert!(corrupt_labels(&mut data, 1.5, 1).is_err());
    }

    #[test]
    fn same_seed_same_pixels() {
        let cfg = SynthConfig::for_size(64);
        let a = synth_dataset_with(&cfg, 3, 14, 9).unwrap();
        let b = synth_dataset_with(&cfg, 3, 14, 9).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset_with(&cfg, 3, 14, 10).unwrap();
        assert_ne!(a[0].0.image, c[0].0.image);
    }

    #[test]
    fn codec_round_trip_on_synth_joints() {
        let data = synth_dataset(4, 16, 2).unwrap();
        let spec = ImageSpec::square(256).unwrap();
        for (s, _) in &data {
            let maps = encode_joints(&s.joints, &spec, &GaussianConfig::default()).unwrap();
            let back = decode_heatmaps(&maps, &spec, false).unwrap();
            for k in 0..16 {
                for a in 0..2 {
                    assert!((back.coords[k][a] - s.joints.coords[k][a]).abs() <= 2.0 + 1e-9);
                }
            }
        }
    }

    fn marker_centroid(img: &Image, color: [f32; 3]) -> Option<[f64; 2]> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..img.height {
            for x in 0..img.width {
                let p = img.pixel(x, y);
                if (0..3).all(|c| (p[c] - color[c]).abs() < 0.12) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| [sx / n as f64, sy / n as f64])
    }

    #[test]
    fn markers_follow_augmented_joints() {
        let data = synth_dataset(3, 16, 5).unwrap();
        let draws = [
            AugmentDraw { scale: 0.8, rotation_deg: 25.0, flip: false },
            AugmentDraw { scale: 1.2, rotation_deg: -30.0, flip: true },
        ];
        for (s, _) in &data {
            for d in &draws {
                let out = apply_augment(s, d, &MPII_FLIP_PAIRS).unwrap();
                let perm = crate::datasets::flip_permutation(16, &MPII_FLIP_PAIRS).unwrap();
                // Markers clipped by the border have a biased centroid.
                let edge = SynthConfig::default().marker_radius * d.scale + 1.0;
                let inner = |v: f64| v >= edge && v <= 256.0 - edge;
                for k in 0..16 {
                    let j = out.joints.coords[k];
                    if !out.joints.is_labelled(k) || !inner(j[0]) || !inner(j[1]) {
                        continue;
                    }
                    let src = if d.flip { perm[k] } else { k };
                    let c = marker_centroid(&out.image, joint_color(src, 16)).unwrap();
                    assert!(dist(c, j) <= 1.0, "joint {k}: marker {c:?} vs {j:?}");
                }
            }
        }
    }
}
