use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{warp_affine, Affine2};
use super::{transform_joints, Sample};
use crate::error::{FpdError, Result};
use crate::heatmap::JointSet;

/// Left/right pairs in MPII joint order (ankles, knees, hips, wrists,
/// elbows, shoulders).
pub const MPII_FLIP_PAIRS: [(usize, usize); 6] = [(0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)];

/// Left/right pairs in LSP joint order.
pub const LSP_FLIP_PAIRS: [(usize, usize); 6] = [(0, 5), (1, 4), (2, 3), (6, 11), (7, 10), (8, 9)];

/// Built-in flip table for a joint count, empty when unknown.
pub fn flip_pairs_for(k: usize) -> Vec<(usize, usize)> {
    match k {
        16 => MPII_FLIP_PAIRS.to_vec(),
        14 => LSP_FLIP_PAIRS.to_vec(),
        _ => Vec::new(),
    }
}

const SCALE_LIMITS: (f64, f64) = (0.75, 1.25);
const ROTATION_LIMITS: (f64, f64) = (-30.0, 30.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub scale_range: (f64, f64),
    /// Degrees.
    pub rotation_range: (f64, f64),
    pub hflip_prob: f64,
    pub flip_pairs: Vec<(usize, usize)>,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self::for_joints(16)
    }
}

impl AugmentParams {
    pub fn for_joints(k: usize) -> Self {
        Self {
            scale_range: SCALE_LIMITS,
            rotation_range: ROTATION_LIMITS,
            hflip_prob: 0.5,
            flip_pairs: flip_pairs_for(k),
        }
    }

    /// Never changes a sample.
    pub fn identity(k: usize) -> Self {
        Self {
            scale_range: (1.0, 1.0),
            rotation_range: (0.0, 0.0),
            hflip_prob: 0.0,
            flip_pairs: flip_pairs_for(k),
        }
    }

    pub fn validate(&self, num_joints: usize) -> Result<()> {
        let within = |r: (f64, f64), lim: (f64, f64)| r.0 <= r.1 && r.0 >= lim.0 && r.1 <= lim.1;
        if !within(self.scale_range, SCALE_LIMITS) {
            return Err(FpdError::Config(format!(
                "scale range {:?} must be ordered and inside {SCALE_LIMITS:?}",
                self.scale_range
            )));
        }
        if !within(self.rotation_range, ROTATION_LIMITS) {
            return Err(FpdError::Config(format!(
                "rotation range {:?} must be ordered and inside {ROTATION_LIMITS:?}",
                self.rotation_range
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(FpdError::Config(format!(
                "flip probability {} outside [0, 1]",
                self.hflip_prob
            )));
        }
        flip_permutation(num_joints, &self.flip_pairs).map(|_| ())
    }
}

/// Index permutation swapping each pair; errors unless it is an involution
/// over `0..k`.
pub fn flip_permutation(k: usize, pairs: &[(usize, usize)]) -> Result<Vec<usize>> {
    let mut perm: Vec<usize> = (0..k).collect();
    let mut seen = vec![false; k];
    for &(a, b) in pairs {
        if a >= k || b >= k || a == b || seen[a] || seen[b] {
            return Err(FpdError::Config(format!(
                "flip pair ({a}, {b}) is not a disjoint swap over {k} joints"
            )));
        }
        seen[a] = true;
        seen[b] = true;
        perm.swap(a, b);
    }
    Ok(perm)
}

/// One sampled geometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub scale: f64,
    pub rotation_deg: f64,
    pub flip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        scale: 1.0,
        rotation_deg: 0.0,
        flip: false,
    };

    pub fn sample<R: Rng>(params: &AugmentParams, rng: &mut R) -> Self {
        let mut uniform = |(lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let scale = uniform(params.scale_range);
        let rotation_deg = uniform(params.rotation_range);
        let flip = params.hflip_prob > 0.0 && rng.random::<f64>() < params.hflip_prob;
        Self {
            scale,
            rotation_deg,
            flip,
        }
    }

    /// Scale, rotate and optionally mirror about the centre of a
    /// `size x size` crop.
    pub fn affine(&self, size: usize) -> Affine2 {
        let c = size as f64 / 2.0;
        let mut t = Affine2::translation(-c, -c)
            .then(&Affine2::scaling(self.scale))
            .then(&Affine2::rotation_deg(self.rotation_deg));
        if self.flip {
            t = t.then(&Affine2::mirror_x());
        }
        t.then(&Affine2::translation(c, c))
    }
}

/// Applies `draw` to image and joints; a flip also swaps left/right joint
/// indices. Joints pushed out of frame become unlabelled.
pub fn apply_augment(sample: &Sample, draw: &AugmentDraw, flip_pairs: &[(usize, usize)]) -> Result<Sample> {
    let size = sample.size();
    let t = draw.affine(size);
    let image = warp_affine(&sample.image, &t, size, size)?;
    let moved = transform_joints(&sample.joints, &t, size);
    let joints = if draw.flip {
        let perm = flip_permutation(moved.len(), flip_pairs)?;
        JointSet {
            coords: perm.iter().map(|&j| moved.coords[j]).collect(),
            visibility: perm.iter().map(|&j| moved.visibility[j]).collect(),
        }
    } else {
        moved
    };
    Ok(Sample {
        image,
        joints,
        meta: sample.meta.clone(),
        transform: sample.transform.then(&t),
    })
}

/// Draws an augmentation from `params` with a seeded generator and applies it.
pub fn augment(sample: &Sample, params: &AugmentParams, rng_seed: u64) -> Result<Sample> {
    params.validate(sample.joints.len())?;
    let draw = AugmentDraw::sample(params, &mut ChaCha8Rng::seed_from_u64(rng_seed));
    apply_augment(sample, &draw, &params.flip_pairs)
}
