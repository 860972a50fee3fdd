//! Joint labels <-> Gaussian confidence maps.
//!
//! Coordinate convention: image pixel `j` covers `[j, j + 1)`, and heatmap
//! pixel `i` has its centre at image coordinate `(i + 0.5) * stride`. A joint
//! at image coordinate `x` therefore sits at heatmap coordinate
//! `x / stride - 0.5`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{FpdError, Result};

/// Input image size and the heatmap resolution the network predicts at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub heatmap_height: usize,
    pub heatmap_width: usize,
    pub stride: usize,
}

impl ImageSpec {
    pub fn new(height: usize, width: usize, stride: usize) -> Result<Self> {
        if height == 0 || width == 0 || stride == 0 {
            return Err(FpdError::Config(format!(
                "image spec dimensions must be positive (h={height}, w={width}, stride={stride})"
            )));
        }
        if height % stride != 0 || width % stride != 0 {
            return Err(FpdError::Config(format!(
                "image {height}x{width} is not divisible by stride {stride}"
            )));
        }
        Ok(Self {
            height,
            width,
            heatmap_height: height / stride,
            heatmap_width: width / stride,
            stride,
        })
    }

    /// Square input with the default stride of 4 (256 -> 64).
    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, size, 4)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.height > 0
            && self.width > 0
            && self.stride > 0
            && self.heatmap_height * self.stride == self.height
            && self.heatmap_width * self.stride == self.width;
        if ok {
            Ok(())
        } else {
            Err(FpdError::Config(format!("inconsistent image spec {self:?}")))
        }
    }

    /// Image coordinate -> continuous heatmap coordinate.
    pub fn to_heatmap(&self, p: [f64; 2]) -> [f64; 2] {
        let s = self.stride as f64;
        [p[0] / s - 0.5, p[1] / s - 0.5]
    }

    /// Continuous heatmap coordinate -> image coordinate.
    pub fn to_image(&self, p: [f64; 2]) -> [f64; 2] {
        let s = self.stride as f64;
        [(p[0] + 0.5) * s, (p[1] + 0.5) * s]
    }
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            heatmap_height: 64,
            heatmap_width: 64,
            stride: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Visible,
    /// Position is annotated but the joint is hidden in the image.
    Occluded,
    Unlabelled,
}

impl Visibility {
    pub fn is_labelled(self) -> bool {
        self != Visibility::Unlabelled
    }
}

/// K joint positions (image pixels) for one person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSet {
    pub coords: Vec<[f64; 2]>,
    pub visibility: Vec<Visibility>,
}

impl JointSet {
    /// Coordinates carried by unlabelled joints.
    pub const SENTINEL: [f64; 2] = [-1.0, -1.0];

    pub fn new(coords: Vec<[f64; 2]>, visibility: Vec<Visibility>) -> Result<Self> {
        if coords.len() != visibility.len() {
            return Err(FpdError::InvalidInput(format!(
                "{} coordinates but {} visibility flags",
                coords.len(),
                visibility.len()
            )));
        }
        let mut js = Self { coords, visibility };
        for k in 0..js.len() {
            if !js.visibility[k].is_labelled() {
                js.coords[k] = Self::SENTINEL;
            }
        }
        Ok(js)
    }

    /// All joints labelled and visible.
    pub fn visible(coords: Vec<[f64; 2]>) -> Self {
        let visibility = vec![Visibility::Visible; coords.len()];
        Self { coords, visibility }
    }

    pub fn unlabelled(k: usize) -> Self {
        Self {
            coords: vec![Self::SENTINEL; k],
            visibility: vec![Visibility::Unlabelled; k],
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn is_labelled(&self, k: usize) -> bool {
        self.visibility[k].is_labelled()
    }

    pub fn set_unlabelled(&mut self, k: usize) {
        self.coords[k] = Self::SENTINEL;
        self.visibility[k] = Visibility::Unlabelled;
    }

    /// Per-joint flags: true where the joint takes part in losses and metrics.
    pub fn mask(&self) -> Vec<bool> {
        self.visibility.iter().map(|v| v.is_labelled()).collect()
    }

    pub fn labelled_count(&self) -> usize {
        self.visibility.iter().filter(|v| v.is_labelled()).count()
    }

    /// Checks every labelled joint lies inside `[0, width) x [0, height)`.
    pub fn check_bounds(&self, spec: &ImageSpec) -> Result<()> {
        for (k, (p, v)) in self.coords.iter().zip(&self.visibility).enumerate() {
            if !v.is_labelled() {
                continue;
            }
            let inside = p[0].is_finite()
                && p[1].is_finite()
                && p[0] >= 0.0
                && p[1] >= 0.0
                && p[0] < spec.width as f64
                && p[1] < spec.height as f64;
            if !inside {
                return Err(FpdError::InvalidInput(format!(
                    "joint {k} at ({}, {}) is outside the {}x{} image",
                    p[0], p[1], spec.width, spec.height
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianConfig {
    /// Standard deviation in heatmap pixels.
    pub sigma: f64,
    /// Carry the `1 / (2 pi sigma^2)` prefactor; otherwise the peak is 1.
    pub normalized_peak: bool,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            normalized_peak: true,
        }
    }
}

impl GaussianConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma > 0.0 && self.sigma.is_finite() {
            Ok(())
        } else {
            Err(FpdError::Config(format!(
                "gaussian sigma must be positive, got {}",
                self.sigma
            )))
        }
    }

    pub fn prefactor(&self) -> f64 {
        if self.normalized_peak {
            1.0 / (2.0 * PI * self.sigma * self.sigma)
        } else {
            1.0
        }
    }

    /// Half-width of the truncated kernel window.
    pub fn radius(&self) -> f64 {
        3.0 * self.sigma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    GroundTruth,
    Teacher,
    Student,
}

/// K confidence maps of `height x width`, stored row-major per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMapStack {
    joints: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    pub source: MapSource,
}

impl ConfidenceMapStack {
    pub fn zeros(joints: usize, height: usize, width: usize, source: MapSource) -> Self {
        Self {
            joints,
            height,
            width,
            data: vec![0.0; joints * height * width],
            source,
        }
    }

    pub fn from_vec(
        joints: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        source: MapSource,
    ) -> Result<Self> {
        if data.len() != joints * height * width {
            return Err(FpdError::Contract(format!(
                "map data has {} values, expected {joints}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            joints,
            height,
            width,
            data,
            source,
        })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(joints, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.joints, self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, k: usize) -> &[f64] {
        let p = self.pixels();
        &self.data[k * p..(k + 1) * p]
    }

    pub fn map_mut(&mut self, k: usize) -> &mut [f64] {
        let p = self.pixels();
        &mut self.data[k * p..(k + 1) * p]
    }

    pub fn get(&self, k: usize, x: usize, y: usize) -> f64 {
        self.data[k * self.pixels() + y * self.width + x]
    }

    pub fn with_source(mut self, source: MapSource) -> Self {
        self.source = source;
        self
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(FpdError::Contract(format!(
                "confidence map shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Renders one truncated Gaussian per labelled joint; unlabelled joints get
/// an all-zero map.
pub fn encode_joints(
    joints: &JointSet,
    spec: &ImageSpec,
    cfg: &GaussianConfig,
) -> Result<ConfidenceMapStack> {
    cfg.validate()?;
    spec.validate()?;
    joints.check_bounds(spec)?;

    let (h, w) = (spec.heatmap_height, spec.heatmap_width);
    let mut out = ConfidenceMapStack::zeros(joints.len(), h, w, MapSource::GroundTruth);
    let pre = cfg.prefactor();
    let two_var = 2.0 * cfg.sigma * cfg.sigma;
    let r = cfg.radius();

    for k in 0..joints.len() {
        if !joints.is_labelled(k) {
            continue;
        }
        let [cx, cy] = spec.to_heatmap(joints.coords[k]);
        let x0 = (cx - r).ceil().max(0.0) as usize;
        let y0 = (cy - r).ceil().max(0.0) as usize;
        let x1 = (cx + r).floor().min(w as f64 - 1.0);
        let y1 = (cy + r).floor().min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        let map = out.map_mut(k);
        for y in y0..=y1 {
            let dy = y as f64 - cy;
            for x in x0..=x1 {
                let dx = x as f64 - cx;
                map[y * w + x] = pre * (-(dx * dx + dy * dy) / two_var).exp();
            }
        }
    }
    Ok(out)
}

/// Arg-max decoding with an optional quarter-pixel shift toward the larger
/// horizontal / vertical neighbour. All-zero maps decode to unlabelled joints.
pub fn decode_heatmaps(
    maps: &ConfidenceMapStack,
    spec: &ImageSpec,
    refine: bool,
) -> Result<JointSet> {
    let (k_total, h, w) = maps.shape();
    if h != spec.heatmap_height || w != spec.heatmap_width {
        return Err(FpdError::Contract(format!(
            "maps are {h}x{w} but the image spec expects {}x{}",
            spec.heatmap_height, spec.heatmap_width
        )));
    }
    let mut out = JointSet::unlabelled(k_total);
    for k in 0..k_total {
        let map = maps.map(k);
        if let Some(i) = map.iter().position(|v| !v.is_finite()) {
            return Err(FpdError::CorruptedPrediction(format!(
                "joint {k} has non-finite value at pixel ({}, {})",
                i % w,
                i / w
            )));
        }
        if map.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut best = 0;
        for (i, &v) in map.iter().enumerate() {
            if v > map[best] {
                best = i;
            }
        }
        let (px, py) = (best % w, best / w);
        let (mut fx, mut fy) = (px as f64, py as f64);
        if refine {
            if px > 0 && px + 1 < w {
                let d = map[best + 1] - map[best - 1];
                fx += 0.25 * sign(d);
            }
            if py > 0 && py + 1 < h {
                let d = map[best + w] - map[best - w];
                fy += 0.25 * sign(d);
            }
        }
        out.coords[k] = spec.to_image([fx, fy]);
        out.visibility[k] = Visibility::Visible;
    }
    Ok(out)
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Rescales every joint map to unit sum.
pub fn l1_normalize(maps: &ConfidenceMapStack) -> Result<ConfidenceMapStack> {
    let mut out = maps.clone();
    for k in 0..maps.joints() {
        let m = out.map_mut(k);
        if m.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(FpdError::Contract(format!(
                "joint {k} map has negative or non-finite values"
            )));
        }
        let s: f64 = m.iter().sum();
        if s <= 0.0 {
            return Err(FpdError::DegenerateMap { joint: k });
        }
        m.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}
