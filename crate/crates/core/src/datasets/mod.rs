//! Annotation ingestion, person-centric crops, keypoint-aware augmentation
//! and a procedural stick-figure dataset.

mod annotations;
mod augment;
mod image;
mod synth;

use serde::{Deserialize, Serialize};

pub use annotations::{
    load_annotations, parse_lsp_text, parse_mpii_json, split_validation, torso_pair, torso_size,
    AnnotationFormat, AnnotationRecord, HEAD_BOX_FACTOR, LSP_JOINTS, LSP_TORSO_PAIR, MPII_JOINTS,
    MPII_TORSO_PAIR, MPII_VALIDATION_SIZE,
};
pub use augment::{
    apply_augment, augment, flip_pairs_for, flip_permutation, AugmentDraw, AugmentParams,
    LSP_FLIP_PAIRS, MPII_FLIP_PAIRS,
};
pub use image::{warp_affine, Affine2, Image};
pub use synth::{corrupt_labels, joint_color, synth_dataset, synth_dataset_with, SynthConfig};

use crate::error::{FpdError, Result};
use crate::heatmap::JointSet;

/// Side of the network input crop.
pub const CROP_SIZE: usize = 256;

/// Crop side length in source pixels per unit of annotation scale.
pub const SCALE_UNIT_PX: f64 = 200.0;

/// Network-ready person crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Joints in crop coordinates.
    pub joints: JointSet,
    pub meta: AnnotationRecord,
    /// Source image -> crop coordinates.
    pub transform: Affine2,
}

impl Sample {
    /// The annotation expressed in crop coordinates, with normalizers
    /// rescaled by the crop's zoom. Metrics on crops use this record.
    pub fn eval_record(&self) -> AnnotationRecord {
        let f = self.transform.scale_factor();
        AnnotationRecord {
            image_path: self.meta.image_path.clone(),
            center: self.transform.apply(self.meta.center),
            scale: self.meta.scale * f,
            joints: self.joints.clone(),
            head_size: self.meta.head_size.map(|h| h * f),
            torso_diag: self.meta.torso_diag.map(|t| t * f),
        }
    }

    pub fn size(&self) -> usize {
        self.image.height
    }
}

/// Maps every labelled joint through `t`; joints landing outside
/// `[0, size)^2` become unlabelled.
pub fn transform_joints(joints: &JointSet, t: &Affine2, size: usize) -> JointSet {
    let mut out = joints.clone();
    let lim = size as f64;
    for k in 0..joints.len() {
        if !joints.is_labelled(k) {
            continue;
        }
        let p = t.apply(joints.coords[k]);
        if p[0] >= 0.0 && p[1] >= 0.0 && p[0] < lim && p[1] < lim {
            out.coords[k] = p;
        } else {
            out.set_unlabelled(k);
        }
    }
    out
}

/// Square crop of side `200 * scale` centred on the person, resized to
/// `out_size x out_size`.
pub fn crop_and_resize(record: &AnnotationRecord, image: &Image, out_size: usize) -> Result<Sample> {
    record.validate()?;
    if out_size == 0 {
        return Err(FpdError::Config("crop size must be positive".into()));
    }
    let side = SCALE_UNIT_PX * record.scale;
    let [cx, cy] = record.center;
    let (x0, y0) = (cx - side / 2.0, cy - side / 2.0);
    let (w, h) = (image.width as f64, image.height as f64);
    if !(x0 < w && y0 < h && x0 + side > 0.0 && y0 + side > 0.0) {
        return Err(FpdError::DegenerateCrop(format!(
            "{}: crop box [{x0:.1}, {:.1}] x [{y0:.1}, {:.1}] misses the {}x{} image",
            record.image_path,
            x0 + side,
            y0 + side,
            image.width,
            image.height
        )));
    }
    let t = Affine2::translation(-x0, -y0).then(&Affine2::scaling(out_size as f64 / side));
    Ok(Sample {
        image: warp_affine(image, &t, out_size, out_size)?,
        joints: transform_joints(&record.joints, &t, out_size),
        meta: record.clone(),
        transform: t,
    })
}

/// Where a dataset's images come from and how they are cropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub annotations: std::path::PathBuf,
    pub format: AnnotationFormat,
    /// Directory image paths are relative to.
    pub image_root: std::path::PathBuf,
}

/// Loads every record's image and crops it.
pub fn load_samples(source: &DataSource, out_size: usize) -> Result<Vec<Sample>> {
    let records = load_annotations(&source.annotations, source.format)?;
    crop_records(&records, &source.image_root, out_size)
}

/// Crops already-parsed records whose image paths are relative to `image_root`.
pub fn crop_records(
    records: &[AnnotationRecord],
    image_root: &std::path::Path,
    out_size: usize,
) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            let img = Image::load(&image_root.join(&r.image_path))?;
            crop_and_resize(r, &img, out_size)
        })
        .collect()
}
