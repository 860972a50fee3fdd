//! Annotation files.
//!
//! `mpii_json`: a JSON array, one object per person instance:
//!
//! ```json
//! [{"image": "000001163.jpg", "center": [594.0, 257.0], "scale": 3.02,
//!   "joints": [[620.0, 394.0, 1], [616.0, 269.0, 1], ...],
//!   "head_box": [627.0, 100.0, 706.0, 198.0]}]
//! ```
//!
//! Each joint is `[x, y, v]` with `v = 1` visible, `v = 0` occluded; a
//! negative coordinate or `v < 0` marks the joint unlabelled. `head_size`
//! (pixels) may be given instead of `head_box`.
//!
//! `lsp_mat_export`: whitespace-separated text, one record per line:
//! `image x0 y0 v0 ... x13 y13 v13`. Lines starting with `#` are comments.
//! Centre and scale come from the bounding box of the labelled joints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FpdError, Result};
use crate::heatmap::{JointSet, Visibility};

pub const MPII_JOINTS: usize = 16;
pub const LSP_JOINTS: usize = 14;

/// Validation split size carved out of the MPII training set.
pub const MPII_VALIDATION_SIZE: usize = 3000;

/// `(left shoulder, right hip)` used for the torso normalizer.
pub const MPII_TORSO_PAIR: (usize, usize) = (13, 2);
pub const LSP_TORSO_PAIR: (usize, usize) = (9, 2);

/// Fraction of the head box diagonal used as the PCKh normalizer.
pub const HEAD_BOX_FACTOR: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    MpiiJson,
    LspMatExport,
}

impl std::str::FromStr for AnnotationFormat {
    type Err = FpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpii_json" => Ok(Self::MpiiJson),
            "lsp_mat_export" => Ok(Self::LspMatExport),
            other => Err(FpdError::Config(format!(
                "unknown annotation format {other:?} (expected mpii_json or lsp_mat_export)"
            ))),
        }
    }
}

/// One annotated person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_path: String,
    pub center: [f64; 2],
    /// Person height / 200 px.
    pub scale: f64,
    pub joints: JointSet,
    pub head_size: Option<f64>,
    pub torso_diag: Option<f64>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(FpdError::Data(format!(
                "{}: scale must be positive, got {}",
                self.image_path, self.scale
            )));
        }
        let k = self.joints.len();
        if k != MPII_JOINTS && k != LSP_JOINTS {
            return Err(FpdError::Data(format!(
                "{}: expected 14 or 16 joints, got {k}",
                self.image_path
            )));
        }
        Ok(())
    }
}

/// Distance between two labelled joints, if both are labelled.
pub fn torso_size(joints: &JointSet, pair: (usize, usize)) -> Option<f64> {
    let (a, b) = pair;
    if a >= joints.len() || b >= joints.len() || !joints.is_labelled(a) || !joints.is_labelled(b) {
        return None;
    }
    let (p, q) = (joints.coords[a], joints.coords[b]);
    Some(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
}

pub fn torso_pair(k: usize) -> Option<(usize, usize)> {
    match k {
        MPII_JOINTS => Some(MPII_TORSO_PAIR),
        LSP_JOINTS => Some(LSP_TORSO_PAIR),
        _ => None,
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MpiiEntry {
    image: String,
    center: [f64; 2],
    scale: f64,
    joints: Vec<[f64; 3]>,
    #[serde(default)]
    head_box: Option<[f64; 4]>,
    #[serde(default)]
    head_size: Option<f64>,
}

fn joints_from_triples(triples: &[[f64; 3]]) -> JointSet {
    let mut coords = Vec::with_capacity(triples.len());
    let mut vis = Vec::with_capacity(triples.len());
    for &[x, y, v] in triples {
        coords.push([x, y]);
        vis.push(if x < 0.0 || y < 0.0 || v < 0.0 {
            Visibility::Unlabelled
        } else if v >= 0.5 {
            Visibility::Visible
        } else {
            Visibility::Occluded
        });
    }
    JointSet::new(coords, vis).expect("lengths match by construction")
}

pub fn load_annotations(path: &Path, format: AnnotationFormat) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| FpdError::io(path, e))?;
    let name = path.display().to_string();
    match format {
        AnnotationFormat::MpiiJson => parse_mpii_json(&text, &name),
        AnnotationFormat::LspMatExport => parse_lsp_text(&text, &name),
    }
}

pub fn parse_mpii_json(text: &str, source_name: &str) -> Result<Vec<AnnotationRecord>> {
    let entries: Vec<MpiiEntry> = serde_json::from_str(text).map_err(|e| FpdError::Parse {
        source_name: source_name.to_string(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.into_iter().enumerate() {
        let fail = |message: String| FpdError::Parse {
            source_name: source_name.to_string(),
            location: format!("record {i}"),
            message,
        };
        let joints = joints_from_triples(&e.joints);
        let head_size = match (e.head_size, e.head_box) {
            (Some(h), _) => Some(h),
            (None, Some([x1, y1, x2, y2])) => {
                Some(HEAD_BOX_FACTOR * ((x2 - x1).powi(2) + (y2 - y1).powi(2)).sqrt())
            }
            (None, None) => None,
        };
        if let Some(h) = head_size {
            if !(h > 0.0) {
                return Err(fail(format!("head size must be positive, got {h}")));
            }
        }
        let torso_diag = torso_pair(joints.len()).and_then(|p| torso_size(&joints, p));
        let rec = AnnotationRecord {
            image_path: e.image,
            center: e.center,
            scale: e.scale,
            joints,
            head_size,
            torso_diag,
        };
        rec.validate().map_err(|err| fail(err.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_lsp_text(text: &str, source_name: &str) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |message: String| FpdError::Parse {
            source_name: source_name.to_string(),
            location: format!("line {}", lineno + 1),
            message,
        };
        let mut fields = line.split_whitespace();
        let image = fields.next().expect("non-empty line").to_string();
        let nums = fields
            .map(|f| f.parse::<f64>().map_err(|_| fail(format!("not a number: {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if nums.len() != 3 * LSP_JOINTS {
            return Err(fail(format!(
                "expected {} values after the image path, got {}",
                3 * LSP_JOINTS,
                nums.len()
            )));
        }
        let triples: Vec<[f64; 3]> = nums.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let joints = joints_from_triples(&triples);
        let labelled: Vec<[f64; 2]> = (0..joints.len())
            .filter(|&k| joints.is_labelled(k))
            .map(|k| joints.coords[k])
            .collect();
        if labelled.is_empty() {
            return Err(fail("record has no labelled joints".into()));
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &labelled {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let side = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
        let torso_diag = torso_size(&joints, LSP_TORSO_PAIR);
        out.push(AnnotationRecord {
            image_path: image,
            center: [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0],
            scale: 1.25 * side / 200.0,
            joints,
            head_size: None,
            torso_diag,
        });
    }
    Ok(out)
}

/// Seeded hold-out split: returns `(train, validation)` with
/// `min(n_val, len)` validation records.
pub fn split_validation(
    records: &[AnnotationRecord],
    n_val: usize,
    seed: u64,
) -> (Vec<AnnotationRecord>, Vec<AnnotationRecord>) {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = n_val.min(records.len());
    let mut is_val = vec![false; records.len()];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (r, v) in records.iter().zip(is_val) {
        if v {
            val.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mpii_line(image: &str, x0: f64) -> String {
        let joints: Vec<String> = (0..16)
            .map(|k| {
                if k == 3 {
                    "[-1, -1, 0]".to_string()
                } else {
                    format!("[{}, {}, 1]", x0 + k as f64, 50.0 + k as f64)
                }
            })
            .collect();
        format!(
            r#"{{"image": "{image}", "center": [100, 120], "scale": 1.5, "joints": [{}], "head_box": [0, 0, 30, 40]}}"#,
            joints.join(", ")
        )
    }

    #[test]
    fn two_person_file_gives_two_records() {
        let text = format!("[{}, {}]", mpii_line("a.jpg", 10.0), mpii_line("a.jpg", 60.0));
        let recs = parse_mpii_json(&text, "test").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].joints.len(), 16);
        assert!((recs[0].head_size.unwrap() - 30.0).abs() < 1e-12);
        assert!(!recs[0].joints.is_labelled(3));
        assert_eq!(recs[0].joints.coords[3], JointSet::SENTINEL);
        assert_eq!(recs[1].joints.coords[0], [60.0, 50.0]);
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = parse_mpii_json("[{\"image\": \"a\",\n \"center\": [1, }]", "bad.json").unwrap_err();
        match err {
            FpdError::Parse { location, source_name, .. } => {
                assert_eq!(source_name, "bad.json");
                assert!(location.starts_with("line 2"), "{location}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_joint_count_names_record() {
        let text = r#"[{"image": "a", "center": [1, 1], "scale": 1, "joints": [[1, 1, 1]]}]"#;
        let err = parse_mpii_json(text, "x").unwrap_err();
        assert!(matches!(err, FpdError::Parse { ref location, .. } if location == "record 0"));
    }

    #[test]
    fn lsp_negative_coordinate_is_unlabelled() {
        let mut vals: Vec<String> = (0..14)
            .map(|k| format!("{} {} 1", 10.0 + 10.0 * k as f64, 20.0 + 5.0 * k as f64))
            .collect();
        vals[5] = "-1 -1 0".into();
        let text = format!("# comment\nim0001.jpg {}\n", vals.join(" "));
        let recs = parse_lsp_text(&text, "lsp").unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert!(!r.joints.is_labelled(5));
        assert!(r.head_size.is_none());
        let (a, b) = (r.joints.coords[9], r.joints.coords[2]);
        let expect = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!((r.torso_diag.unwrap() - expect).abs() < 1e-12);
        // bbox: x 10..140 (joint 5 dropped), y 20..85
        assert_eq!(r.center, [75.0, 52.5]);
        assert!((r.scale - 1.25 * 130.0 / 200.0).abs() < 1e-12);
    }

    #[test]
    fn lsp_short_line_reports_line_number() {
        let err = parse_lsp_text("\n\nim.jpg 1 2 3\n", "lsp.txt").unwrap_err();
        assert!(matches!(err, FpdError::Parse { ref location, .. } if location == "line 3"));
    }

    #[test]
    fn unknown_format_is_config_error() {
        assert!(matches!(
            "coco".parse::<AnnotationFormat>(),
            Err(FpdError::Config(_))
        ));
    }

    #[test]
    fn validation_split_holds_out_requested_count() {
        let text = format!("[{}]", vec![mpii_line("a.jpg", 0.0); 3500].join(","));
        let recs = parse_mpii_json(&text, "m").unwrap();
        let (train, val) = split_validation(&recs, MPII_VALIDATION_SIZE, 7);
        assert_eq!(val.len(), 3000);
        assert_eq!(train.len(), 500);
        let (t2, v2) = split_validation(&recs, MPII_VALIDATION_SIZE, 7);
        assert_eq!((train, val), (t2, v2));
    }
}
