//! Pose distillation toolkit.
//!
//! Builds stacked-hourglass teacher and student pose networks, trains the
//! student against a blend of ground-truth confidence maps and frozen teacher
//! predictions, and scores the result with PCK/PCKh/AUC and an analytic cost
//! model (parameters and FLOPs).
//!
//! Data-parallel loops go through [`exec::Exec`]. With the `parallel` feature
//! (on by default) they run on rayon; without it every path is sequential.

pub mod datasets;
pub mod error;
pub mod exec;
pub mod heatmap;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod training;

pub use error::{FpdError, Result};
pub use exec::Exec;
pub use heatmap::{
    decode_heatmaps, encode_joints, l1_normalize, ConfidenceMapStack, GaussianConfig, ImageSpec,
    JointSet, MapSource, Visibility,
};
pub use losses::{
    ce_distill_loss, distill_loss, fpd_loss, mse_loss, Divergence, LossConfig, LossReport,
};
pub use metrics::{auc, evaluate, pck, EvalResult, PckCurve, Protocol};
pub use network::{count_params, estimate_flops, HourglassConfig, ModelSpec, PoseNetwork};
