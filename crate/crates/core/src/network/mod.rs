//! Stacked-hourglass pose networks and their analytic cost model.

mod cost;
mod hourglass;
pub mod layers;
pub mod tensor;

use serde::{Deserialize, Serialize};

use crate::error::{FpdError, Result};
use crate::heatmap::ImageSpec;

pub use cost::{count_params, estimate_flops, model_spec, ModelSpec};
pub use hourglass::PoseNetwork;
pub use tensor::Tensor;

/// Architecture of a stacked-hourglass network.
///
/// Every hourglass has `depth_per_hourglass` pooling levels; each level holds
/// three residual sites (skip branch, after pooling, before upsampling) and
/// the innermost level has one more. A site is `modules_per_site` residual
/// blocks. One extra site follows each hourglass before the heatmap head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HourglassConfig {
    pub num_stages: usize,
    pub channels: usize,
    #[serde(default = "default_modules")]
    pub modules_per_site: usize,
    pub num_joints: usize,
    pub input_size: usize,
    pub depth_per_hourglass: usize,
}

fn default_modules() -> usize {
    1
}

impl HourglassConfig {
    /// The original 8-stage, 256-channel hourglass.
    pub fn teacher() -> Self {
        Self {
            num_stages: 8,
            channels: 256,
            modules_per_site: 1,
            num_joints: 16,
            input_size: 256,
            depth_per_hourglass: 4,
        }
    }

    /// The compact 4-stage, 128-channel student.
    pub fn student() -> Self {
        Self {
            num_stages: 4,
            channels: 128,
            ..Self::teacher()
        }
    }

    pub fn with_stages(mut self, num_stages: usize) -> Self {
        self.num_stages = num_stages;
        self
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn with_joints(mut self, num_joints: usize) -> Self {
        self.num_joints = num_joints;
        self
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth_per_hourglass = depth;
        self
    }

    pub fn heatmap_size(&self) -> usize {
        self.input_size / 4
    }

    pub fn image_spec(&self) -> ImageSpec {
        ImageSpec::new(self.input_size, self.input_size, 4).expect("validated input size")
    }

    /// Residual blocks per stage, including the post-hourglass site.
    pub fn blocks_per_stage(&self) -> usize {
        (3 * self.depth_per_hourglass + 2) * self.modules_per_site
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FpdError::Config(m));
        if self.num_stages < 1 {
            return bad("num_stages must be >= 1".into());
        }
        if self.channels < 8 || self.channels % 4 != 0 {
            return bad(format!(
                "channels must be >= 8 and a multiple of 4, got {}",
                self.channels
            ));
        }
        if self.num_joints < 1 {
            return bad("num_joints must be >= 1".into());
        }
        if self.modules_per_site < 1 {
            return bad("modules_per_site must be >= 1".into());
        }
        if self.depth_per_hourglass < 1 {
            return bad("depth_per_hourglass must be >= 1".into());
        }
        let unit = 4usize << self.depth_per_hourglass;
        if self.input_size == 0 || self.input_size % unit != 0 {
            return bad(format!(
                "input_size {} must be a positive multiple of {unit} for depth {}",
                self.input_size, self.depth_per_hourglass
            ));
        }
        Ok(())
    }
}
