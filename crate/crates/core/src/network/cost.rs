//! Closed-form parameter and FLOP counts.
//!
//! The counts walk an architecture description built from the config alone;
//! nothing is allocated. `PoseNetwork::param_count` enumerates the real
//! parameter containers and must agree with [`count_params`].

use serde::{Deserialize, Serialize};

use super::HourglassConfig;
use crate::error::Result;
use crate::heatmap::ImageSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvOp {
    in_c: u64,
    out_c: u64,
    kernel: u64,
    /// Output spatial size (square).
    out_size: u64,
}

#[derive(Default)]
struct Plan {
    convs: Vec<ConvOp>,
    bn_channels: Vec<u64>,
}

impl Plan {
    fn conv(&mut self, in_c: u64, out_c: u64, kernel: u64, out_size: u64) {
        self.convs.push(ConvOp {
            in_c,
            out_c,
            kernel,
            out_size,
        });
    }

    fn residual(&mut self, in_c: u64, out_c: u64, size: u64) {
        let mid = out_c / 2;
        self.bn_channels.extend([in_c, mid, mid]);
        self.conv(in_c, mid, 1, size);
        self.conv(mid, mid, 3, size);
        self.conv(mid, out_c, 1, size);
        if in_c != out_c {
            self.conv(in_c, out_c, 1, size);
        }
    }

    fn site(&mut self, in_c: u64, out_c: u64, modules: u64, size: u64) {
        self.residual(in_c, out_c, size);
        for _ in 1..modules {
            self.residual(out_c, out_c, size);
        }
    }

    fn hourglass(&mut self, depth: u64, f: u64, modules: u64, size: u64) {
        self.site(f, f, modules, size); // skip branch
        let low = size / 2;
        self.site(f, f, modules, low);
        if depth > 1 {
            self.hourglass(depth - 1, f, modules, low);
        } else {
            self.site(f, f, modules, low);
        }
        self.site(f, f, modules, low);
    }

    fn build(cfg: &HourglassConfig, input: u64) -> Self {
        let mut p = Plan::default();
        let f = cfg.channels as u64;
        let m = cfg.modules_per_site as u64;
        let k = cfg.num_joints as u64;
        let half = input.div_ceil(2);
        let quarter = half / 2;
        p.conv(3, f / 4, 7, half);
        p.bn_channels.push(f / 4);
        p.residual(f / 4, f / 2, half);
        p.residual(f / 2, f / 2, quarter);
        p.residual(f / 2, f, quarter);
        for s in 0..cfg.num_stages {
            p.hourglass(cfg.depth_per_hourglass as u64, f, m, quarter);
            p.site(f, f, m, quarter);
            p.conv(f, f, 1, quarter);
            p.bn_channels.push(f);
            p.conv(f, k, 1, quarter);
            if s + 1 < cfg.num_stages {
                p.conv(f, f, 1, quarter);
                p.conv(k, f, 1, quarter);
            }
        }
        p
    }
}

/// Exact learnable-parameter count (conv weights + biases, BN scale + shift).
pub fn count_params(config: &HourglassConfig) -> u64 {
    let plan = Plan::build(config, config.input_size as u64);
    let convs: u64 = plan
        .convs
        .iter()
        .map(|c| c.in_c * c.kernel * c.kernel * c.out_c + c.out_c)
        .sum();
    let bns: u64 = plan.bn_channels.iter().map(|c| 2 * c).sum();
    convs + bns
}

/// Forward-pass FLOPs for one image of `spec`: 2 x multiply-accumulates over
/// every convolution at its true output resolution.
pub fn estimate_flops(config: &HourglassConfig, spec: &ImageSpec) -> Result<u64> {
    config.validate()?;
    spec.validate()?;
    let plan = Plan::build(config, spec.height.max(spec.width) as u64);
    // Convolutions of a non-square input scale with the area ratio.
    let side = spec.height.max(spec.width) as f64;
    let area_ratio = (spec.height * spec.width) as f64 / (side * side);
    let macs: u64 = plan
        .convs
        .iter()
        .map(|c| c.in_c * c.kernel * c.kernel * c.out_c * c.out_size * c.out_size)
        .sum();
    Ok((2.0 * macs as f64 * area_ratio).round() as u64)
}

/// Cost summary of one architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: HourglassConfig,
    pub param_count: u64,
    pub flops_per_forward: u64,
}

impl ModelSpec {
    pub fn params_millions(&self) -> f64 {
        self.param_count as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.flops_per_forward as f64 / 1e9
    }
}

/// Costs at the config's own square input size.
pub fn model_spec(config: &HourglassConfig) -> Result<ModelSpec> {
    config.validate()?;
    let spec = ImageSpec::square(config.input_size)?;
    Ok(ModelSpec {
        config: *config,
        param_count: count_params(config),
        flops_per_forward: estimate_flops(config, &spec)?,
    })
}
