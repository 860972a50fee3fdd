//! Layered run configuration: built-in presets, then a TOML file, then
//! `FPD_*` environment variables, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fpd_core::datasets::DataSource;
use fpd_core::training::TrainConfig;
use fpd_core::{HourglassConfig, Protocol};
use serde::{Deserialize, Serialize};

/// Name of the fully-resolved configuration written next to every output.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    /// Procedural stick figures rendered at the network input size.
    Synthetic {
        #[serde(default = "default_train_samples")]
        train_samples: usize,
        #[serde(default = "default_val_samples")]
        val_samples: usize,
        /// Fraction of training joints moved to random positions.
        #[serde(default)]
        corrupt_fraction: f64,
    },
    /// Annotated photographs.
    Annotations {
        train: DataSource,
        /// Held-out set; when absent `val_split` records are taken from `train`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        val: Option<DataSource>,
        #[serde(default)]
        val_split: usize,
    },
}

fn default_train_samples() -> usize {
    64
}

fn default_val_samples() -> usize {
    16
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            train_samples: default_train_samples(),
            val_samples: default_val_samples(),
            corrupt_fraction: 0.0,
        }
    }
}

/// Architecture fields a config file may pin; the rest come from the preset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkOverrides {
    pub num_stages: Option<usize>,
    pub channels: Option<usize>,
    pub modules_per_site: Option<usize>,
    pub num_joints: Option<usize>,
    pub input_size: Option<usize>,
    pub depth_per_hourglass: Option<usize>,
}

impl NetworkOverrides {
    pub fn apply(&self, mut c: HourglassConfig) -> HourglassConfig {
        c.num_stages = self.num_stages.unwrap_or(c.num_stages);
        c.channels = self.channels.unwrap_or(c.channels);
        c.modules_per_site = self.modules_per_site.unwrap_or(c.modules_per_site);
        c.num_joints = self.num_joints.unwrap_or(c.num_joints);
        c.input_size = self.input_size.unwrap_or(c.input_size);
        c.depth_per_hourglass = self.depth_per_hourglass.unwrap_or(c.depth_per_hourglass);
        c
    }
}

/// Contents of a `--config` file. A resolved config is also accepted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Ignored on input; recorded in resolved configs.
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub protocol: Option<Protocol>,
    pub teacher_ckpt: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub alpha_sweep: Option<Vec<f64>>,
    pub arch_grid: Option<Vec<(usize, usize)>>,
    pub data: Option<DataConfig>,
    pub network: NetworkOverrides,
    /// Merged key by key over the preset for the run's joint count.
    pub train: Option<toml::Table>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Values given on the command line or through the environment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub stages: Option<usize>,
    pub channels: Option<usize>,
    pub teacher_ckpt: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub protocol: Option<Protocol>,
    pub out_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub alpha_sweep: Option<Vec<f64>>,
    pub arch_grid: Option<Vec<(usize, usize)>>,
}

/// Everything a command runs with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub protocol: Protocol,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_ckpt: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub alpha_sweep: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch_grid: Option<Vec<(usize, usize)>>,
    pub data: DataConfig,
    pub network: HourglassConfig,
    pub train: TrainConfig,
}

/// Merges the layers over `preset`; later layers win.
pub fn resolve(command: &str, preset: HourglassConfig, file: FileConfig, over: &Overrides) -> Result<RunConfig> {
    let mut network = file.network.apply(preset);
    network.num_stages = over.stages.unwrap_or(network.num_stages);
    network.channels = over.channels.unwrap_or(network.channels);

    let preset_train = if network.num_joints == 14 {
        TrainConfig::lsp()
    } else {
        TrainConfig::mpii()
    };
    let mut train = match file.train {
        Some(t) => merge_train(preset_train, t)?,
        None => preset_train,
    };
    let seed = over.seed.or(file.seed).unwrap_or(train.seed);
    train.seed = seed;
    if let Some(a) = over.alpha {
        train.loss.alpha = a;
    }
    if let Some(e) = over.epochs {
        train.epochs = e;
    }
    if over.max_steps.is_some() {
        train.max_steps = over.max_steps;
    }
    let protocol = over.protocol.or(file.protocol).unwrap_or(train.val_protocol);
    train.val_protocol = protocol;

    let alpha_sweep = over.alpha_sweep.clone().or(file.alpha_sweep).unwrap_or_default();
    if let Some(bad) = alpha_sweep.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        bail!("alpha_sweep value {bad} outside [0, 1]");
    }

    Ok(RunConfig {
        command: command.to_string(),
        seed,
        out_dir: over.out_dir.clone().or(file.out_dir).unwrap_or_else(|| PathBuf::from("runs")),
        protocol,
        teacher_ckpt: over.teacher_ckpt.clone().or(file.teacher_ckpt),
        checkpoint: over.checkpoint.clone().or(file.checkpoint),
        alpha_sweep,
        arch_grid: over.arch_grid.clone().or(file.arch_grid),
        data: file.data.unwrap_or_default(),
        network,
        train,
    })
}

fn merge_train(preset: TrainConfig, overlay: toml::Table) -> Result<TrainConfig> {
    let mut base = toml::Table::try_from(&preset).context("serializing train preset")?;
    merge_tables(&mut base, overlay);
    base.try_into().context("invalid [train] section")
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Creates the output directory and writes the resolved config into it.
    pub fn persist(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating output directory {}", self.out_dir.display()))?;
        let path = self.out_dir.join(RESOLVED_CONFIG);
        let text = toml::to_string(self).context("serializing resolved config")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Checks that every dataset file named by the config exists.
    pub fn check_data_paths(&self) -> Result<()> {
        let DataConfig::Annotations { train, val, .. } = &self.data else {
            return Ok(());
        };
        let mut sources = vec![("data.train", train)];
        if let Some(v) = val {
            sources.push(("data.val", v));
        }
        for (field, src) in sources {
            if !src.annotations.is_file() {
                bail!("{field}.annotations: file {} does not exist", src.annotations.display());
            }
            if !src.image_root.is_dir() {
                bail!("{field}.image_root: directory {} does not exist", src.image_root.display());
            }
        }
        Ok(())
    }
}

/// Parses `SxC` (e.g. `4x128`).
pub fn parse_arch(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .trim()
        .split_once(['x', 'X'])
        .with_context(|| format!("architecture `{s}` is not of the form STAGESxCHANNELS"))?;
    let stages = a.trim().parse().with_context(|| format!("bad stage count in `{s}`"))?;
    let channels = b.trim().parse().with_context(|| format!("bad channel count in `{s}`"))?;
    Ok((stages, channels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_preset() {
        let file: FileConfig = toml::from_str(
            r#"
            seed = 5
            [network]
            num_stages = 2
            channels = 64
            [train]
            epochs = 3
            [train.loss]
            alpha = 0.25
            "#,
        )
        .unwrap();
        let over = Overrides {
            channels: Some(32),
            alpha: Some(0.75),
            ..Default::default()
        };
        let r = resolve("distill", HourglassConfig::student(), file, &over).unwrap();
        assert_eq!(r.network.num_stages, 2);
        assert_eq!(r.network.channels, 32);
        assert_eq!(r.seed, 5);
        assert_eq!(r.train.seed, 5);
        assert_eq!(r.train.epochs, 3);
        assert_eq!(r.train.loss.alpha, 0.75);
        assert_eq!(r.train.optimizer.learning_rate, 2.5e-4);
    }

    #[test]
    fn resolved_config_reloads_to_itself() {
        let over = Overrides {
            seed: Some(9),
            stages: Some(1),
            alpha_sweep: Some(vec![0.0, 0.5]),
            ..Default::default()
        };
        let r = resolve("distill", HourglassConfig::student(), FileConfig::default(), &over).unwrap();
        let text = toml::to_string(&r).unwrap();
        let back: FileConfig = toml::from_str(&text).unwrap();
        let again = resolve("distill", HourglassConfig::teacher(), back, &Overrides::default()).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn lsp_joints_default_to_torso_protocol() {
        let file: FileConfig = toml::from_str("[network]\nnum_joints = 14").unwrap();
        let r = resolve("train-teacher", HourglassConfig::teacher(), file, &Overrides::default()).unwrap();
        assert_eq!(r.protocol, Protocol::PckPointTwo);
        assert_eq!(r.train.epochs, 70);
    }

    #[test]
    fn partial_train_section_keeps_lsp_flips() {
        let file: FileConfig =
            toml::from_str("[network]\nnum_joints = 14\n[train.optimizer]\nlearning_rate = 1e-3").unwrap();
        let r = resolve("train-teacher", HourglassConfig::teacher(), file, &Overrides::default()).unwrap();
        assert_eq!(r.train.optimizer.learning_rate, 1e-3);
        assert_eq!(r.train.optimizer.alpha, 0.99);
        r.train.augment.unwrap().validate(14).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("sede = 3").is_err());
    }

    #[test]
    fn arch_strings() {
        assert_eq!(parse_arch("4x128").unwrap(), (4, 128));
        assert_eq!(parse_arch(" 8X256 ").unwrap(), (8, 256));
        assert!(parse_arch("4-128").is_err());
    }
}
