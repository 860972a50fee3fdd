//! Versioned, self-describing checkpoint files.
//!
//! Layout: `FPDCKPT\0`, `u32` LE format version, `u64` LE header length,
//! a JSON header (configs, progress, RNG state, tensor manifest), every
//! tensor as contiguous `f32` LE in manifest order, then a SHA-256 of all
//! preceding bytes. Files are written to a temporary sibling and renamed.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{FpdError, Result};
use crate::network::layers::{Module, StateMut, StateRef};
use crate::network::{HourglassConfig, PoseNetwork};

const MAGIC: &[u8; 8] = b"FPDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    network: HourglassConfig,
    train: TrainConfig,
    epoch: usize,
    step: usize,
    best_metric: Option<f64>,
    rng_state: RngState,
    teacher_digest: Option<String>,
    manifest: Vec<ManifestEntry>,
}

/// Weights plus everything needed to rebuild and audit them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: HourglassConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: usize,
    pub best_metric: Option<f64>,
    pub rng_state: RngState,
    /// Weight digest of the frozen teacher a student was distilled from.
    pub teacher_digest: Option<String>,
    /// Parameters and buffers in network visit order.
    pub tensors: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn capture(net: &PoseNetwork, train: &TrainConfig, rng: &ChaCha8Rng) -> Self {
        let mut tensors = Vec::new();
        net.visit("", &mut |name, s| {
            let data = match s {
                StateRef::Param(p) => p.value.clone(),
                StateRef::Buffer(b) => b.to_vec(),
            };
            tensors.push((name.to_string(), data));
        });
        Self {
            network: *net.config(),
            train: train.clone(),
            epoch: 0,
            step: 0,
            best_metric: None,
            rng_state: RngState::capture(rng),
            teacher_digest: None,
            tensors,
        }
    }

    /// Errors unless the checkpoint was made for exactly `expected`.
    pub fn expect_config(&self, expected: &HourglassConfig) -> Result<()> {
        if &self.network != expected {
            return Err(FpdError::Contract(format!(
                "checkpoint holds {:?}, expected {:?}",
                self.network, expected
            )));
        }
        Ok(())
    }

    /// Copies the stored tensors into `net`, which must share the config.
    pub fn load_into(&self, net: &mut PoseNetwork) -> Result<()> {
        self.expect_config(net.config())?;
        let mut it = self.tensors.iter();
        let mut err = None;
        net.visit_mut("", &mut |name, s| {
            if err.is_some() {
                return;
            }
            let dst: &mut [f32] = match s {
                StateMut::Param(p) => &mut p.value,
                StateMut::Buffer(b) => b,
            };
            match it.next() {
                Some((n, v)) if n == name && v.len() == dst.len() => dst.copy_from_slice(v),
                Some((n, v)) => {
                    err = Some(FpdError::Checkpoint(format!(
                        "tensor {n} ({} values) does not match {name} ({} values)",
                        v.len(),
                        dst.len()
                    )))
                }
                None => err = Some(FpdError::Checkpoint(format!("missing tensor {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if it.next().is_some() {
            return Err(FpdError::Checkpoint("checkpoint has extra tensors".into()));
        }
        Ok(())
    }

    pub fn to_network(&self) -> Result<PoseNetwork> {
        let mut net = PoseNetwork::new(self.network, 0)?;
        self.load_into(&mut net)?;
        Ok(net)
    }
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        network: ckpt.network,
        train: ckpt.train.clone(),
        epoch: ckpt.epoch,
        step: ckpt.step,
        best_metric: ckpt.best_metric,
        rng_state: ckpt.rng_state.clone(),
        teacher_digest: ckpt.teacher_digest.clone(),
        manifest: ckpt
            .tensors
            .iter()
            .map(|(n, v)| ManifestEntry {
                name: n.clone(),
                len: v.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| FpdError::Checkpoint(format!("cannot encode header: {e}")))?;
    let n_values: usize = ckpt.tensors.iter().map(|(_, v)| v.len()).sum();
    let mut buf = Vec::with_capacity(20 + json.len() + 4 * n_values + DIGEST_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, v) in &ckpt.tensors {
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| FpdError::Checkpoint(m.to_string());
    if bytes.len() < 20 + DIGEST_LEN {
        return Err(bad("file is truncated"));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(FpdError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let body_end = bytes.len() - DIGEST_LEN;
    if Sha256::digest(&bytes[..body_end])[..] != bytes[body_end..] {
        return Err(bad("checksum mismatch (file truncated or corrupted)"));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= body_end)
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&bytes[20..data_start])
        .map_err(|e| FpdError::Checkpoint(format!("bad header: {e}")))?;
    let n_values: usize = header.manifest.iter().map(|m| m.len).sum();
    if data_start + 4 * n_values != body_end {
        return Err(bad("tensor data length does not match the manifest"));
    }
    let mut off = data_start;
    let tensors = header
        .manifest
        .into_iter()
        .map(|m| {
            let v = bytes[off..off + 4 * m.len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            off += 4 * m.len;
            (m.name, v)
        })
        .collect();
    Ok(Checkpoint {
        network: header.network,
        train: header.train,
        epoch: header.epoch,
        step: header.step,
        best_metric: header.best_metric,
        rng_state: header.rng_state,
        teacher_digest: header.teacher_digest,
        tensors,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        FpdError::io(path, e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| FpdError::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::network::Tensor;

    fn tiny() -> HourglassConfig {
        HourglassConfig::student().with_stages(2).with_channels(8).with_depth(1).with_input_size(16)
    }

    fn saved() -> (PoseNetwork, Checkpoint) {
        let net = PoseNetwork::new(tiny(), 4).unwrap();
        let rng = ChaCha8Rng::seed_from_u64(9);
        (net.clone(), Checkpoint::capture(&net, &TrainConfig::default(), &rng))
    }

    #[test]
    fn round_trip_restores_outputs() {
        let (net, ck) = saved();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&ck, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        let net2 = back.to_network().unwrap();
        assert_eq!(net2.digest(), net.digest());
        let x = Tensor::from_vec([1, 3, 16, 16], (0..768).map(|i| (i % 17) as f32 / 17.0).collect());
        assert_eq!(net.infer(&x).unwrap(), net2.infer(&x).unwrap());
        let mut rng = back.rng_state.restore();
        let mut orig = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        assert_eq!(rng.random::<u64>(), orig.random::<u64>());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (_, ck) = saved();
        let bytes = checkpoint_bytes(&ck).unwrap();
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                checkpoint_from_bytes(&bytes[..cut]),
                Err(FpdError::Checkpoint(_))
            ));
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let (_, ck) = saved();
        let mut bytes = checkpoint_bytes(&ck).unwrap();
        bytes[8] = 99;
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(FpdError::VersionMismatch { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn wrong_architecture_is_contract_error() {
        let (_, ck) = saved();
        let other = tiny().with_stages(1);
        assert!(matches!(ck.expect_config(&other), Err(FpdError::Contract(_))));
        let mut net = PoseNetwork::new(other, 0).unwrap();
        assert!(matches!(ck.load_into(&mut net), Err(FpdError::Contract(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/x.ckpt")),
            Err(FpdError::Io { .. })
        ));
    }
}
