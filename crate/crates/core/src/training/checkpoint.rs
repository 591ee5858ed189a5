//! Single-file training checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then raw little-endian `f32` blobs (model parameters including
//! batch-norm running statistics, followed by the Adam moments). The header
//! lists every blob with its name, shape and element offset.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::{Stage, TrainConfig};
use crate::error::{io_err, QenetError, Result};
use crate::io::write_atomic_with;
use crate::nn::Parameterized;
use crate::pipeline::{ModelConfig, Models};

pub const MAGIC: &[u8; 8] = b"QENETCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| QenetError::Checkpoint(format!("bad rng position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobMeta {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the blob section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    model: ModelConfig,
    stage: Stage,
    qp: u8,
    epoch: u64,
    step: u64,
    rng: RngState,
    adam_t: u64,
    blobs: Vec<BlobMeta>,
}

/// Everything needed to continue or fine-tune a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub stage: Stage,
    pub qp: u8,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
    pub models: Models<f32>,
    pub adam: Adam<f32>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let params = self.models.named_params();
        let mut entries: Vec<(String, Vec<usize>, &[f32])> =
            params.iter().map(|(n, p)| (format!("param/{n}"), p.shape.clone(), p.data.as_slice())).collect();
        for (prefix, moments) in [("adam_m", &self.adam.m), ("adam_v", &self.adam.v)] {
            for (name, m) in self.adam.names.iter().zip(moments) {
                entries.push((format!("{prefix}/{name}"), vec![m.len()], m.as_slice()));
            }
        }
        let mut offset = 0u64;
        let blobs = entries
            .iter()
            .map(|(name, shape, values)| {
                let meta = BlobMeta { name: name.clone(), shape: shape.clone(), offset };
                offset += values.len() as u64;
                meta
            })
            .collect();

        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            model: self.models.config,
            stage: self.stage,
            qp: self.qp,
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            adam_t: self.adam.t,
            blobs,
        };
        let json = serde_json::to_vec(&header)?;
        write_atomic_with(path, |w| {
            w.write_all(MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for (_, _, values) in &entries {
                for v in *values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let bad = |m: &str| QenetError::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body])?;
        let blob_bytes = &bytes[body..];
        if blob_bytes.len() % 4 != 0 {
            return Err(bad("blob section is not a whole number of floats"));
        }
        let floats: Vec<f32> = blob_bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let lookup = |name: &str, shape: &[usize]| -> Result<&[f32]> {
            let meta = header.blobs.iter().find(|b| b.name == name).ok_or_else(|| bad(&format!("missing blob {name}")))?;
            if meta.shape != shape {
                return Err(bad(&format!("blob {name} has shape {:?}, expected {shape:?}", meta.shape)));
            }
            let start = meta.offset as usize;
            let n: usize = shape.iter().product();
            floats.get(start..start + n).ok_or_else(|| bad(&format!("blob {name} out of range")))
        };

        let mut models = Models::<f32>::new(header.model, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut err = None;
        models.visit_mut("", &mut |name, p| match lookup(&format!("param/{name}"), &p.shape) {
            Ok(v) => p.data.copy_from_slice(v),
            Err(e) => err = err.take().or(Some(e)),
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut adam = Adam::new(header.config.adam(), &models);
        adam.t = header.adam_t;
        for (i, name) in adam.names.clone().iter().enumerate() {
            let n = adam.m[i].len();
            adam.m[i].copy_from_slice(lookup(&format!("adam_m/{name}"), &[n])?);
            adam.v[i].copy_from_slice(lookup(&format!("adam_v/{name}"), &[n])?);
        }
        Ok(Checkpoint {
            config: header.config,
            stage: header.stage,
            qp: header.qp,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng,
            models,
            adam,
        })
    }
}
