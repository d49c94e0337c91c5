use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamGroup, Params};
use crate::numerics::Tensor;
use crate::tokenizer::Vocab;

const MAGIC: &[u8; 4] = b"DCKP";
const VERSION: u8 = 1;
const FLAG_MERGED: u8 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn payload(params: &Params<f32>, mut keep: impl FnMut(ParamGroup) -> bool) -> Vec<u8> {
    let mut out = Vec::new();
    params.visit(|i, t| {
        if keep(i.group) {
            out.extend(t.data().iter().flat_map(|x| x.to_le_bytes()));
        }
    });
    out
}

/// FNV-1a of the serialized parameter payload; archives record it for the
/// merged model that wrote them.
pub fn payload_hash(params: &Params<f32>) -> u64 {
    fnv1a64(&payload(params, |_| true))
}

/// FNV-1a over the values of one parameter group.
pub fn group_checksum(params: &Params<f32>, group: ParamGroup) -> u64 {
    fnv1a64(&payload(params, |g| g == group))
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: u64,
    rng: Xoshiro256StarStar,
    merges: Vec<(u32, u32)>,
    manifest: Vec<ManifestEntry>,
}

/// Everything needed to resume training or to run the codec.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params<f32>,
    pub vocab: Vocab,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub rng: Xoshiro256StarStar,
}

impl Checkpoint {
    /// A checkpoint at step 0 with the RNG seeded from the model seed.
    pub fn new(params: Params<f32>, vocab: Vocab) -> Result<Self> {
        let rng = Xoshiro256StarStar::seed_from_u64(params.config.seed);
        let c = Checkpoint { params, vocab, train: None, step: 0, rng };
        c.check_vocab()?;
        Ok(c)
    }

    fn check_vocab(&self) -> Result<()> {
        if self.vocab.total() != self.params.config.vocab_total {
            return Err(Error::Format(format!(
                "vocabulary holds {} ids, model expects {}",
                self.vocab.total(),
                self.params.config.vocab_total
            )));
        }
        Ok(())
    }

    pub fn is_merged(&self) -> bool {
        self.params.is_merged()
    }

    /// The same checkpoint with every branch folded into its projection.
    pub fn merged(&self) -> Result<Self> {
        Ok(Checkpoint { params: self.params.merge_reparam()?, ..self.clone() })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_vocab()?;
        let merged = self.is_merged();
        if !merged && !self.params.has_branches() {
            return Err(Error::Format("projections are partially merged".into()));
        }
        let mut manifest = Vec::new();
        let mut offset = 0u64;
        self.params.visit(|i, t| {
            manifest.push(ManifestEntry { name: i.name.clone(), shape: t.shape().to_vec(), offset });
            offset += 4 * t.len() as u64;
        });
        let header = Header {
            model: self.params.config.clone(),
            train: self.train.clone(),
            step: self.step,
            rng: self.rng.clone(),
            merges: self.vocab.merges().to_vec(),
            manifest,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(14 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(if merged { FLAG_MERGED } else { 0 });
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload(&self.params, |_| true));
        Ok(out)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("checkpoint: {msg}"));
        if data.len() < 14 || &data[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        if data[4] != VERSION {
            return Err(bad(format!("unsupported version {}", data[4])));
        }
        let flags = data[5];
        if flags & !FLAG_MERGED != 0 {
            return Err(bad(format!("unknown flags {flags:#04x}")));
        }
        let merged = flags & FLAG_MERGED != 0;
        let json_len = u64::from_le_bytes(data[6..14].try_into().expect("8 bytes"));
        let json_end = usize::try_from(json_len)
            .ok()
            .and_then(|n| n.checked_add(14))
            .filter(|&end| end <= data.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&data[14..json_end])?;
        header.model.validate()?;
        let body = &data[json_end..];

        let mut params = Params::<f32>::zeros(&header.model, !merged);
        let entries = params.entries_mut();
        if entries.len() != header.manifest.len() {
            return Err(bad(format!(
                "manifest lists {} tensors, model has {}",
                header.manifest.len(),
                entries.len()
            )));
        }
        let mut expected = 0u64;
        for ((info, t), e) in entries.into_iter().zip(&header.manifest) {
            if info.name != e.name || t.shape() != e.shape.as_slice() || e.offset != expected {
                return Err(bad(format!("manifest entry {} does not match the model", e.name)));
            }
            let start = e.offset as usize;
            let end = start + 4 * t.len();
            let bytes = body.get(start..end).ok_or_else(|| bad("payload is truncated".into()))?;
            let values: Vec<f32> =
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            *t = Tensor::new(e.shape.clone(), values).map_err(|_| bad(format!("{} holds non-finite values", e.name)))?;
            expected = end as u64;
        }
        if body.len() as u64 != expected {
            return Err(bad(format!("payload holds {} bytes, manifest needs {expected}", body.len())));
        }
        let c = Checkpoint {
            params,
            vocab: Vocab::from_merges(header.merges)?,
            train: header.train,
            step: header.step,
            rng: header.rng,
        };
        c.check_vocab()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Hash recorded in archives; requires a merged model.
    pub fn model_hash(&self) -> Result<u64> {
        if !self.is_merged() {
            return Err(Error::Unmerged("archives are tied to merged models"));
        }
        Ok(payload_hash(&self.params))
    }
}
