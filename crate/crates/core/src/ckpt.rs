//! Versioned checkpoint container for trained parameters.
//!
//! ## File format (version 1, little-endian)
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `STCK` |
//! | 4     | format version, u32 |
//! | 8     | regions R, u64 |
//! | 8     | feature count F, u64 |
//! | 8     | epoch the parameters come from, u64 |
//! | 8     | run seed, u64 |
//! | 8     | config TOML byte length, u64 |
//! | n     | full training config, TOML, UTF-8 |
//! | 8     | normalizer feature count, u64 |
//! | 8·F   | per-feature means, f64 |
//! | 8·F   | per-feature standard deviations, f64 |
//! | 8     | parameter tensor count, u64 |
//! | —     | per tensor: name length u64, name UTF-8, rank u64, dims u64 each, values f64 |
//!
//! Every random stream in training is derived from the run seed, so the seed
//! in the header (echoed in the config block) is the complete generator
//! state. Loading rebuilds the model skeleton from the stored config and then
//! overwrites every parameter by name, so a round-trip reproduces forward
//! passes bit for bit.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::PretrainModel;
use crate::norm::NormStats;
use crate::params::ParamBank;
use crate::tensor::Tensor;
use crate::train::TrainOutcome;

const MAGIC: &[u8; 4] = b"STCK";
const VERSION: u32 = 1;

/// Everything needed to resume inference: config, normalizer, and named
/// parameter tensors.
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub regions: usize,
    pub feat_dim: usize,
    /// Epoch the stored parameters were selected from (0 = initialization).
    pub epoch: usize,
    pub stats: NormStats,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshots a parameter bank with its surrounding run state.
    pub fn capture(
        cfg: &TrainConfig,
        regions: usize,
        feat_dim: usize,
        epoch: usize,
        stats: &NormStats,
        bank: &ParamBank,
    ) -> Self {
        Checkpoint {
            cfg: cfg.clone(),
            regions,
            feat_dim,
            epoch,
            stats: NormStats::from_parts(stats.mean().to_vec(), stats.std().to_vec())
                .expect("stats were already validated"),
            tensors: bank
                .iter()
                .map(|(name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Snapshots the best-validation parameters of a finished training run.
    pub fn from_outcome(outcome: &TrainOutcome) -> Self {
        Checkpoint::capture(
            outcome.model.config(),
            outcome.model.regions(),
            outcome.model.feat_dim(),
            outcome.best_epoch,
            &outcome.stats,
            &outcome.bank,
        )
    }

    /// Re-instantiates the model skeleton from the stored config and loads
    /// every stored tensor into it by name.
    pub fn rebuild(&self) -> Result<(PretrainModel, ParamBank)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let (model, mut bank) = PretrainModel::init(&self.cfg, self.regions, self.feat_dim, &mut rng)?;
        if bank.len() != self.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors but the configured model has {} parameters",
                self.tensors.len(),
                bank.len()
            )));
        }
        for (name, t) in &self.tensors {
            bank.set_by_name(name, t.clone())?;
        }
        Ok((model, bank))
    }

    /// Writes the documented binary format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.regions as u64).to_le_bytes());
        out.extend_from_slice(&(self.feat_dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.cfg.seed.to_le_bytes());
        let toml = self.cfg.to_toml_string();
        out.extend_from_slice(&(toml.len() as u64).to_le_bytes());
        out.extend_from_slice(toml.as_bytes());
        out.extend_from_slice(&(self.stats.feature_count() as u64).to_le_bytes());
        for &m in self.stats.mean() {
            out.extend_from_slice(&m.to_le_bytes());
        }
        for &s in self.stats.std() {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    /// Reads the documented binary format.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;

        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > bytes.len() {
                return Err(Error::Data(format!(
                    "checkpoint file truncated: wanted {} bytes at offset {}, file has {}",
                    n,
                    *cursor,
                    bytes.len()
                )));
            }
            let slice = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(slice)
        };
        let take_u64 = |cursor: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(cursor, 8)?.try_into().unwrap()))
        };
        let take_f64s = |cursor: &mut usize, n: usize| -> Result<Vec<f64>> {
            Ok(take(cursor, n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };

        let magic = take(&mut cursor, 4)?;
        if magic != MAGIC {
            return Err(Error::Data(
                "not a checkpoint file (bad magic; expected STCK)".into(),
            ));
        }
        let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Data(format!(
                "checkpoint format version {version} unsupported (reader supports {VERSION})"
            )));
        }
        let regions = take_u64(&mut cursor)? as usize;
        let feat_dim = take_u64(&mut cursor)? as usize;
        let epoch = take_u64(&mut cursor)? as usize;
        let seed = take_u64(&mut cursor)?;
        let toml_len = take_u64(&mut cursor)? as usize;
        let toml = String::from_utf8(take(&mut cursor, toml_len)?.to_vec())
            .map_err(|_| Error::Data("stored config is not valid UTF-8".into()))?;
        let cfg = TrainConfig::from_toml_str(&toml)?;
        if cfg.seed != seed {
            return Err(Error::Data(format!(
                "checkpoint header seed {seed} disagrees with stored config seed {}",
                cfg.seed
            )));
        }
        let stat_feats = take_u64(&mut cursor)? as usize;
        let mean = take_f64s(&mut cursor, stat_feats)?;
        let std = take_f64s(&mut cursor, stat_feats)?;
        let stats = NormStats::from_parts(mean, std)?;

        let count = take_u64(&mut cursor)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = take_u64(&mut cursor)? as usize;
            let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
                .map_err(|_| Error::Data("parameter name is not valid UTF-8".into()))?;
            let rank = take_u64(&mut cursor)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(take_u64(&mut cursor)? as usize);
            }
            let numel = shape.iter().product::<usize>();
            let data = take_f64s(&mut cursor, numel)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }

        Ok(Checkpoint {
            cfg,
            regions,
            feat_dim,
            epoch,
            stats,
            tensors,
        })
    }
}
