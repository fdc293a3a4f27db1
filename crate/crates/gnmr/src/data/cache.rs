//! Versioned binary cache for a prepared dataset: normalization statistics
//! plus the normalized train/val/test runs, keyed by everything that shaped
//! them.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{EngineRun, NormalizationStats};
use crate::binfmt::{read_f64s, read_string, write_f64s, write_string};
use crate::channels::NUM_CHANNELS;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GNMRDATA";
const VERSION: u32 = 1;

/// Identifies the exact preparation that produced a cache.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheKey {
    pub dataset: String,
    pub graph_hash: String,
    pub window_len: u32,
    pub window_shift: u32,
    pub rul_ceiling: f64,
    pub train_ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCache {
    pub key: CacheKey,
    pub stats: NormalizationStats,
    pub train: Vec<EngineRun>,
    pub val: Vec<EngineRun>,
    pub test: Vec<EngineRun>,
}

fn write_runs<W: Write>(w: &mut W, runs: &[EngineRun]) -> Result<()> {
    w.write_u32::<LittleEndian>(runs.len() as u32)?;
    for run in runs {
        w.write_u32::<LittleEndian>(run.unit_id)?;
        w.write_u32::<LittleEndian>(run.cycles as u32)?;
        w.write_u32::<LittleEndian>(run.failure_cycle)?;
        write_f64s(w, &run.channels)?;
    }
    Ok(())
}

fn read_runs<R: Read>(r: &mut R) -> Result<Vec<EngineRun>> {
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut runs = Vec::with_capacity(count);
    for _ in 0..count {
        let unit_id = r.read_u32::<LittleEndian>()?;
        let cycles = r.read_u32::<LittleEndian>()? as usize;
        let failure_cycle = r.read_u32::<LittleEndian>()?;
        let channels = read_f64s(r, cycles * NUM_CHANNELS)?;
        runs.push(EngineRun {
            unit_id,
            channels,
            cycles,
            failure_cycle,
        });
    }
    Ok(runs)
}

impl DatasetCache {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_string(&mut w, &self.key.dataset)?;
        write_string(&mut w, &self.key.graph_hash)?;
        w.write_u32::<LittleEndian>(self.key.window_len)?;
        w.write_u32::<LittleEndian>(self.key.window_shift)?;
        w.write_f64::<LittleEndian>(self.key.rul_ceiling)?;
        w.write_f64::<LittleEndian>(self.key.train_ratio)?;
        w.write_u64::<LittleEndian>(self.key.seed)?;
        write_f64s(&mut w, &self.stats.mins)?;
        write_f64s(&mut w, &self.stats.maxs)?;
        write_f64s(&mut w, &self.stats.norm_means)?;
        write_runs(&mut w, &self.train)?;
        write_runs(&mut w, &self.val)?;
        write_runs(&mut w, &self.test)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{} is not a dataset cache",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Incompatible(format!(
                "dataset cache version {version} (supported: {VERSION}); regenerate with prepare"
            )));
        }
        let dataset = read_string(&mut r)?;
        let graph_hash = read_string(&mut r)?;
        let window_len = r.read_u32::<LittleEndian>()?;
        let window_shift = r.read_u32::<LittleEndian>()?;
        let rul_ceiling = r.read_f64::<LittleEndian>()?;
        let train_ratio = r.read_f64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let stats = NormalizationStats {
            mins: read_f64s(&mut r, NUM_CHANNELS)?,
            maxs: read_f64s(&mut r, NUM_CHANNELS)?,
            norm_means: read_f64s(&mut r, NUM_CHANNELS)?,
        };
        let train = read_runs(&mut r)?;
        let val = read_runs(&mut r)?;
        let test = read_runs(&mut r)?;
        Ok(DatasetCache {
            key: CacheKey {
                dataset,
                graph_hash,
                window_len,
                window_shift,
                rul_ceiling,
                train_ratio,
                seed,
            },
            stats,
            train,
            val,
            test,
        })
    }

    /// Reject a cache prepared under different settings.
    pub fn check_key(&self, expected: &CacheKey) -> Result<()> {
        if self.key != *expected {
            return Err(Error::Incompatible(format!(
                "dataset cache was prepared with {:?} but the run requires {:?}; \
                 regenerate with prepare",
                self.key, expected
            )));
        }
        Ok(())
    }
}
