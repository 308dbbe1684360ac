use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{SegSample, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::model::BBox;
use crate::tensor::tsr;

pub const INDEX: &str = "shard.json";
pub const SHARD_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub id: String,
    pub seed: u64,
    pub bbox: BBox,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardIndex {
    pub schema_version: u32,
    pub count: usize,
    pub config: SynthConfig,
    pub config_hash: String,
    pub samples: Vec<ShardEntry>,
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(Error::Validation(format!("sample id {id:?} is not a plain file stem")));
    }
    Ok(())
}

pub fn write_shard(dir: &Path, cfg: &SynthConfig, samples: &[SegSample]) -> Result<ShardIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        check_id(&s.id)?;
        let image = format!("img_{}.tsr", s.id);
        let mask = format!("mask_{}.tsr", s.id);
        tsr::write(&s.image, &dir.join(&image))?;
        tsr::write(&s.mask, &dir.join(&mask))?;
        entries.push(ShardEntry {
            id: s.id.clone(),
            seed: s.seed,
            bbox: s.bbox,
            image,
            mask,
        });
    }
    let index = ShardIndex {
        schema_version: SHARD_SCHEMA,
        count: entries.len(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        samples: entries,
    };
    let path = dir.join(INDEX);
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

fn invalid(path: PathBuf, msg: String) -> Error {
    Error::Format { path, offset: 0, msg }
}

/// Reads and validates a whole shard; any bad file fails the read.
pub fn read_shard(dir: &Path) -> Result<(ShardIndex, Vec<SegSample>)> {
    let path = dir.join(INDEX);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: ShardIndex = serde_json::from_slice(&bytes)?;
    if index.schema_version != SHARD_SCHEMA || index.count != index.samples.len() {
        return Err(invalid(
            path,
            format!("schema {} with {} of {} samples", index.schema_version, index.samples.len(), index.count),
        ));
    }
    let mut samples = Vec::with_capacity(index.count);
    for e in &index.samples {
        check_id(&e.id)?;
        let (ip, mp) = (dir.join(&e.image), dir.join(&e.mask));
        let image = tsr::read::<f32>(&ip)?;
        let mask = tsr::read::<f32>(&mp)?;
        let t = index.config.target;
        if image.shape() != [3, t, t] {
            return Err(invalid(ip, format!("image shape {:?}, expected [3, {t}, {t}]", image.shape())));
        }
        let m = Mask::from_tensor(&mask).map_err(|err| invalid(mp.clone(), err.to_string()))?;
        if (m.height, m.width) != (index.config.size, index.config.size) {
            return Err(invalid(mp, format!("mask shape {:?}", mask.shape())));
        }
        e.bbox
            .validate(index.config.size)
            .map_err(|err| invalid(path.clone(), format!("sample {}: {err}", e.id)))?;
        samples.push(SegSample {
            id: e.id.clone(),
            seed: e.seed,
            image,
            mask,
            bbox: e.bbox,
        });
    }
    Ok((index, samples))
}
