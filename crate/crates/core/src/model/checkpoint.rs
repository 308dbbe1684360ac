use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::segmenter::Segmenter;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Module, ParamKind};
use crate::tensor::{tsr, Element};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: RunConfig,
    pub params: Vec<ParamEntry>,
}

/// Writes `manifest.json` plus one TSR1 file per parameter and buffer.
pub fn save_checkpoint<T: Element>(model: &Segmenter<T>, config: &RunConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (name, p) in model.named_params() {
        let file = format!("{name}.tsr");
        tsr::write(&p.tensor, &dir.join(&file))?;
        params.push(ParamEntry {
            name,
            shape: p.tensor.shape().to_vec(),
            kind: p.kind(),
            file,
        });
    }
    let manifest = Manifest {
        schema_version: crate::config::SCHEMA_VERSION,
        config: config.clone(),
        params,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Rebuilds the model described by the manifest and overwrites every tensor.
pub fn load_checkpoint<T: Element>(dir: &Path) -> Result<(Manifest, Segmenter<T>)> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.schema_version != crate::config::SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "checkpoint schema {} (expected {})",
            manifest.schema_version,
            crate::config::SCHEMA_VERSION
        )));
    }
    let mut model = manifest.config.build_model::<T>()?;
    let mut entries: std::collections::HashMap<&str, &ParamEntry> =
        manifest.params.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut failure = None;
    model.visit_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = entries.remove(name) else {
            failure = Some(Error::Config(format!("checkpoint lacks parameter {name}")));
            return;
        };
        let res = (|| {
            if entry.shape != p.tensor.shape() || entry.kind != p.kind() {
                return Err(Error::Config(format!(
                    "parameter {name}: checkpoint {:?}/{:?}, model {:?}/{:?}",
                    entry.shape,
                    entry.kind,
                    p.tensor.shape(),
                    p.kind()
                )));
            }
            let t = tsr::read::<T>(&dir.join(&entry.file))?;
            if t.shape() != entry.shape {
                return Err(Error::Config(format!("parameter {name}: file shape {:?}", t.shape())));
            }
            let grad = p.tensor.requires_grad;
            p.tensor = t.with_requires_grad(grad);
            Ok(())
        })();
        if let Err(e) = res {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(name) = entries.keys().next() {
        return Err(Error::Config(format!("checkpoint parameter {name} not in model")));
    }
    Ok((manifest, model))
}
