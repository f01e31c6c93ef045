//! Checkpoint directories: `manifest.json`, `config.json`, `params.uvtf`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::numcore::uvtf::{read_file, write_file, UvtfData};
use crate::numcore::{Module, Rng};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.uvtf";
const FORMAT: &str = "occdet-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub step: usize,
    /// In visiting order, matching the records of the parameter file.
    pub params: Vec<ParamEntry>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(dir: &Path, model: &mut Model<f32>, cfg: &PipelineConfig, step: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    let mut records = Vec::new();
    model.visit_params(&mut |p| {
        params.push(ParamEntry { name: p.name.clone(), dims: p.value.dims().to_vec() });
        records.push(UvtfData::F32(p.value.clone()));
    });
    let manifest = Manifest { format: FORMAT.into(), version: 1, config_hash: cfg.hash(), step, params };
    write(&dir.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest)?)?;
    write(&dir.join(CONFIG_FILE), &serde_json::to_string_pretty(cfg)?)?;
    write_file(&dir.join(PARAMS_FILE), &records)
}

pub fn load_checkpoint(dir: &Path) -> Result<(PipelineConfig, Model<f32>, Manifest)> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let manifest: Manifest = serde_json::from_str(&read(MANIFEST_FILE)?)?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("not a checkpoint: format {:?}", manifest.format)));
    }
    let cfg = PipelineConfig::from_json(&read(CONFIG_FILE)?)?;
    if cfg.hash() != manifest.config_hash {
        return Err(Error::Config("checkpoint config does not match its manifest hash".into()));
    }
    let mut model = Model::new(&cfg, &mut Rng::new(cfg.seed).fork("model"))?;
    let mut records = read_file(&dir.join(PARAMS_FILE))?.into_iter();
    let mut entries = manifest.params.iter();
    let mut failure = None;
    model.visit_params(&mut |p| {
        if failure.is_some() {
            return;
        }
        let (Some(e), Some(r)) = (entries.next(), records.next()) else {
            failure = Some(Error::Format("checkpoint has too few parameters".into()));
            return;
        };
        match r.into_f32() {
            Ok(t) if e.name == p.name && t.dims() == p.value.dims() => p.value = t,
            Ok(t) => failure = Some(Error::Format(format!("parameter {} {:?} does not fit {} {:?}", e.name, t.dims(), p.name, p.value.dims()))),
            Err(err) => failure = Some(err),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if entries.next().is_some() || records.next().is_some() {
        return Err(Error::Format("checkpoint has extra parameters".into()));
    }
    Ok((cfg, model, manifest))
}
