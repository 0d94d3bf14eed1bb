//! Model checkpoints: a directory holding `manifest.json` and a flat
//! little-endian `f64` parameter file `params.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{BnStats, DiffModel, Layer, ModelKind, ParamSlot};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    architecture_tag: String,
    kind: ModelKind,
    input_dim: usize,
    n_outputs: usize,
    seed: u64,
    layers: Vec<Layer>,
    parameters: Vec<ParamSlot>,
    n_params: usize,
    params_file: String,
    bn_running: Vec<BnStats>,
}

pub fn save(model: &DiffModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        architecture_tag: model.tag.clone(),
        kind: model.kind,
        input_dim: model.input_dim,
        n_outputs: model.n_outputs,
        seed: model.seed,
        layers: model.layers.clone(),
        parameters: model.manifest.clone(),
        n_params: model.params.len(),
        params_file: PARAMS_FILE.to_string(),
        bn_running: model.running.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let bytes: Vec<u8> = model.params.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(PARAMS_FILE), bytes)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<DiffModel> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let bytes = fs::read(dir.join(&manifest.params_file))?;
    if bytes.len() != manifest.n_params * 8 {
        return Err(Error::shape(format!(
            "{} holds {} bytes, manifest expects {} parameters",
            manifest.params_file,
            bytes.len(),
            manifest.n_params
        )));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut model = DiffModel::assemble(
        manifest.architecture_tag,
        manifest.kind,
        manifest.input_dim,
        manifest.layers,
        manifest.seed,
    );
    if model.manifest != manifest.parameters || model.n_outputs != manifest.n_outputs {
        return Err(Error::ArchitectureMismatch(
            "checkpoint manifest does not match its layer list".into(),
        ));
    }
    if model.running.len() != manifest.bn_running.len() {
        return Err(Error::ArchitectureMismatch(
            "checkpoint batch-norm statistics do not match its layer list".into(),
        ));
    }
    model.set_params(params)?;
    model.set_running(manifest.bn_running);
    Ok(model)
}
