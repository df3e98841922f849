//! `model.json` + `model.bin`: the layer list as JSON and the parameters as
//! raw little-endian `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network};
use crate::io::{atomic_write, f64s_to_le_bytes, le_bytes_to_f64s, read_json, write_json};
use crate::{Error, Result};

pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    param_count: usize,
    /// Weight blob, relative to the JSON file.
    weights: String,
}

fn blob_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("bin")
}

/// Writes `json_path` and a sibling `.bin` weight blob.
pub fn save_model(net: &Network, json_path: &Path) -> Result<()> {
    let bin = blob_path(json_path);
    atomic_write(&bin, &f64s_to_le_bytes(net.params()))?;
    write_json(
        json_path,
        &ModelFile {
            version: MODEL_VERSION,
            input_shape: net.input_shape().to_vec(),
            layers: net.layers().to_vec(),
            param_count: net.param_count(),
            weights: bin
                .file_name()
                .expect("file path")
                .to_string_lossy()
                .into_owned(),
        },
    )
}

pub fn load_model(json_path: &Path) -> Result<Network> {
    #[derive(Deserialize)]
    struct Probe {
        version: u32,
    }
    let probe: Probe = read_json(json_path)?;
    if probe.version != MODEL_VERSION {
        return Err(Error::Version {
            found: probe.version,
            expected: MODEL_VERSION,
        });
    }
    let m: ModelFile = read_json(json_path)?;
    let bin = json_path.with_file_name(&m.weights);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != 8 * m.param_count {
        return Err(Error::Shape(format!(
            "weight blob {} has {} bytes, expected {}",
            bin.display(),
            bytes.len(),
            8 * m.param_count
        )));
    }
    Network::with_params(&m.input_shape, m.layers, le_bytes_to_f64s(&bytes)?)
}
