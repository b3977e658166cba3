use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParameterRegistry, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: DetectorConfig,
    parameters: Vec<ManifestEntry>,
    checksum: String,
}

const FORMAT: &str = "fsodlab-checkpoint-v1";

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.bin` (parameters as little-endian f32, in manifest order)
/// and `<stem>.json` (config, names, shapes, checksum).
pub fn save_checkpoint(det: &Detector, stem: &Path) -> Result<()> {
    let (json, bin) = paths(stem);
    if let Some(dir) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(det.params().num_values() * 4);
    let mut parameters = Vec::new();
    for (name, e) in det.params().iter() {
        parameters.push(ManifestEntry {
            name: name.to_string(),
            shape: e.tensor.shape().to_vec(),
            trainable: e.trainable,
        });
        for v in e.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: det.config().clone(),
        parameters,
        checksum: det.checksum(),
    };
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: json.clone(),
        source,
    })?;
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
}

/// Reads a checkpoint written by [`save_checkpoint`], verifying sizes and
/// the checksum. `stem` may also name either of the two files.
pub fn load_checkpoint(stem: &Path) -> Result<Detector> {
    let (json, bin) = paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: json.clone(),
        source,
    })?;
    if manifest.format != FORMAT {
        return Err(Error::Data(format!("{}: unknown checkpoint format {:?}", json.display(), manifest.format)));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let total: usize = manifest.parameters.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes, found {}",
            bin.display(),
            total * 4,
            bytes.len()
        )));
    }
    let mut reg = ParameterRegistry::new();
    let mut floats = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for p in &manifest.parameters {
        let n = p.shape.iter().product();
        let data: Vec<f32> = floats.by_ref().take(n).collect();
        reg.insert(p.name.clone(), Tensor::new(p.shape.clone(), data)?)?;
        reg.get_mut(&p.name)?.trainable = p.trainable;
    }
    let det = Detector::from_parts(manifest.config, reg)?;
    if det.checksum() != manifest.checksum {
        return Err(Error::Data(format!("{}: parameter checksum mismatch", bin.display())));
    }
    Ok(det)
}
