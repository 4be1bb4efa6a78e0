//! Model checkpoints: `"SEMM" | u32-LE version=1 | u32-LE descriptor length |
//! descriptor JSON | u64-LE parameter count | parameters as f64 LE` in the
//! model's canonical parameter order. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use heldout_core::model::{build_model, AuxTask, CnnConfig, MultiHeadModel};
use heldout_core::rng::SeedTree;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

const SEMM_MAGIC: &[u8; 4] = b"SEMM";
const SEMM_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchDescriptor {
    in_channels: usize,
    widths: Vec<usize>,
    cpc_steps: usize,
    n_classes: usize,
    aux_task: String,
}

pub fn save_model(path: impl AsRef<Path>, model: &MultiHeadModel) -> Result<()> {
    let path = path.as_ref();
    let desc = ArchDescriptor {
        in_channels: model.arch.in_channels,
        widths: model.arch.widths.clone(),
        cpc_steps: model.arch.cpc_steps,
        n_classes: model.n_classes,
        aux_task: model.aux_task.name().to_string(),
    };
    let desc_json = serde_json::to_vec(&desc).expect("descriptor is plain data");
    let params = model.named_params();
    let n_values: usize = params.iter().map(|(_, p)| p.len()).sum();

    let mut bytes = Vec::new();
    bytes.extend_from_slice(SEMM_MAGIC);
    bytes.extend_from_slice(&SEMM_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(desc_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&desc_json);
    bytes.extend_from_slice(&(n_values as u64).to_le_bytes());
    for (_, p) in &params {
        for &v in p.data().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Read a checkpoint back into a frozen model ready for scoring.
pub fn load_model(path: impl AsRef<Path>) -> Result<MultiHeadModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != SEMM_MAGIC {
        return Err(CliError::format(path, "bad magic, expected \"SEMM\""));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SEMM_VERSION {
        return Err(CliError::format(
            path,
            format!("unsupported version {version}, expected {SEMM_VERSION}"),
        ));
    }
    let desc_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let desc_end = 12 + desc_len;
    if bytes.len() < desc_end + 8 {
        return Err(CliError::format(path, "file too short for its descriptor"));
    }
    let desc: ArchDescriptor = serde_json::from_slice(&bytes[12..desc_end])
        .map_err(|e| CliError::format(path, format!("descriptor: {e}")))?;
    let aux_task: AuxTask = desc
        .aux_task
        .parse()
        .map_err(|_| CliError::format(path, format!("unknown aux task {:?}", desc.aux_task)))?;
    let n_values = u64::from_le_bytes(bytes[desc_end..desc_end + 8].try_into().unwrap()) as usize;
    let payload = &bytes[desc_end + 8..];
    if payload.len() != n_values * 8 {
        return Err(CliError::format(
            path,
            format!(
                "parameter payload is {} bytes, header implies {}",
                payload.len(),
                n_values * 8
            ),
        ));
    }

    let arch = CnnConfig {
        in_channels: desc.in_channels,
        widths: desc.widths.clone(),
        cpc_steps: desc.cpc_steps,
    };
    let model = build_model(&arch, desc.n_classes, aux_task, &SeedTree::new(0))?;
    let expected: usize = model.named_params().iter().map(|(_, p)| p.len()).sum();
    if n_values != expected {
        return Err(CliError::format(
            path,
            format!("{n_values} parameters in file, architecture needs {expected}"),
        ));
    }
    let mut offset = 0;
    for (_, p) in model.named_params() {
        let mut data = p.data_mut();
        for v in data.iter_mut() {
            *v = f64::from_le_bytes(payload[offset..offset + 8].try_into().unwrap());
            offset += 8;
        }
    }
    model.freeze();
    Ok(model)
}
