//! Model container: same framing as feature files with its own magic.
//!
//! ```text
//! magic        6 bytes   "VIBM1\0"
//! header_len   u32 LE
//! header       JSON      dims, scales, config, activation, normalizations, layer sizes
//! payload      f32 LE    encoder parameters then decoder parameters
//! ```
//!
//! Each network is flattened layer by layer as weight then bias, weights stored
//! input-major (equivalently output x input row-major).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VibeError};
use crate::flag::FlagScales;
use crate::mlp::{Activation, Mlp};
use crate::model::{Standardizer, TrainConfig, TrainReport, VibeSpaceModel};

pub const MODEL_MAGIC: &[u8; 6] = b"VIBM1\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Name of the parameter initialization recorded in model headers.
pub const INIT_SCHEME: &str = "uniform_fan_in";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    version: u32,
    source_dim: usize,
    latent_dim: usize,
    target_dim: usize,
    scales: FlagScales,
    config: TrainConfig,
    activation: Activation,
    output_activation: String,
    init: String,
    dtype: String,
    endian: String,
    training_sigma_sq: f64,
    input_norm: Standardizer,
    output_norm: Standardizer,
    encoder_layers: Vec<usize>,
    decoder_layers: Vec<usize>,
    param_count: usize,
    #[serde(default)]
    report: Option<TrainReport>,
}

pub fn encode_model(model: &VibeSpaceModel) -> Result<Vec<u8>> {
    let header = ModelHeader {
        version: MODEL_FORMAT_VERSION,
        source_dim: model.source_dim(),
        latent_dim: model.latent_dim(),
        target_dim: model.target_dim(),
        scales: model.scales().clone(),
        config: model.config().clone(),
        activation: model.activation(),
        output_activation: "identity".into(),
        init: INIT_SCHEME.into(),
        dtype: "f32".into(),
        endian: "little".into(),
        training_sigma_sq: model.training_sigma_sq(),
        input_norm: model.input_norm().clone(),
        output_norm: model.output_norm().clone(),
        encoder_layers: model.encoder().layer_sizes(),
        decoder_layers: model.decoder().layer_sizes(),
        param_count: model.param_count(),
        report: model.report().cloned(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| VibeError::invalid("model header", e.to_string()))?;
    let header_len =
        u32::try_from(json.len()).map_err(|_| VibeError::invalid("model header", "exceeds u32 length"))?;
    let mut out = Vec::with_capacity(MODEL_MAGIC.len() + 4 + json.len() + 4 * model.param_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in model.encoder().flatten().into_iter().chain(model.decoder().flatten()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8], origin: &Path) -> Result<VibeSpaceModel> {
    let bad = |reason: String| VibeError::BadHeader {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < MODEL_MAGIC.len() || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(VibeError::BadMagic(origin.to_path_buf()));
    }
    let rest = &bytes[MODEL_MAGIC.len()..];
    if rest.len() < 4 {
        return Err(bad("missing header length".into()));
    }
    let header_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < header_len {
        return Err(bad(format!("header length {header_len} exceeds file size")));
    }
    let h: ModelHeader = serde_json::from_slice(&rest[..header_len]).map_err(|e| bad(e.to_string()))?;
    if h.version != MODEL_FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", h.version)));
    }
    if h.dtype != "f32" || h.endian != "little" {
        return Err(bad(format!("unsupported payload {} / {}", h.dtype, h.endian)));
    }
    if h.output_activation != "identity" {
        return Err(bad(format!("unsupported output activation {:?}", h.output_activation)));
    }
    let count = |sizes: &[usize]| -> usize { sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum() };
    if h.encoder_layers.len() < 2 || h.decoder_layers.len() < 2 {
        return Err(bad("networks need at least one layer".into()));
    }
    let enc_count = count(&h.encoder_layers);
    let dec_count = count(&h.decoder_layers);
    if enc_count + dec_count != h.param_count {
        return Err(bad(format!(
            "param_count {} disagrees with layer sizes ({})",
            h.param_count,
            enc_count + dec_count
        )));
    }
    let payload = &rest[header_len..];
    let expected = 4 * h.param_count;
    if payload.len() != expected {
        return Err(VibeError::PayloadLength {
            path: origin.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let encoder = Mlp::from_flat(&h.encoder_layers, h.activation, &values[..enc_count])
        .ok_or_else(|| bad("encoder layout".into()))?;
    let decoder = Mlp::from_flat(&h.decoder_layers, h.activation, &values[enc_count..])
        .ok_or_else(|| bad("decoder layout".into()))?;
    let dims = [
        ("source_dim", h.source_dim, encoder.input_dim()),
        ("latent_dim", h.latent_dim, encoder.output_dim()),
        ("target_dim", h.target_dim, decoder.output_dim()),
    ];
    for (name, declared, actual) in dims {
        if declared != actual {
            return Err(bad(format!("{name} = {declared} but networks give {actual}")));
        }
    }
    let mut model = VibeSpaceModel::from_parts(
        encoder,
        decoder,
        h.input_norm,
        h.output_norm,
        h.scales,
        h.training_sigma_sq,
        h.config,
    )?;
    model.set_report(h.report);
    Ok(model)
}

pub fn write_model_file(model: &VibeSpaceModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(model)?;
    fs::write(path, bytes).map_err(|e| VibeError::io(path, e))
}

pub fn read_model_file(path: impl AsRef<Path>) -> Result<VibeSpaceModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| VibeError::io(path, e))?;
    decode_model(&bytes, path)
}
