//! Versioned binary model files.
//!
//! Layout: magic "GGRD", u32 version, u32 embedding dim, u32 hidden width,
//! u32 layer count, u8 attention mode (0 deterministic / 1 parametric),
//! then every parameter as row-major little-endian f32 in the fixed order
//! layer₀(w,b) … layerₗ(w,b), head (w,b), attention (w,b,u) when parametric.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, AttentionParams, ParametricAttention};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

use super::matrix::Matrix;
use super::{GcnModel, Layer, KIND_SLOTS};

const MAGIC: &[u8; 4] = b"GGRD";
const MODEL_VERSION: u32 = 1;

/// Header facts plus the parameter count, for `model inspect`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub version: u32,
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub attention: AttentionMode,
    pub parameters: usize,
}

impl GcnModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_magic(MAGIC);
        w.put_u32(MODEL_VERSION);
        w.put_u32(self.dim as u32);
        w.put_u32(self.hidden as u32);
        w.put_u32(self.layers.len() as u32);
        w.put_u8(match self.attention.mode {
            AttentionMode::Deterministic => 0,
            AttentionMode::Parametric => 1,
        });
        for v in self.params() {
            w.put_f32(v as f32);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<GcnModel> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.get_u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Version {
                got: version,
                supported: MODEL_VERSION,
            });
        }
        let dim = r.get_u32()? as usize;
        let hidden = r.get_u32()? as usize;
        let layer_count = r.get_u32()? as usize;
        let mode = match r.get_u8()? {
            0 => AttentionMode::Deterministic,
            1 => AttentionMode::Parametric,
            m => return Err(Error::Corrupt(format!("unknown attention mode byte {m}"))),
        };
        if dim == 0 || hidden == 0 || layer_count == 0 {
            return Err(Error::Corrupt("zero model dimension".into()));
        }
        if dim > 1 << 20 || hidden > 1 << 16 || layer_count > 64 {
            return Err(Error::Corrupt(format!(
                "implausible model shape {dim}x{hidden}x{layer_count}"
            )));
        }

        let get_vec = |r: &mut Reader, n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(f64::from(r.get_f32()?));
            }
            Ok(out)
        };
        let mut layers = Vec::with_capacity(layer_count);
        let mut fan_in = dim + KIND_SLOTS;
        for _ in 0..layer_count {
            let data = get_vec(&mut r, fan_in * hidden)?;
            let w = Matrix::from_fn(fan_in, hidden, |i, j| data[i * hidden + j]);
            let b = get_vec(&mut r, hidden)?;
            layers.push(Layer { w, b });
            fan_in = hidden;
        }
        let head_w = get_vec(&mut r, hidden)?;
        let head_b = f64::from(r.get_f32()?);
        let attention = match mode {
            AttentionMode::Deterministic => AttentionParams::deterministic(),
            AttentionMode::Parametric => {
                let data = get_vec(&mut r, hidden * dim)?;
                let w = Matrix::from_fn(hidden, dim, |i, j| data[i * dim + j]);
                let b = get_vec(&mut r, hidden)?;
                let u = get_vec(&mut r, hidden)?;
                AttentionParams {
                    mode,
                    proj: Some(ParametricAttention { w, b, u }),
                }
            }
        };
        r.finish()?;

        let model = GcnModel {
            dim,
            hidden,
            layers,
            head_w,
            head_b,
            attention,
        };
        if !model.is_finite() {
            return Err(Error::Corrupt("non-finite model parameter".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::ModelFile {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<GcnModel> {
        let bytes = fs::read(path).map_err(|e| Error::ModelFile {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        GcnModel::from_bytes(&bytes).map_err(|e| match e {
            Error::Version { .. } => e,
            other => Error::ModelFile {
                path: path.to_path_buf(),
                msg: other.to_string(),
            },
        })
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            version: MODEL_VERSION,
            dim: self.dim,
            hidden: self.hidden,
            layers: self.layers.len(),
            attention: self.attention.mode,
            parameters: self.params().len(),
        }
    }
}

/// Header summary of a model file.
pub fn inspect(path: &Path) -> Result<ModelInfo> {
    Ok(GcnModel::load(path)?.info())
}
