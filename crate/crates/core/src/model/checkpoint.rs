//! Versioned checkpoint container.
//!
//! Layout: magic `"PGCK"`, version `u16`, header length `u32`, a JSON
//! header (config, epoch, best validation loss, and the name/shape of
//! every array), then the arrays' data as little-endian `f32` in header
//! order. Parameter arrays always come first, optimizer moments after.
//!
//! Loading validates every array name and shape against the embedded
//! configuration and rejects mismatches.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AdamState, ModelConfig, ModelParams, Real, LEARNABLE_COUNT};

const MAGIC: &[u8; 4] = b"PGCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config: ModelConfig,
    epoch: usize,
    best_val_loss: f64,
    params: Vec<ArrayMeta>,
    adam_step: Option<u64>,
    adam_arrays: Vec<ArrayMeta>,
}

/// A serialized model state: parameters (including batch-norm running
/// statistics) plus optional optimizer state, at `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: usize,
    pub best_val_loss: f64,
    params: Vec<(String, Vec<usize>, Vec<f32>)>,
    adam: Option<(u64, Vec<(String, Vec<usize>, Vec<f32>)>)>,
}

/// Errors from checkpoint serialization.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("array {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("array count mismatch: expected {expected}, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Checkpoint {
    /// Capture the current training state.
    pub fn from_state<F: Real>(
        config: &ModelConfig,
        params: &ModelParams<F>,
        adam: Option<&AdamState<F>>,
        epoch: usize,
        best_val_loss: f64,
    ) -> Self {
        let param_arrays = params
            .named_views()
            .into_iter()
            .map(|(name, view)| {
                (
                    name.to_string(),
                    view.shape().to_vec(),
                    view.iter().map(|v| v.to_f32().expect("finite")).collect(),
                )
            })
            .collect();
        let adam = adam.map(|state| {
            let mut arrays = Vec::with_capacity(2 * state.m.len());
            for (i, m) in state.m.iter().enumerate() {
                arrays.push((
                    format!("adam.m.{i}"),
                    m.shape().to_vec(),
                    m.iter().map(|v| v.to_f32().expect("finite")).collect(),
                ));
            }
            for (i, v) in state.v.iter().enumerate() {
                arrays.push((
                    format!("adam.v.{i}"),
                    v.shape().to_vec(),
                    v.iter().map(|x| x.to_f32().expect("finite")).collect(),
                ));
            }
            (state.step, arrays)
        });
        Self {
            config: *config,
            epoch,
            best_val_loss,
            params: param_arrays,
            adam,
        }
    }

    /// Reconstruct the parameters, validating names and shapes against the
    /// embedded configuration.
    pub fn params<F: Real>(&self) -> Result<ModelParams<F>, CheckpointError> {
        let expected = self.config.array_shapes();
        if self.params.len() != expected.len() {
            return Err(CheckpointError::CountMismatch {
                expected: expected.len(),
                found: self.params.len(),
            });
        }
        let mut out = ModelParams::<F>::zeros(&self.config);
        {
            let mut views = out.named_views_mut();
            for (((exp_name, exp_shape), (name, shape, data)), (_, view)) in
                expected.iter().zip(&self.params).zip(views.iter_mut())
            {
                if name != exp_name || shape != exp_shape || data.len() != view.len() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        expected: exp_shape.clone(),
                        found: shape.clone(),
                    });
                }
                for (dst, &src) in view.iter_mut().zip(data.iter()) {
                    *dst = F::from(src).expect("f32 widens");
                }
            }
        }
        Ok(out)
    }

    /// Reconstruct the optimizer state, when stored.
    pub fn adam_state<F: Real>(&self) -> Result<Option<AdamState<F>>, CheckpointError> {
        let Some((step, arrays)) = &self.adam else {
            return Ok(None);
        };
        if arrays.len() != 2 * LEARNABLE_COUNT {
            return Err(CheckpointError::CountMismatch {
                expected: 2 * LEARNABLE_COUNT,
                found: arrays.len(),
            });
        }
        let read = |(name, shape, data): &(String, Vec<usize>, Vec<f32>)| -> Result<ArrayD<F>, CheckpointError> {
            let values: Vec<F> = data.iter().map(|&v| F::from(v).expect("f32 widens")).collect();
            ArrayD::from_shape_vec(shape.clone(), values).map_err(|_| {
                CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: vec![data.len()],
                }
            })
        };
        let m = arrays[..LEARNABLE_COUNT]
            .iter()
            .map(read)
            .collect::<Result<_, _>>()?;
        let v = arrays[LEARNABLE_COUNT..]
            .iter()
            .map(read)
            .collect::<Result<_, _>>()?;
        Ok(Some(AdamState { step: *step, m, v }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            schema_version: 1,
            config: self.config,
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            params: self
                .params
                .iter()
                .map(|(name, shape, _)| ArrayMeta {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
            adam_step: self.adam.as_ref().map(|(step, _)| *step),
            adam_arrays: self
                .adam
                .iter()
                .flat_map(|(_, arrays)| arrays.iter())
                .map(|(name, shape, _)| ArrayMeta {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        let all = self
            .params
            .iter()
            .chain(self.adam.iter().flat_map(|(_, arrays)| arrays.iter()));
        for (_, _, data) in all {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            if *pos + n > bytes.len() {
                return Err(CheckpointError::Truncated);
            }
            let out = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(out)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let header_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(&mut pos, header_len)?)
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

        let mut read_arrays =
            |metas: &[ArrayMeta]| -> Result<Vec<(String, Vec<usize>, Vec<f32>)>, CheckpointError> {
                metas
                    .iter()
                    .map(|meta| {
                        let len: usize = meta.shape.iter().product();
                        let raw = take(&mut pos, len * 4)?;
                        let data = raw
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect();
                        Ok((meta.name.clone(), meta.shape.clone(), data))
                    })
                    .collect()
            };
        let params = read_arrays(&header.params)?;
        let adam_arrays = read_arrays(&header.adam_arrays)?;
        let adam = header.adam_step.map(|step| (step, adam_arrays));
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            best_val_loss: header.best_val_loss,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, AdamConfig, Gradients};

    fn config() -> ModelConfig {
        ModelConfig {
            seq_len: 16,
            input_channels: 2,
            gru_hidden: 4,
            kernel: 5,
            dropout_rate: 0.2,
            classes: 3,
        }
    }

    #[test]
    fn round_trip_preserves_f32_state() {
        let cfg = config();
        let params = init_params::<f32>(&cfg, 5);
        let mut adam = AdamState::<f32>::new(&cfg);
        let mut p2 = params.clone();
        let mut grads = Gradients::<f32>::zeros(&cfg);
        grads.conv_w.fill(0.5);
        adam.step(&mut p2, &grads, &AdamConfig::default()).unwrap();

        let ck = Checkpoint::from_state(&cfg, &p2, Some(&adam), 17, 0.321);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.epoch, 17);
        assert_eq!(back.best_val_loss, 0.321);

        let restored = back.params::<f32>().unwrap();
        assert_eq!(restored, p2);
        let restored_adam = back.adam_state::<f32>().unwrap().unwrap();
        assert_eq!(restored_adam.step, 1);
        assert_eq!(restored_adam.m, adam.m);
    }

    #[test]
    fn serialization_is_deterministic() {
        let cfg = config();
        let params = init_params::<f32>(&cfg, 6);
        let a = Checkpoint::from_state(&cfg, &params, None, 3, 1.0).to_bytes();
        let b = Checkpoint::from_state(&cfg, &params, None, 3, 1.0).to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_config_mismatch_on_load() {
        let cfg = config();
        let params = init_params::<f32>(&cfg, 7);
        let ck = Checkpoint::from_state(&cfg, &params, None, 1, 0.5);
        let mut other = ck.clone();
        other.config.input_channels = 4;
        assert!(matches!(
            other.params::<f32>(),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rejects_corrupt_bytes() {
        let cfg = config();
        let params = init_params::<f32>(&cfg, 8);
        let bytes = Checkpoint::from_state(&cfg, &params, None, 1, 0.5).to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(CheckpointError::Truncated | CheckpointError::BadHeader(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn f64_state_round_trips_at_f32_precision() {
        let cfg = config();
        let params = init_params::<f64>(&cfg, 9);
        let ck = Checkpoint::from_state(&cfg, &params, None, 0, 9.75);
        let restored = ck.params::<f64>().unwrap();
        for ((_, a), (_, b)) in params.named_views().iter().zip(restored.named_views()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}
