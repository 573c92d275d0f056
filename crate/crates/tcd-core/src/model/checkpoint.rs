//! Single-file checkpoint archive.
//!
//! Layout: an 8-byte magic, a little-endian `u64` header length, a JSON
//! header (configs, parameter manifest, optional training state), then the
//! raw little-endian parameter data in manifest order, followed by the
//! Adam first/second moment arrays when training state is present.
//! Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Scope};
use crate::ttg::TtgConfig;

use super::config::ModelConfig;
use super::network::ChangeModel;

const MAGIC: &[u8; 8] = b"TCDCKPT\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamManifest {
    name: String,
    scope: Scope,
    shape: Vec<usize>,
}

/// Optimizer moments and loop position for resumable training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStateHeader {
    pub step: u64,
    pub epoch: u64,
    pub adam_step: u64,
    pub best_metric: Option<(String, f64)>,
    /// Run configuration as opaque JSON, for tooling.
    pub run_config: Option<serde_json::Value>,
}

/// Moment arrays accompanying a train-state header.
pub struct TrainMoments<T> {
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    model: ModelConfig,
    ttg: TtgConfig,
    params: Vec<ParamManifest>,
    train: Option<TrainStateHeader>,
}

fn write_array<T: Scalar>(out: &mut Vec<u8>, a: &ArrayD<T>) {
    for &v in a.iter() {
        v.write_le(out);
    }
}

fn read_array<T: Scalar>(bytes: &[u8], offset: &mut usize, shape: &[usize]) -> Result<ArrayD<T>> {
    let n: usize = shape.iter().product();
    let need = n * T::BYTE_WIDTH;
    if *offset + need > bytes.len() {
        return Err(Error::Checkpoint("truncated parameter data".into()));
    }
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let at = *offset + i * T::BYTE_WIDTH;
        values.push(T::read_le(&bytes[at..at + T::BYTE_WIDTH]));
    }
    *offset += need;
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| Error::Checkpoint(format!("bad array shape: {e}")))
}

/// Write a model (optionally with training state) to `path`.
pub fn save_checkpoint<T: Scalar>(
    model: &ChangeModel<T>,
    path: &Path,
    train: Option<(&TrainStateHeader, &TrainMoments<T>)>,
) -> Result<()> {
    let params: Vec<ParamManifest> = model
        .store
        .iter()
        .map(|(_, e)| ParamManifest {
            name: e.name.clone(),
            scope: e.scope,
            shape: e.value.shape().to_vec(),
        })
        .collect();
    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.to_string(),
        model: model.config.clone(),
        ttg: model.ttg_config.clone(),
        params,
        train: train.map(|(h, _)| h.clone()),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut data = Vec::new();
    for (_, e) in model.store.iter() {
        write_array(&mut data, &e.value);
    }
    if let Some((_, moments)) = train {
        if moments.m.len() != model.store.len() || moments.v.len() != model.store.len() {
            return Err(Error::Checkpoint("moment count does not match parameters".into()));
        }
        for m in &moments.m {
            write_array(&mut data, m);
        }
        for v in &moments.v {
            write_array(&mut data, v);
        }
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&data)?;
    Ok(())
}

/// Everything read back from an archive.
pub struct LoadedCheckpoint<T: Scalar> {
    pub model: ChangeModel<T>,
    pub train: Option<(TrainStateHeader, TrainMoments<T>)>,
}

/// Read an archive, rebuild the model from the embedded configs and
/// validate every stored array shape-for-shape against the rebuilt
/// parameter registry.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let mut file = std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint archive".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("missing header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: header.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "dtype mismatch: archive holds {}, expected {}",
            header.dtype,
            T::DTYPE
        )));
    }

    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;

    let mut model = ChangeModel::<T>::new(header.model.clone(), header.ttg.clone(), 0)?;
    if model.store.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: archive {}, config implies {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    let mut offset = 0usize;
    for (id, manifest) in ids.iter().zip(&header.params) {
        let expected = model.store.value(*id).shape().to_vec();
        if model.store.name(*id) != manifest.name || expected != manifest.shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{}`: archive shape {:?} does not match config shape {:?} of `{}`",
                manifest.name,
                manifest.shape,
                expected,
                model.store.name(*id)
            )));
        }
        let value = read_array::<T>(&bytes, &mut offset, &manifest.shape)?;
        model.store.value_mut(*id).assign(&value);
    }

    let train = if let Some(train_header) = header.train {
        let mut m = Vec::with_capacity(header.params.len());
        for manifest in &header.params {
            m.push(read_array::<T>(&bytes, &mut offset, &manifest.shape)?);
        }
        let mut v = Vec::with_capacity(header.params.len());
        for manifest in &header.params {
            v.push(read_array::<T>(&bytes, &mut offset, &manifest.shape)?);
        }
        Some((train_header, TrainMoments { m, v }))
    } else {
        None
    };

    Ok(LoadedCheckpoint { model, train })
}

/// Load and additionally require the archive's model config to equal
/// `expected`, naming the first differing shape otherwise.
pub fn load_checkpoint_expecting<T: Scalar>(
    path: &Path,
    expected: &ModelConfig,
) -> Result<LoadedCheckpoint<T>> {
    let loaded = load_checkpoint::<T>(path)?;
    if &loaded.model.config != expected {
        let probe = ChangeModel::<T>::new(expected.clone(), loaded.model.ttg_config.clone(), 0)?;
        for (id_a, id_b) in loaded.model.store.ids().zip(probe.store.ids()) {
            let (sa, sb) = (
                loaded.model.store.value(id_a).shape().to_vec(),
                probe.store.value(id_b).shape().to_vec(),
            );
            if sa != sb || loaded.model.store.name(id_a) != probe.store.name(id_b) {
                return Err(Error::Checkpoint(format!(
                    "model config mismatch: first differing parameter `{}` has shape {:?}, expected `{}` {:?}",
                    loaded.model.store.name(id_a),
                    sa,
                    probe.store.name(id_b),
                    sb
                )));
            }
        }
        return Err(Error::Checkpoint(
            "model config mismatch (same parameter shapes, different settings)".into(),
        ));
    }
    Ok(loaded)
}
