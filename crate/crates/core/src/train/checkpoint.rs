//! Binary checkpoint: `TRJL`, version, TOML header, named f32 tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};
use crate::trajmod::DecisionModel;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TRJL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub global_step: u64,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: CheckpointMeta,
    model: ModelConfig,
}

pub fn checkpoint_bytes(config: &ModelConfig, params: &ParamStore, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = toml::to_string(&Header {
        meta: meta.clone(),
        model: config.clone(),
    })
    .map_err(|e| Error::Corrupt(format!("cannot encode checkpoint header: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Corrupt(format!("parameter name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(path: &Path, model: &DecisionModel, meta: &CheckpointMeta) -> Result<()> {
    save_params(path, &model.config, &model.params, meta)
}

pub fn save_params(path: &Path, config: &ModelConfig, params: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let bytes = checkpoint_bytes(config, params, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Raw contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("bad checkpoint magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
    }
    let hlen = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(hlen)?).map_err(|_| Error::Corrupt("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Corrupt(format!("bad checkpoint header: {e}")))?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = c.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = c.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Corrupt(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(Checkpoint {
        config: header.model,
        meta: header.meta,
        tensors,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

/// SHA-256 (hex) of a checkpoint file, used to label analysis outputs.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// First field where `found` differs from `expected`.
pub fn config_mismatch(found: &ModelConfig, expected: &ModelConfig) -> Option<Error> {
    let to_table = |c: &ModelConfig| toml::Table::try_from(c).expect("model config serializes");
    let (f, e) = (to_table(found), to_table(expected));
    for (key, ev) in &e {
        let fv = f.get(key);
        if fv != Some(ev) {
            return Some(Error::CheckpointMismatch {
                field: format!("model.{key}"),
                found: fv.map(|v| v.to_string()).unwrap_or_else(|| "missing".into()),
                expected: ev.to_string(),
            });
        }
    }
    None
}

/// Loads a checkpoint into a fresh model. With `expected`, the stored
/// config must match it field for field.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(DecisionModel, CheckpointMeta)> {
    let ck = read_checkpoint(path)?;
    if let Some(exp) = expected {
        if let Some(err) = config_mismatch(&ck.config, exp) {
            return Err(err);
        }
    }
    let mut model = DecisionModel::new(&ck.config, 0)?;
    load_tensors(&mut model.params, &ck.tensors)?;
    Ok((model, ck.meta))
}

/// Overwrites every parameter of `params` from `tensors` by name.
pub fn load_tensors(params: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(Error::CheckpointMismatch {
            field: "tensor count".into(),
            found: tensors.len().to_string(),
            expected: params.len().to_string(),
        });
    }
    for (name, t) in tensors {
        let Some(id) = params.id(name) else {
            return Err(Error::CheckpointMismatch {
                field: name.clone(),
                found: "present".into(),
                expected: "absent".into(),
            });
        };
        if params.get(id).shape() != t.shape() {
            return Err(Error::CheckpointMismatch {
                field: name.clone(),
                found: format!("{:?}", t.shape()),
                expected: format!("{:?}", params.get(id).shape()),
            });
        }
        *params.get_mut(id) = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajmod::RtgTrajectory;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_positions: 64,
            max_timestep: 32,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = DecisionModel::new(&cfg(), 3).unwrap();
        let meta = CheckpointMeta {
            global_step: 12,
            config_hash: "abc".into(),
            seed: 3,
        };
        save_checkpoint(&p, &m, &meta).unwrap();
        let (back, meta2) = load_checkpoint(&p, Some(&cfg())).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back.params, m.params);
        let prompt = m.vocab.tokenize(crate::backbone::vocab::COMPACT_PROMPT);
        let t = RtgTrajectory::new(4, 4, 2, vec![0.1; 8], vec![0.2; 4], vec![0.0; 2], vec![3.0; 2]).unwrap();
        let a = m.predict(&prompt, &t, 4).unwrap();
        let b = back.predict(&prompt, &t, 4).unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_and_wrong_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = DecisionModel::new(&cfg(), 3).unwrap();
        save_checkpoint(&p, &m, &CheckpointMeta::default()).unwrap();
        let bytes = fs::read(&p).unwrap();
        let q = dir.path().join("t.ckpt");
        fs::write(&q, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_checkpoint(&q, None), Err(Error::Corrupt(_))));
        let other = ModelConfig { d_model: 16, ..cfg() };
        match load_checkpoint(&p, Some(&other)) {
            Err(Error::CheckpointMismatch { field, .. }) => assert_eq!(field, "model.d_model"),
            r => panic!("unexpected {r:?}"),
        }
    }
}
