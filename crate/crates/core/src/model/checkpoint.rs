//! Binary checkpoint format.
//!
//! ```text
//! "IMBF" | u32 version | u32 len | ModelConfig JSON | u32 n_tensors |
//!   n_tensors × (u32 name_len | name | u32 rank | rank × u32 extent | f32 data)
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::data::MAGIC;
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint<F: Scalar>(model: &Model<F>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(&cfg);
    put_u32(&mut out, model.params().len())?;
    for (name, t) in model.params().iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &e in t.shape() {
            put_u32(&mut out, e)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&v.cast::<f32>().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.fail(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint<F: Scalar>(bytes: &[u8], path: &Path) -> Result<Model<F>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.fail("bad magic"));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| r.fail(format!("bad model config: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamSet::<F>::default();
    for _ in 0..count {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel.ok_or_else(|| r.fail(format!("tensor {name} too large")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.fail("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()).cast::<F>())
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| r.fail(format!("tensor {name}: {e}")))?;
        params.push(name, t);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_params(config, params).map_err(|e| r.fail(e.to_string()))
}

impl<F: Scalar> Model<F> {
    /// Writes the checkpoint atomically; parameters are stored as f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_atomic(path, &encode_checkpoint(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        decode_checkpoint(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionKind;

    fn cfg() -> ModelConfig {
        ModelConfig {
            hidden: 5,
            n_transformer_layers: 1,
            n_classes: 3,
            fusion: FusionKind::LowRankTensor,
            lmf_rank: 2,
            seed: 11,
            ..ModelConfig::new(4, 3)
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.imbf");
        let m = Model::<f32>::new(cfg()).unwrap();
        m.save(&path).unwrap();
        let back = Model::<f32>::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(fs::read(&path).unwrap(), encode_checkpoint(&back).unwrap());
    }

    #[test]
    fn header_layout() {
        let m = Model::<f32>::new(cfg()).unwrap();
        let b = encode_checkpoint(&m).unwrap();
        assert_eq!(&b[..4], b"IMBF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
    }

    #[test]
    fn rejects_corruption() {
        let p = Path::new("x");
        let m = Model::<f32>::new(cfg()).unwrap();
        let b = encode_checkpoint(&m).unwrap();
        assert!(decode_checkpoint::<f32>(&b[..b.len() - 1], p).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_checkpoint::<f32>(&extra, p).is_err());
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(decode_checkpoint::<f32>(&magic, p).is_err());
        assert!(matches!(Model::<f32>::load(Path::new("/nonexistent/m.imbf")), Err(Error::MissingFile(_))));
    }
}
