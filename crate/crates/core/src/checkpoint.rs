//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! "DBFEMCKP"            8-byte magic
//! version               u32
//! precision             u8   0 = f32, 1 = f64
//! config length         u32, then the ModelConfig as JSON
//! parameter count       u32
//! per parameter         name length u32, name bytes, rank u32,
//!                       extents u64 * rank, values in the stored precision
//! sha256                32 bytes over everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Dbfem, DbfemNet, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Precision, Real, Tensor};

const MAGIC: &[u8; 8] = b"DBFEMCKP";
pub const VERSION: u32 = 1;

/// A model loaded in whatever precision it was saved in.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Single(Dbfem<f32>),
    Double(Dbfem<f64>),
}

impl AnyModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Single(m) => m.config(),
            AnyModel::Double(m) => m.config(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            AnyModel::Single(_) => Precision::Single,
            AnyModel::Double(_) => Precision::Double,
        }
    }

    /// Converts to precision `T` (exact when widening or unchanged).
    pub fn into_precision<T: Real>(self) -> Dbfem<T> {
        match self {
            AnyModel::Single(m) => m.cast(),
            AnyModel::Double(m) => m.cast(),
        }
    }
}

/// Serialises a model to bytes.
pub fn to_bytes<T: Real>(model: &Dbfem<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match T::PRECISION {
        Precision::Single => 0,
        Precision::Double => 1,
    });
    let config = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let params = model.params();
    out.extend_from_slice(&(params.layout().len() as u32).to_le_bytes());
    for (spec, t) in params.layout().specs().iter().zip(params.tensors()) {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match T::PRECISION {
                Precision::Single => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                Precision::Double => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save<T: Real>(path: &Path, model: &Dbfem<T>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_params<T: Real>(r: &mut Reader<'_>, net: &DbfemNet, width: usize) -> Result<ParamStore<T>> {
    let count = r.u32()? as usize;
    let specs = net.layout().specs();
    if count != specs.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} parameter arrays, the configuration declares {}",
            specs.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for spec in specs {
        let len = r.u32()? as usize;
        let name =
            std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != spec.name {
            return Err(Error::Checkpoint(format!(
                "expected parameter `{}`, found `{name}`",
                spec.name
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != spec.shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}`: stored shape {shape:?}, expected {:?}",
                spec.shape
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * width)?;
        let data = raw
            .chunks(width)
            .map(|c| match width {
                4 => T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                _ => T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    ParamStore::from_tensors(net.layout(), tensors).map_err(Error::Checkpoint)
}

/// Parses checkpoint bytes, verifying the checksum and the parameter layout.
pub fn from_bytes(bytes: &[u8]) -> Result<AnyModel> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let precision = r.take(1)?[0];
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
    let net = DbfemNet::new(&config)?;
    let model = match precision {
        0 => AnyModel::Single(Dbfem::from_parts(net.clone(), read_params::<f32>(&mut r, &net, 4)?)?),
        1 => AnyModel::Double(Dbfem::from_parts(net.clone(), read_params::<f64>(&mut r, &net, 8)?)?),
        p => return Err(Error::Checkpoint(format!("unknown precision tag {p}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<AnyModel> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    from_bytes(&bytes)
}

/// Loads a checkpoint that must have been saved with exactly `expected`.
pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<AnyModel> {
    let model = load(path)?;
    if model.config() != expected {
        return Err(Error::Checkpoint(format!(
            "{} was saved for a different model configuration",
            path.display()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_precisions() {
        let m = Dbfem::<f64>::new(&ModelConfig::tiny(), 3).unwrap();
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(from_bytes(&bytes).unwrap(), AnyModel::Double(m.clone()));
        let s: Dbfem<f32> = m.cast();
        assert_eq!(from_bytes(&to_bytes(&s).unwrap()).unwrap(), AnyModel::Single(s));
    }

    #[test]
    fn corruption_detected() {
        let m = Dbfem::<f32>::new(&ModelConfig::tiny(), 3).unwrap();
        let mut bytes = to_bytes(&m).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(from_bytes(b"nonsense").is_err());
    }
}
