//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic "OSARCKPT" | u32 version | 32-byte architecture hash | u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u32 rank | u64 dims[rank] | f32 values
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::{AarnArch, AarnModel};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

const MAGIC: &[u8; 8] = b"OSARCKPT";
const VERSION: u32 = 1;

/// Digest of the architecture description and every parameter name and shape.
pub fn architecture_hash(model: &AarnModel<f32>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(model.arch().describe().as_bytes());
    for (name, t) in model.params().iter() {
        h.update(name.as_bytes());
        h.update(format!("{:?};", t.shape()).as_bytes());
    }
    h.finalize().into()
}

pub fn encode(model: &AarnModel<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.params().numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&architecture_hash(model));
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Rebuilds a model of architecture `arch` from [`encode`] output.
pub fn decode(bytes: &[u8], arch: AarnArch) -> Result<AarnModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut model = AarnModel::<f32>::new(arch, &mut Rng::new(0))?;
    if r.take(32)? != architecture_hash(&model) {
        return Err(Error::Format(
            "checkpoint was written for a different architecture".into(),
        ));
    }
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format("tensor dims overflow".into()))?;
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((name, Tensor::new(&dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    model.params_mut().load(named)?;
    Ok(model)
}

pub fn save(model: &AarnModel<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, arch: AarnArch) -> Result<AarnModel<f32>> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?, arch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = AarnModel::<f32>::new(AarnArch::micro(), &mut Rng::new(11)).unwrap();
        let bytes = encode(&m);
        let back = decode(&bytes, AarnArch::micro()).unwrap();
        for (a, b) in m.params().tensors().iter().zip(back.params().tensors()) {
            assert_eq!(a.data(), b.data());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&m, &path).unwrap();
        assert_eq!(encode(&load(&path, AarnArch::micro()).unwrap()), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let m = AarnModel::<f32>::new(AarnArch::micro(), &mut Rng::new(12)).unwrap();
        let bytes = encode(&m);
        assert!(decode(&bytes, AarnArch::default()).is_err());
        assert!(decode(&bytes[..bytes.len() - 1], AarnArch::micro()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, AarnArch::micro()).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra, AarnArch::micro()).is_err());
    }
}
