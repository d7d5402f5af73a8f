//! Binary weights file and its JSON sidecar.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PNPE" | u32 version (1) | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 ndim | u32 dims[ndim] | f32 data[prod(dims)]
//! ```
//!
//! The sidecar `<weights path>.json` holds the architecture and bin grid.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::arch::ArchitectureConfig;
use super::tensor::{NetworkParams, ParamTensor, Params};
use crate::bins::BinGrid;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PNPE";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_params(params: &NetworkParams) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.num_values() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Model(format!("tensor name of {} bytes is too long", name.len())))?;
        let ndim = u8::try_from(t.dims.len())
            .map_err(|_| Error::Model(format!("tensor {name} has too many dims")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(ndim);
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| Error::Model(format!("dim {d} of {name} overflows u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Model(format!("truncated payload at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<NetworkParams> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Model("bad magic; not a weights file".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Model(format!(
            "unsupported format version {version} (expected little-endian version {FORMAT_VERSION})"
        )));
    }
    let count = cur.u32()? as usize;
    let mut params = Params::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Model("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Model(format!("duplicate tensor name '{name}'")));
        }
        let ndim = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Model(format!("tensor {name} is too large")))?;
        let raw = cur.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(name, ParamTensor { dims, data })?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Model(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok(params)
}

pub fn save_params(path: impl AsRef<Path>, params: &NetworkParams) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_params(params)?).map_err(|e| Error::io(path, e))
}

/// A missing or unreadable file is reported as a model error.
pub fn load_params(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Model(format!("cannot read {}: {e}", path.display())))?;
    decode_params(&bytes).map_err(|e| match e {
        Error::Model(msg) => Error::Model(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub architecture: ArchitectureConfig,
    pub grid: BinGrid,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_sidecar(weights: &Path, sidecar: &Sidecar) -> Result<()> {
    let path = sidecar_path(weights);
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_sidecar(weights: &Path) -> Result<Sidecar> {
    let path = sidecar_path(weights);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Model(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Model(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Network;
    use proptest::prelude::*;

    fn sample() -> NetworkParams {
        let net = Network::new(ArchitectureConfig::tiny()).unwrap();
        net.init_params(3)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut p = sample();
        // Values that a lossy path would disturb.
        p.tensor_mut(0).data[0] = f32::from_bits(1);
        p.tensor_mut(0).data[1] = -0.0;
        p.tensor_mut(0).data[2] = f32::MAX;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pnpe");
        save_params(&path, &p).unwrap();
        let q = load_params(&path).unwrap();
        assert!(p.bit_eq(&q));
        assert_eq!(std::fs::read(&path).unwrap(), encode_params(&q).unwrap());
    }

    #[test]
    fn header_layout() {
        let bytes = encode_params(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"PNPE");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 10);
        let name = b"blocks.0.conv.weight";
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize, name.len());
        assert_eq!(&bytes[14..14 + name.len()], name);
        assert_eq!(bytes[14 + name.len()], 3);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode_params(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_params(&bytes), Err(Error::Model(_))));
    }

    #[test]
    fn big_endian_version_rejected() {
        let mut bytes = encode_params(&sample()).unwrap();
        bytes[4..8].copy_from_slice(&1u32.to_be_bytes());
        let err = decode_params(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let bytes = encode_params(&sample()).unwrap();
        for cut in [3, 10, 13, 40, bytes.len() - 1] {
            assert!(matches!(decode_params(&bytes[..cut]), Err(Error::Model(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_params(&extra).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = Params::new();
        p.push("a", ParamTensor::filled(&[1], 1.0f32)).unwrap();
        p.push("b", ParamTensor::filled(&[1], 2.0f32)).unwrap();
        let mut bytes = encode_params(&p).unwrap();
        // Rename "b" to "a" in place.
        let pos = bytes.iter().rposition(|&c| c == b'b').unwrap();
        bytes[pos] = b'a';
        assert!(decode_params(&bytes).unwrap_err().to_string().contains("duplicate"));
        assert!(p.push("a", ParamTensor::filled(&[1], 0.0)).is_err());
    }

    #[test]
    fn missing_file_is_model_error() {
        assert!(matches!(load_params("/no/such/model.pnpe"), Err(Error::Model(_))));
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let w = dir.path().join("m.pnpe");
        let s = Sidecar {
            architecture: ArchitectureConfig::desk(),
            grid: BinGrid::fine(),
        };
        save_sidecar(&w, &s).unwrap();
        assert_eq!(sidecar_path(&w), dir.path().join("m.pnpe.json"));
        assert_eq!(load_sidecar(&w).unwrap(), s);
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_roundtrip(
            tensors in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..3), proptest::num::f32::ANY), 0..6)
        ) {
            let mut p = Params::new();
            for (i, (dims, v)) in tensors.iter().enumerate() {
                let n: usize = dims.iter().product();
                let data = (0..n).map(|j| if j == 0 { *v } else { j as f32 * 0.5 }).collect();
                p.push(format!("t{i}"), ParamTensor { dims: dims.clone(), data }).unwrap();
            }
            let q = decode_params(&encode_params(&p).unwrap()).unwrap();
            prop_assert!(p.bit_eq(&q));
        }
    }
}
