//! Binary checkpoint container.
//!
//! ```text
//! "LPICKPT1"                     magic
//! u32                            format version
//! u64, bytes, [u8; 32]           manifest JSON length, manifest, its SHA-256
//! per array, in manifest order:
//!   u32, bytes                   name length, name
//!   u32, u64 * rank              rank, dims
//!   f64 * numel                  values
//! ```
//!
//! Integers and floats are little-endian. The manifest lists every array
//! with its shape and the SHA-256 of its value bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"LPICKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

/// Container manifest: caller metadata plus the array table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest<M> {
    pub format_version: u32,
    pub meta: M,
    pub arrays: Vec<ArrayEntry>,
}

fn value_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Serialize `arrays` with caller metadata `meta`.
pub fn encode_checkpoint<M: Serialize>(meta: &M, arrays: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let entries: Vec<ArrayEntry> = arrays
        .iter()
        .map(|(name, t)| ArrayEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            sha256: hex::encode(Sha256::digest(value_bytes(t))),
        })
        .collect();
    for (i, e) in entries.iter().enumerate() {
        if entries[..i].iter().any(|p| p.name == e.name) {
            return Err(Error::Checkpoint(format!("duplicate array name {}", e.name)));
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        meta,
        arrays: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&Sha256::digest(&json));
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&value_bytes(t));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Parse and verify a container: magic, version, manifest checksum, and
/// every array's name, shape, length and checksum.
pub fn decode_checkpoint<M: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<(M, Vec<(String, Tensor)>)> {
    let head = |m: &str| Error::Checkpoint(m.to_string());
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(CKPT_MAGIC.as_slice()) {
        return Err(head("bad magic (not an LPICKPT1 file)"));
    }
    let version = r.u32().ok_or_else(|| head("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(head(&format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let len = r.u64().ok_or_else(|| head("truncated header"))?;
    let json = usize::try_from(len)
        .ok()
        .and_then(|n| r.take(n))
        .ok_or_else(|| head("truncated manifest"))?;
    let digest = r.take(32).ok_or_else(|| head("truncated manifest checksum"))?;
    if Sha256::digest(json).as_slice() != digest {
        return Err(head("manifest checksum mismatch"));
    }
    let manifest: Manifest<M> = serde_json::from_slice(json).map_err(|e| head(&format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(head("manifest version disagrees with header"));
    }

    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        let fail = |msg: String| Error::CheckpointArray {
            array: entry.name.clone(),
            msg,
        };
        let truncated = || fail("truncated".into());
        let name_len = r.u32().ok_or_else(truncated)? as usize;
        let name = r.take(name_len).ok_or_else(truncated)?;
        if name != entry.name.as_bytes() {
            return Err(fail(format!("record is named `{}`", String::from_utf8_lossy(name))));
        }
        let rank = r.u32().ok_or_else(truncated)? as usize;
        if rank != entry.shape.len() {
            return Err(fail(format!("rank {rank}, manifest says {}", entry.shape.len())));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(truncated)? as usize);
        }
        if shape != entry.shape {
            return Err(fail(format!("shape {shape:?}, manifest says {:?}", entry.shape)));
        }
        let want = shape.iter().product::<usize>() * 8;
        let have = bytes.len() - r.pos;
        let data = r
            .take(want)
            .ok_or_else(|| fail(format!("truncated: expected {want} value bytes, found {have}")))?;
        if hex::encode(Sha256::digest(data)) != entry.sha256 {
            return Err(fail("checksum mismatch (corrupted values)".into()));
        }
        let values = data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        arrays.push((entry.name.clone(), Tensor::new(shape, values)?));
    }
    if r.pos != bytes.len() {
        return Err(head(&format!("{} trailing bytes after the last array", bytes.len() - r.pos)));
    }
    Ok((manifest.meta, arrays))
}

/// Write through a temporary file so an interrupted save never leaves a
/// partial checkpoint at `path`.
pub fn write_checkpoint<M: Serialize>(path: &Path, meta: &M, arrays: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_checkpoint(meta, arrays)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<M: for<'de> Deserialize<'de>>(path: &Path) -> Result<(M, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a".into(), Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]).unwrap()),
            ("b.c".into(), Tensor::scalar(std::f64::consts::PI)),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = encode_checkpoint(&"meta".to_string(), &sample()).unwrap();
        let (meta, arrays): (String, _) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(meta, "meta");
        for ((n1, t1), (n2, t2)) in sample().iter().zip(&arrays) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let bytes = encode_checkpoint(&0u8, &sample()).unwrap();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(decode_checkpoint::<u8>(&bad).is_err(), "flip at byte {i} undetected");
        }
    }

    #[test]
    fn corrupted_values_name_the_array() {
        let bytes = encode_checkpoint(&0u8, &sample()).unwrap();
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x80;
        let err = decode_checkpoint::<u8>(&bad).unwrap_err();
        assert!(matches!(&err, Error::CheckpointArray { array, .. } if array == "b.c"), "{err}");
    }

    #[test]
    fn truncation_names_the_array() {
        let bytes = encode_checkpoint(&0u8, &sample()).unwrap();
        let err = decode_checkpoint::<u8>(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("b.c") && err.to_string().contains("truncated"), "{err}");
        // Record `b.c` is 19 bytes; cut 10 bytes into the values of `a`.
        let cut = bytes.len() - 19 - 10;
        let err = decode_checkpoint::<u8>(&bytes[..cut]).unwrap_err();
        assert!(matches!(&err, Error::CheckpointArray { array, .. } if array == "a"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = encode_checkpoint(&0u8, &sample()).unwrap();
        bytes[8] = 9;
        assert!(decode_checkpoint::<u8>(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut arrays = sample();
        arrays.push(arrays[0].clone());
        assert!(encode_checkpoint(&0u8, &arrays).is_err());
    }
}
