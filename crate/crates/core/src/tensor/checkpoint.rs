//! Checkpoint container: a flat little-endian binary format holding named
//! f32 tensors.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "VXG1" (4 bytes)
//! repeated until EOF:
//!   name_len  u32
//!   name      name_len bytes, UTF-8
//!   rank      u32
//!   extents   rank * u32
//!   data      prod(extents) * f32, little-endian
//! ```
//!
//! Entries keep their write order; round-trips are bit-exact. Values are
//! stored as `f32` regardless of the in-memory scalar type — `f32` is the
//! training precision, and the double-precision path exists only for
//! verification, not for persisted models.

use super::Tensor;
use crate::{Error, Result, Scalar};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"VXG1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    for e in entries {
        let expect: usize = e.shape.iter().product();
        if expect != e.data.len() {
            return Err(Error::shape(format!(
                "checkpoint entry '{}': shape {:?} does not match {} values",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Entry>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(format!(
                "checkpoint '{}': truncated at byte {}",
                path.display(),
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4)?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "checkpoint '{}': bad magic {:?}, expected {:?}",
            path.display(),
            magic,
            MAGIC
        )));
    }
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let mut entries = Vec::new();
    while pos < bytes.len() {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::format("checkpoint: parameter name is not UTF-8".to_string()))?;
        let rank = read_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    Ok(entries)
}

/// Snapshot named parameters (plus any extra named buffers such as
/// optimizer state) into checkpoint entries.
pub fn entries_from_params<T: Scalar>(params: &[(String, Tensor<T>)]) -> Vec<Entry> {
    params
        .iter()
        .map(|(name, p)| Entry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            data: p.data().iter().map(|&v| v.to_f32()).collect(),
        })
        .collect()
}

/// Load checkpoint entries into an existing parameter set, matched by name.
/// Every parameter must be present with the right shape; entries that match
/// no parameter are ignored (they may belong to the optimizer or another
/// stage's modules).
pub fn apply_to_params<T: Scalar>(entries: &[Entry], params: &[(String, Tensor<T>)]) -> Result<()> {
    let by_name: std::collections::HashMap<&str, &Entry> =
        entries.iter().map(|e| (e.name.as_str(), e)).collect();
    for (name, p) in params {
        let e = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::format(format!("checkpoint is missing parameter '{name}'")))?;
        if e.shape != p.shape() {
            return Err(Error::shape(format!(
                "checkpoint parameter '{name}': shape {:?} does not match model shape {:?}",
                e.shape,
                p.shape()
            )));
        }
        let vals: Vec<T> = e.data.iter().map(|&v| T::from_f32(v)).collect();
        p.set_data(&vals);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("vxg1_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.vxg");
        let entries = vec![
            Entry {
                name: "encoder.conv1.w".into(),
                shape: vec![2, 3],
                data: vec![1.0, -2.5, 3.25e-7, f32::MIN_POSITIVE, 1e30, -0.0],
            },
            Entry { name: "b".into(), shape: vec![1], data: vec![42.0] },
        ];
        save(&path, &entries).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].name, "encoder.conv1.w");
        assert_eq!(back[0].shape, vec![2, 3]);
        for (a, b) in back[0].data.iter().zip(&entries[0].data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Order preserved.
        assert_eq!(back[1].name, "b");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let dir = std::env::temp_dir().join(format!("vxg1_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.vxg");
        std::fs::write(&path, b"NOPE").unwrap();
        match load(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = std::env::temp_dir().join(format!("vxg1_trunc_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.vxg");
        let entries = vec![Entry { name: "w".into(), shape: vec![4], data: vec![1.0; 4] }];
        save(&path, &entries).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
