//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "TDSEGCKP"
//! 8       4     format version, u32 = 1
//! 12      4     parameter count, u32
//! 16      ...   index entries, one per parameter, in name order:
//!                 u32 name length, name bytes (UTF-8),
//!                 u32 rank, u64 × rank extents,
//!                 u64 byte offset of the value blob relative to blob base
//! ...     ...   blob section: f32 little-endian values, concatenated
//! ```
//!
//! The blob base is the first byte after the last index entry. Loaders
//! verify magic, version, and that every blob lies inside the file; model
//! loaders must additionally reject shape mismatches against their config.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::tensor::Params;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TDSEGCKP";
const VERSION: u32 = 1;

/// Serializes parameters (f32) to `path`.
pub fn save(path: &Path, params: &Params<f32>) -> Result<()> {
    let mut index = Vec::new();
    let mut blobs = Vec::new();
    for (name, t) in params.iter() {
        index.extend_from_slice(&(name.len() as u32).to_le_bytes());
        index.extend_from_slice(name.as_bytes());
        index.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            index.extend_from_slice(&(d as u64).to_le_bytes());
        }
        index.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
        for &v in t.data() {
            blobs.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(16 + index.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.num_tensors() as u32).to_le_bytes());
    out.extend_from_slice(&index);
    out.extend_from_slice(&blobs);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads all parameters: (name, shape, values).
pub fn load(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let bytes = fs::read(path)?;
    let fail = |msg: &str| Error::Data(format!("checkpoint {}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[0..8] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let mut pos = 16;
    let mut entries: Vec<(String, Vec<usize>, u64)> = Vec::with_capacity(count);
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint {}: truncated at byte {}",
                path.display(),
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| fail("non-UTF-8 parameter name"))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let offset = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        entries.push((name, shape, offset));
    }
    let blob_base = pos;
    let mut out = Vec::with_capacity(count);
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let start = blob_base + offset as usize;
        let end = start + 4 * n;
        if end > bytes.len() {
            return Err(fail(&format!("blob for {name} out of bounds")));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(f32::from_le_bytes(bytes[start + 4 * i..start + 4 * i + 4].try_into().unwrap()));
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn roundtrip_preserves_names_shapes_bits() {
        let dir = std::env::temp_dir().join("ckpt_roundtrip_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");

        let mut p = Params::new();
        p.insert("b.bias", Tensor::param(&[3], vec![0.25f32, -1.5, 3.0e-8]));
        p.insert("a.weight", Tensor::param(&[2, 2], vec![1.0f32, 2.0, -0.5, 0.125]));
        save(&path, &p).unwrap();

        let loaded = load(&path).unwrap();
        // BTreeMap order: a.weight before b.bias.
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "a.weight");
        assert_eq!(loaded[0].1, vec![2, 2]);
        assert_eq!(loaded[0].2, vec![1.0, 2.0, -0.5, 0.125]);
        assert_eq!(loaded[1].0, "b.bias");
        assert_eq!(loaded[1].2, vec![0.25, -1.5, 3.0e-8]);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = std::env::temp_dir().join("ckpt_determinism_test");
        std::fs::create_dir_all(&dir).unwrap();
        let (p1, p2) = (dir.join("a.ckpt"), dir.join("b.ckpt"));
        let mut p = Params::new();
        p.insert("w", Tensor::param(&[4], vec![0.1f32, 0.2, 0.3, 0.4]));
        save(&p1, &p).unwrap();
        save(&p2, &p).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_corrupt_magic() {
        let dir = std::env::temp_dir().join("ckpt_magic_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxx").unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn rejects_truncated_blob() {
        let dir = std::env::temp_dir().join("ckpt_trunc_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");
        let mut p = Params::new();
        p.insert("w", Tensor::param(&[8], vec![1.0f32; 8]));
        save(&path, &p).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load(&path).is_err());
    }
}
