//! Checkpoint container: magic "IDECKPT1", u32 version, a named-tensor
//! table (name, dtype code, rank, extents, little-endian f32 payload),
//! and a trailing CRC32 over the table region. Bit-exact round trips.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{Array, ParamStore};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"IDECKPT1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: file is corrupt")]
    Corrupt,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CkptError {
    CkptError::Io { path: path.display().to_string(), source }
}

/// CRC-32 (IEEE 802.3, reflected, poly 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFFFFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFFFFFF
}

/// Serialize parameters plus numeric metadata (stored as meta.* scalar
/// tensors). Names must be unique, which the stores guarantee; a meta
/// key colliding with a parameter is a caller bug.
pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore<f32>,
    meta: &BTreeMap<String, f64>,
) -> Result<(), CkptError> {
    let mut table: BTreeMap<String, Array<f32>> = BTreeMap::new();
    for (name, p) in params.iter() {
        assert!(!name.starts_with("meta."), "parameter name collision with meta namespace: {name}");
        table.insert(name.to_string(), p.value.clone());
    }
    for (k, v) in meta {
        let name = format!("meta.{k}");
        assert!(
            table.insert(name.clone(), Array::scalar(*v as f32)).is_none(),
            "tensor name collision on save: {name}"
        );
    }
    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, arr) in &table {
        let nb = name.as_bytes();
        body.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        body.extend_from_slice(nb);
        body.push(DTYPE_F32);
        body.extend_from_slice(&(arr.shape.len() as u32).to_le_bytes());
        for &e in &arr.shape {
            body.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &arr.data {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&body);
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    f.write_all(&VERSION.to_le_bytes()).map_err(|e| io_err(path, e))?;
    f.write_all(&body).map_err(|e| io_err(path, e))?;
    f.write_all(&crc.to_le_bytes()).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Load a checkpoint: all tensors unfrozen (callers freeze by prefix),
/// meta.* entries split out into the returned map.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, BTreeMap<String, f64>), CkptError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CkptError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CkptError::Version(version));
    }
    let body = &bytes[12..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32(body) != stored_crc {
        return Err(CkptError::Corrupt);
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CkptError> {
        if *pos + n > body.len() {
            return Err(CkptError::Malformed("truncated table".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut params = ParamStore::new();
    let mut meta = BTreeMap::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
            .map_err(|_| CkptError::Malformed("non-utf8 tensor name".into()))?;
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(CkptError::Malformed(format!("unknown dtype code {dtype}")));
        }
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(key) = name.strip_prefix("meta.") {
            if numel != 1 {
                return Err(CkptError::Malformed(format!("meta entry {name} is not scalar")));
            }
            meta.insert(key.to_string(), data[0] as f64);
        } else {
            params.insert(&name, Array::from_vec(shape, data));
        }
    }
    if pos != body.len() {
        return Err(CkptError::Malformed("trailing bytes after table".into()));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn demo_store() -> (ParamStore<f32>, BTreeMap<String, f64>) {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::from_seed(17);
        store.insert("a.w", Array::from_vec(vec![2, 3], rng.normal_vec(6, 1.0)));
        store.insert("b.bias", Array::from_vec(vec![4], rng.normal_vec(4, 1.0)));
        let mut meta = BTreeMap::new();
        meta.insert("size".to_string(), 64.0);
        meta.insert("frames".to_string(), 8.0);
        (store, meta)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let (store, meta) = demo_store();
        save_checkpoint(&p1, &store, &meta).unwrap();
        let (loaded, meta2) = load_checkpoint(&p1).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(loaded.get("a.w"), store.get("a.w"));
        save_checkpoint(&p2, &loaded, &meta2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn flipped_payload_byte_fails_crc() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let (store, meta) = demo_store();
        save_checkpoint(&p, &store, &meta).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&p, bytes).unwrap();
        match load_checkpoint(&p) {
            Err(CkptError::Corrupt) => {}
            other => panic!("expected corrupt-file error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ckpt");
        let (store, meta) = demo_store();
        save_checkpoint(&p, &store, &meta).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 9;
        std::fs::write(&p, bytes).unwrap();
        match load_checkpoint(&p) {
            Err(CkptError::Version(9)) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    #[should_panic(expected = "name collision")]
    fn meta_key_colliding_with_tensor_is_a_contract_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let mut store: ParamStore<f32> = ParamStore::new();
        store.insert("meta.size", Array::scalar(1.0));
        let _ = save_checkpoint(&p, &store, &BTreeMap::new());
    }
}
