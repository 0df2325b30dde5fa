//! Binary index file, little-endian:
//! `b"MVIX"`, u32 version, u32 d, u32 count, 32-byte fingerprint,
//! `count × d` f32 row-major, then `count` × (u32 byte length, UTF-8 id).

use std::fs;
use std::path::Path;

use super::RetrievalIndex;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MVIX";
const VERSION: u32 = 1;

pub fn write_index(index: &RetrievalIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(44 + index.embeddings.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(index.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(index.len() as u32).to_le_bytes());
    buf.extend_from_slice(&index.params_fingerprint);
    for x in &index.embeddings {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for id in &index.evidence_ids {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptFile("index file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_index(path: impl AsRef<Path>) -> Result<RetrievalIndex> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptFile(format!("{} is not an index file", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let params_fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let raw = r.take(count * dim * 4)?;
    let embeddings = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let evidence_ids = (0..count)
        .map(|_| {
            let n = r.u32()? as usize;
            String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::CorruptFile(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::CorruptFile("trailing bytes after id table".into()));
    }
    Ok(RetrievalIndex {
        evidence_ids,
        dim,
        embeddings,
        params_fingerprint,
    })
}
