//! `ANNV` feature files: magic, u32 version, u32 rows, u32 cols,
//! u32 channels, row-major little-endian f32 payload, then a CRC32 (IEEE)
//! of every preceding byte.

use std::fs;
use std::path::Path;

use super::AnnotationSet;
use crate::embedding::Reader;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ANNV";
const VERSION: u32 = 1;

pub fn save_features(path: &Path, a: &AnnotationSet) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + a.data().len() * 4);
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, a.rows() as u32, a.cols() as u32, a.dim() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for x in a.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a feature file; the image id is the file stem.
pub fn load_features(path: &Path) -> Result<AnnotationSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 {
        return Err(Error::format(path, "file shorter than header"));
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic, expected ANNV"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let channels = r.u32()? as usize;
    if rows == 0 || cols == 0 || channels == 0 {
        return Err(Error::format(path, format!("empty grid {rows}x{cols}x{channels}")));
    }
    let n = rows
        .checked_mul(cols)
        .and_then(|x| x.checked_mul(channels))
        .ok_or_else(|| Error::format(path, "grid size overflows"))?;
    if bytes.len() != 20 + n * 4 + 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes for a {rows}x{cols}x{channels} grid, found {}", 24 + n * 4, bytes.len()),
        ));
    }
    let payload = r.take(n * 4)?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    AnnotationSet::new(id, rows, cols, channels, data)
}
