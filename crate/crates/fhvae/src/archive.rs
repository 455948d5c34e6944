//! FARC feature archives: a little-endian binary container holding float32
//! frame matrices keyed by utterance id.
//!
//! Layout: magic `FARC`, u32 version (currently 1), u32 record count, then per
//! record `u32 id_len | id bytes (UTF-8) | u32 T | u32 D | T*D f32 values`
//! in row-major order. All integers are little-endian.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::collections::HashSet;
use std::path::Path;

pub const FARC_MAGIC: [u8; 4] = *b"FARC";
pub const FARC_VERSION: u32 = 1;

/// Upper bound on the id field; anything longer is a corrupt header.
pub(crate) const MAX_ID_LEN: u32 = 4096;

/// One stored frame matrix (T frames by D dims).
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveRecord {
    pub utt_id: String,
    pub frames: Array2<f32>,
}

impl ArchiveRecord {
    pub fn new(utt_id: impl Into<String>, frames: Array2<f32>) -> Result<Self> {
        let utt_id = utt_id.into();
        if utt_id.is_empty() {
            return Err(Error::Data("archive record with empty id".into()));
        }
        if utt_id.len() > MAX_ID_LEN as usize {
            return Err(Error::Data(format!(
                "archive record id of {} bytes exceeds the {MAX_ID_LEN}-byte cap",
                utt_id.len()
            )));
        }
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::Data(format!(
                "archive record '{utt_id}' has empty shape {}x{}",
                frames.nrows(),
                frames.ncols()
            )));
        }
        Ok(ArchiveRecord { utt_id, frames })
    }
}

/// An ordered collection of records with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureArchive {
    records: Vec<ArchiveRecord>,
}

impl FeatureArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<ArchiveRecord>) -> Result<Self> {
        let mut archive = Self::new();
        for r in records {
            archive.push(r)?;
        }
        Ok(archive)
    }

    pub fn push(&mut self, record: ArchiveRecord) -> Result<()> {
        if self.records.iter().any(|r| r.utt_id == record.utt_id) {
            return Err(Error::Data(format!(
                "duplicate archive record id '{}'",
                record.utt_id
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[ArchiveRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<&ArchiveRecord> {
        self.records.iter().find(|r| r.utt_id == utt_id)
    }
}

/// Serialize an archive to bytes.
pub fn archive_to_bytes(archive: &FeatureArchive) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&FARC_MAGIC);
    out.extend_from_slice(&FARC_VERSION.to_le_bytes());
    out.extend_from_slice(&(archive.records.len() as u32).to_le_bytes());
    for r in &archive.records {
        out.extend_from_slice(&(r.utt_id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.utt_id.as_bytes());
        out.extend_from_slice(&(r.frames.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(r.frames.ncols() as u32).to_le_bytes());
        for v in r.frames.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Byte-slice cursor that reports the offset of whatever failed to parse.
pub(crate) struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    pub(crate) fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub(crate) fn read_u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn read_u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn read_u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    pub(crate) fn read_f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("eight bytes")))
    }
}

/// Parse an archive from bytes, validating structure as it goes. Every
/// failure carries the byte offset where parsing stopped.
pub fn archive_from_bytes(data: &[u8]) -> Result<FeatureArchive> {
    let mut cur = Cursor::new(data);
    let magic = cur.take(4, "magic")?;
    if magic != FARC_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:02x?}, expected {FARC_MAGIC:02x?}"),
        });
    }
    let version = cur.read_u32("version")?;
    if version != FARC_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported archive version {version}"),
        });
    }
    let count = cur.read_u32("record count")? as usize;
    // Each record occupies at least 12 header bytes, so a count beyond
    // remaining/12 cannot be satisfied; reject before reserving anything.
    if count > cur.remaining() / 12 + 1 {
        return Err(cur.err(format!(
            "record count {count} impossible for {} remaining bytes",
            cur.remaining()
        )));
    }

    let mut records = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for idx in 0..count {
        let id_len = cur.read_u32("id length")?;
        if id_len == 0 || id_len > MAX_ID_LEN {
            return Err(cur.err(format!(
                "record {idx}: id length {id_len} outside 1..={MAX_ID_LEN}"
            )));
        }
        let id_bytes = cur.take(id_len as usize, "record id")?;
        let utt_id = std::str::from_utf8(id_bytes)
            .map_err(|e| cur.err(format!("record {idx}: id is not UTF-8 ({e})")))?
            .to_string();
        if !seen.insert(utt_id.clone()) {
            return Err(cur.err(format!("record {idx}: duplicate id '{utt_id}'")));
        }
        let t = cur.read_u32("frame count")? as usize;
        let d = cur.read_u32("frame dim")? as usize;
        if t == 0 || d == 0 {
            return Err(cur.err(format!("record {idx} ('{utt_id}'): empty shape {t}x{d}")));
        }
        let n_values = t
            .checked_mul(d)
            .ok_or_else(|| cur.err(format!("record {idx}: shape {t}x{d} overflows")))?;
        let n_bytes = n_values
            .checked_mul(4)
            .ok_or_else(|| cur.err(format!("record {idx}: payload size overflows")))?;
        let payload = cur.take(n_bytes, "frame values")?;
        let mut values = Vec::with_capacity(n_values);
        for chunk in payload.chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let frames = Array2::from_shape_vec((t, d), values)
            .expect("shape matches value count by construction");
        records.push(ArchiveRecord { utt_id, frames });
    }
    if cur.remaining() > 0 {
        return Err(cur.err(format!(
            "{} trailing bytes after final record",
            cur.remaining()
        )));
    }
    Ok(FeatureArchive { records })
}

pub fn write_archive(path: &Path, archive: &FeatureArchive) -> Result<()> {
    std::fs::write(path, archive_to_bytes(archive)).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<FeatureArchive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    archive_from_bytes(&bytes)
}
