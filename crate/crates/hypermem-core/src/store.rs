//! Line-delimited record files and the binary embedding sidecar.
//!
//! Every persistent structure in the project (chunks, graph, memory
//! snapshots, traces) is written as JSON records, one per line, so files
//! can be inspected and diffed with ordinary tools. Embedding vectors are
//! kept out of the JSON: records carry a byte offset into a sidecar file
//! holding little-endian f32 values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{EngineError, Result};

/// Current on-disk schema version for all stores.
pub const STORE_VERSION: u32 = 1;

/// Writes records as one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL file into typed records. The whole file is parsed before
/// anything is returned, so a corrupt line never yields a partial load.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| EngineError::CorruptStore {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Appends fixed-dimension f32 vectors to a sidecar file, returning the
/// byte offset of each vector.
pub struct SidecarWriter {
    out: BufWriter<File>,
    offset: u64,
    dim: usize,
}

impl SidecarWriter {
    pub fn create(path: &Path, dim: usize) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
            offset: 0,
            dim,
        })
    }

    /// Writes one vector and returns its byte offset.
    pub fn push(&mut self, values: &[f32]) -> Result<u64> {
        if values.len() != self.dim {
            return Err(EngineError::DimensionMismatch {
                left: values.len(),
                right: self.dim,
            });
        }
        let at = self.offset;
        for v in values {
            self.out.write_all(&v.to_le_bytes())?;
        }
        self.offset += (self.dim * 4) as u64;
        Ok(at)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Random-access reader over a sidecar file.
pub struct SidecarReader {
    file: File,
    dim: usize,
    len: u64,
}

impl SidecarReader {
    pub fn open(path: &Path, dim: usize) -> Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        if dim > 0 && len % (dim as u64 * 4) != 0 {
            return Err(EngineError::CorruptStore {
                path: path.display().to_string(),
                reason: format!("file length {len} is not a multiple of the vector size"),
            });
        }
        Ok(Self { file, dim, len })
    }

    /// Reads the vector stored at `offset`.
    pub fn read_at(&mut self, offset: u64) -> Result<Vec<f32>> {
        let bytes = self.dim as u64 * 4;
        if offset + bytes > self.len {
            return Err(EngineError::CorruptStore {
                path: "<sidecar>".to_string(),
                reason: format!("offset {offset} past end of sidecar"),
            });
        }
        self.file.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; bytes as usize];
        self.file.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Rec {
        id: String,
        n: u32,
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recs.jsonl");
        let recs = vec![
            Rec { id: "a".into(), n: 1 },
            Rec { id: "b".into(), n: 2 },
        ];
        write_jsonl(&path, &recs).unwrap();
        let back: Vec<Rec> = read_jsonl(&path).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn jsonl_corrupt_line_fails_whole_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recs.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"n\":1}\nnot json\n").unwrap();
        let res: Result<Vec<Rec>> = read_jsonl(&path);
        assert!(matches!(res, Err(EngineError::CorruptStore { .. })));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut w = SidecarWriter::create(&path, 3).unwrap();
        let o1 = w.push(&[1.0, 2.0, 3.0]).unwrap();
        let o2 = w.push(&[-1.5, 0.0, 4.25]).unwrap();
        w.finish().unwrap();

        let mut r = SidecarReader::open(&path, 3).unwrap();
        assert_eq!(r.read_at(o1).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(r.read_at(o2).unwrap(), vec![-1.5, 0.0, 4.25]);
        assert!(r.read_at(o2 + 12).is_err());
    }
}
