//! "MCE1" embedding files: little-endian, magic `MCE1`, `u32` row count,
//! `u32` dimension, `count × dim` `f32` values row-major, then a `u64` byte
//! length and a UTF-8 JSON array of per-row ids.

use std::io::{Read, Write};
use std::path::Path;

use crate::embedding::UnitVector;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MCE1";
/// Rows whose norm differs from 1 by more than this are reported on load.
pub const NORM_WARN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f32>,
}

impl EmbeddingFile {
    pub fn new(dim: usize, ids: Vec<String>, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("embedding dimension must be positive".into()));
        }
        if rows.len() != ids.len() * dim {
            return Err(Error::Dimension(format!(
                "{} values for {} rows of dimension {dim}",
                rows.len(),
                ids.len()
            )));
        }
        if u32::try_from(ids.len()).is_err() || u32::try_from(dim).is_err() {
            return Err(Error::Data("embedding table too large for MCE1".into()));
        }
        Ok(EmbeddingFile { dim, ids, rows })
    }

    pub fn from_unit_vectors(ids: Vec<String>, vectors: &[UnitVector]) -> Result<Self> {
        let dim = vectors.first().map(UnitVector::dim).unwrap_or(1);
        if vectors.len() != ids.len() {
            return Err(Error::Dimension(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(Error::Dimension(format!("rows of dimension {dim} and {}", v.dim())));
        }
        let rows = vectors
            .iter()
            .flat_map(|v| v.values().iter().map(|&x| x as f32))
            .collect();
        Self::new(dim, ids, rows)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Every row normalized, plus the number of rows whose stored norm was
    /// off by more than [`NORM_WARN`].
    pub fn unit_vectors(&self) -> Result<(Vec<UnitVector>, usize)> {
        let mut off = 0;
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let raw: Vec<f64> = self.row(i).iter().map(|&x| f64::from(x)).collect();
            let v = UnitVector::normalize(&raw).map_err(|e| Error::Embed {
                phrase: self.ids[i].clone(),
                source: Box::new(e),
            })?;
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_WARN {
                off += 1;
            }
            out.push(v);
        }
        if off > 0 {
            log::warn!(
                "{off} of {} embedding rows were not unit length and were normalized",
                self.len()
            );
        }
        Ok((out, off))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.rows.len() * 4);
        for x in &self.rows {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        let trailer = serde_json::to_vec(&self.ids)?;
        w.write_all(&(trailer.len() as u64).to_le_bytes())?;
        w.write_all(&trailer)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data(format!("bad magic {magic:?}, expected MCE1")));
        }
        let count = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let n = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Data("MCE1 header overflows".into()))?;
        let mut bytes = vec![0u8; n];
        read_exact(&mut r, &mut bytes)?;
        let rows = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut len = [0u8; 8];
        read_exact(&mut r, &mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::Data("MCE1 trailer too long".into()))?;
        let mut trailer = vec![0u8; len];
        read_exact(&mut r, &mut trailer)?;
        let ids: Vec<String> =
            serde_json::from_slice(&trailer).map_err(|e| Error::Data(format!("MCE1 trailer: {e}")))?;
        if ids.len() != count {
            return Err(Error::Data(format!(
                "MCE1 trailer names {} rows, header {count}",
                ids.len()
            )));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Data(format!("{} trailing bytes after MCE1 trailer", rest.len())));
        }
        Self::new(dim, ids, rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Data("file is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
