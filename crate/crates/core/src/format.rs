//! On-disk formats.
//!
//! `SHRA` sparse adapter files, all integers little-endian:
//!
//! ```text
//! magic      b"SHRA"
//! version    u16   (1; bit 15 set marks an index-only mask file)
//! tensors    u32
//! per tensor:
//!   name_len u16, name (UTF-8)
//!   rows u32, cols u32, nnz u64
//!   nnz × u64 flat row-major indices, strictly increasing
//!   nnz × f32 values (absent in index-only files)
//! ```
//!
//! `SHRW` dense weight files share the header layout (magic `b"SHRW"`), and
//! each tensor is `name_len u16, name, rows u32, cols u32` followed by
//! `rows × cols` f64 values.

use std::io::Write;
use std::path::Path;

use crate::adapter::SparseAdapter;
use crate::error::{Result, ShiraError};
use crate::linalg::DenseMatrix;
use crate::mask::Mask;
use crate::model::ToyModel;

pub const ADAPTER_MAGIC: &[u8; 4] = b"SHRA";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"SHRW";
pub const FORMAT_VERSION: u16 = 1;
pub const INDEX_ONLY_FLAG: u16 = 0x8000;

/// Bytes before the first tensor record.
pub const FILE_HEADER_LEN: usize = 4 + 2 + 4;

/// Exact serialized size of a set of adapters.
pub fn encoded_len(adapters: &[SparseAdapter]) -> usize {
    FILE_HEADER_LEN
        + adapters
            .iter()
            .map(|a| 2 + a.name().len() + 4 + 4 + 8 + a.nnz() * (8 + 4))
            .sum::<usize>()
}

fn put_name(buf: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| ShiraError::param(format!("tensor name longer than 65535 bytes: {name:?}")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_dims(buf: &mut Vec<u8>, rows: usize, cols: usize) -> Result<()> {
    for d in [rows, cols] {
        let d = u32::try_from(d).map_err(|_| ShiraError::param("dimension exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

/// Serializes adapters; values are narrowed to f32.
pub fn encode_adapters(adapters: &[SparseAdapter]) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(encoded_len(adapters));
    buf.extend_from_slice(ADAPTER_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(adapters.len() as u32).to_le_bytes());
    for a in adapters {
        put_name(&mut buf, a.name())?;
        put_dims(&mut buf, a.rows(), a.cols())?;
        buf.extend_from_slice(&(a.nnz() as u64).to_le_bytes());
        for &i in a.indices() {
            buf.extend_from_slice(&(i as u64).to_le_bytes());
        }
        for &v in a.values() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

/// Serializes masks as index-only records.
pub fn encode_masks(masks: &[(String, Mask)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ADAPTER_MAGIC);
    buf.extend_from_slice(&(FORMAT_VERSION | INDEX_ONLY_FLAG).to_le_bytes());
    buf.extend_from_slice(&(masks.len() as u32).to_le_bytes());
    for (name, m) in masks {
        put_name(&mut buf, name)?;
        put_dims(&mut buf, m.rows(), m.cols())?;
        let idx = m.indices();
        buf.extend_from_slice(&(idx.len() as u64).to_le_bytes());
        for i in idx {
            buf.extend_from_slice(&(i as u64).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ShiraError::format(
                field,
                format!("truncated: need {n} bytes at offset {}", self.pos),
            )),
        }
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16("name length")? as usize;
        let raw = self.take(len, "name")?;
        String::from_utf8(raw.to_vec()).map_err(|_| ShiraError::format("name", "not valid UTF-8"))
    }

    fn dims(&mut self) -> Result<(usize, usize)> {
        let rows = self.u32("rows")? as usize;
        let cols = self.u32("cols")? as usize;
        if rows == 0 || cols == 0 {
            return Err(ShiraError::format("rows", format!("zero dimension {rows}x{cols}")));
        }
        Ok((rows, cols))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(ShiraError::format(
                "trailer",
                format!("{} unexpected trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_header(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<(u16, usize)> {
    let m = r.take(4, "magic")?;
    if m != magic {
        return Err(ShiraError::format("magic", "bad magic"));
    }
    let version = r.u16("version")?;
    if version & !INDEX_ONLY_FLAG != FORMAT_VERSION {
        return Err(ShiraError::format(
            "version",
            format!("unsupported version {}", version & !INDEX_ONLY_FLAG),
        ));
    }
    let count = r.u32("tensor count")? as usize;
    Ok((version, count))
}

fn read_indices(r: &mut Reader<'_>, rows: usize, cols: usize) -> Result<Vec<usize>> {
    let nnz = r.u64("nnz")?;
    let total = (rows as u64) * (cols as u64);
    if nnz > total {
        return Err(ShiraError::format("nnz", format!("{nnz} exceeds {rows}x{cols}")));
    }
    let raw = r.take(nnz as usize * 8, "indices")?;
    let mut out = Vec::with_capacity(nnz as usize);
    let mut prev: Option<u64> = None;
    for chunk in raw.chunks_exact(8) {
        let i = u64::from_le_bytes(chunk.try_into().unwrap());
        if i >= total {
            return Err(ShiraError::format("indices", format!("index {i} out of range")));
        }
        if prev.is_some_and(|p| p >= i) {
            return Err(ShiraError::format("indices", "not strictly increasing"));
        }
        prev = Some(i);
        out.push(i as usize);
    }
    Ok(out)
}

pub fn decode_adapters(bytes: &[u8]) -> Result<Vec<SparseAdapter>> {
    let mut r = Reader { bytes, pos: 0 };
    let (version, count) = read_header(&mut r, ADAPTER_MAGIC)?;
    if version & INDEX_ONLY_FLAG != 0 {
        return Err(ShiraError::format("version", "index-only mask file, expected adapter values"));
    }
    let mut out = Vec::new();
    for _ in 0..count {
        let name = r.name()?;
        let (rows, cols) = r.dims()?;
        let indices = read_indices(&mut r, rows, cols)?;
        let raw = r.take(indices.len() * 4, "values")?;
        let mut values = Vec::with_capacity(indices.len());
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() || v == 0.0 {
                return Err(ShiraError::format("values", format!("invalid stored value {v}")));
            }
            values.push(v as f64);
        }
        out.push(
            SparseAdapter::new(name, rows, cols, indices, values)
                .map_err(|e| ShiraError::format("tensor", e.to_string()))?,
        );
    }
    r.finish()?;
    Ok(out)
}

pub fn decode_masks(bytes: &[u8]) -> Result<Vec<(String, Mask)>> {
    let mut r = Reader { bytes, pos: 0 };
    let (version, count) = read_header(&mut r, ADAPTER_MAGIC)?;
    if version & INDEX_ONLY_FLAG == 0 {
        return Err(ShiraError::format("version", "adapter file, expected index-only mask"));
    }
    let mut out = Vec::new();
    for _ in 0..count {
        let name = r.name()?;
        let (rows, cols) = r.dims()?;
        let idx = read_indices(&mut r, rows, cols)?;
        out.push((name, Mask::from_indices(rows, cols, &idx)?));
    }
    r.finish()?;
    Ok(out)
}

pub fn encode_weights(tensors: &[(String, DenseMatrix)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        put_name(&mut buf, name)?;
        put_dims(&mut buf, m.rows(), m.cols())?;
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, DenseMatrix)>> {
    let mut r = Reader { bytes, pos: 0 };
    let (version, count) = read_header(&mut r, WEIGHTS_MAGIC)?;
    if version & INDEX_ONLY_FLAG != 0 {
        return Err(ShiraError::format("version", "flag bit not valid for weight files"));
    }
    let mut out = Vec::new();
    for _ in 0..count {
        let name = r.name()?;
        let (rows, cols) = r.dims()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| ShiraError::format("rows", "dimensions overflow"))?;
        let raw = r.take(n, "values")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = DenseMatrix::from_vec(rows, cols, data).map_err(|e| ShiraError::format("values", e.to_string()))?;
        out.push((name, m));
    }
    r.finish()?;
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| ShiraError::io(path, e))?;
    f.write_all(bytes).map_err(|e| ShiraError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ShiraError::io(path, e))
}

pub fn save(adapter: &SparseAdapter, path: impl AsRef<Path>) -> Result<()> {
    save_adapters(std::slice::from_ref(adapter), path)
}

/// Loads a single-tensor adapter file.
pub fn load(path: impl AsRef<Path>) -> Result<SparseAdapter> {
    let mut all = load_adapters(path)?;
    if all.len() != 1 {
        return Err(ShiraError::format(
            "tensor count",
            format!("expected 1 tensor, found {}", all.len()),
        ));
    }
    Ok(all.pop().unwrap())
}

pub fn save_adapters(adapters: &[SparseAdapter], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_adapters(adapters)?)
}

pub fn load_adapters(path: impl AsRef<Path>) -> Result<Vec<SparseAdapter>> {
    decode_adapters(&read_file(path.as_ref())?)
}

pub fn save_masks(masks: &[(String, Mask)], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_masks(masks)?)
}

pub fn load_masks(path: impl AsRef<Path>) -> Result<Vec<(String, Mask)>> {
    decode_masks(&read_file(path.as_ref())?)
}

pub fn save_weights(tensors: &[(String, DenseMatrix)], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_weights(tensors)?)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Vec<(String, DenseMatrix)>> {
    decode_weights(&read_file(path.as_ref())?)
}

/// Tensors `w1`, `b1` (1×hidden), `w2`, `b2` (1×out).
pub fn model_tensors(model: &ToyModel) -> Vec<(String, DenseMatrix)> {
    let row = |v: &[f64]| DenseMatrix::from_vec(1, v.len(), v.to_vec()).expect("finite bias");
    vec![
        ("w1".into(), model.w1.clone()),
        ("b1".into(), row(&model.b1)),
        ("w2".into(), model.w2.clone()),
        ("b2".into(), row(&model.b2)),
    ]
}

pub fn model_from_tensors(tensors: &[(String, DenseMatrix)]) -> Result<ToyModel> {
    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m.clone())
            .ok_or_else(|| ShiraError::format("tensor", format!("missing tensor `{name}`")))
    };
    ToyModel::new(
        find("w1")?,
        find("b1")?.into_vec(),
        find("w2")?,
        find("b2")?.into_vec(),
    )
}
