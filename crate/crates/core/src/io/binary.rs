//! Little-endian binary containers.
//!
//! | magic  | contents                                                        |
//! |--------|-----------------------------------------------------------------|
//! | `DVEM` | dense embedding volume, f32 or f16 payload                      |
//! | `SMSK` | per-pixel u16 segment ids                                       |
//! | `SEGE` | segment records (id, class, raw embedding)                      |
//! | `LMAP` | per-pixel u16 class labels, `0xFFFF` = ignore                   |
//! | `DVE3` | frozen 3D embedding map                                         |
//!
//! Every reader checks the exact byte length implied by the header before
//! decoding anything.

use std::fs;
use std::path::Path;

use half::f16;
use serde::Serialize;

use crate::closed_set::LabelMap;
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::map3d::{EmbeddingMap3D, MapCell};
use crate::volume::{DenseEmbeddingMap, SegmentMaskMap, SegmentRecord, SegmentRecords};

pub const FORMAT_VERSION: u32 = 1;

pub const VOLUME_MAGIC: [u8; 4] = *b"DVEM";
pub const MASK_MAGIC: [u8; 4] = *b"SMSK";
pub const SEGMENTS_MAGIC: [u8; 4] = *b"SEGE";
pub const LABELS_MAGIC: [u8; 4] = *b"LMAP";
pub const MAP3D_MAGIC: [u8; 4] = *b"DVE3";

/// `class_id` value for records without a class.
pub const NO_CLASS: u16 = 0xFFFF;

const VOLUME_HEADER_LEN: usize = 24;
const GRID_HEADER_LEN: usize = 16;
const SEGMENTS_HEADER_LEN: usize = 16;
const MAP3D_HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F16),
            t => Err(Error::UnknownDtype(t)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VolumeFileHeader {
    pub version: u32,
    pub height: u32,
    pub width: u32,
    pub dim: u32,
    pub dtype: Dtype,
}

impl VolumeFileHeader {
    pub fn payload_len(&self) -> u64 {
        u64::from(self.height) * u64::from(self.width) * u64::from(self.dim) * self.dtype.size() as u64
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::TruncatedPayload {
                expected: (self.pos + n) as u64,
                found: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        Ok(self
            .take(n * 2)?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes(b.try_into().expect("2 bytes")))
            .collect())
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        match self.u32()? {
            FORMAT_VERSION => Ok(()),
            v => Err(Error::BadVersion(v)),
        }
    }
}

/// Exact-length check: shorter is truncation, longer is trailing garbage.
fn check_len(buf: &[u8], expected: u64) -> Result<()> {
    let found = buf.len() as u64;
    match found.cmp(&expected) {
        std::cmp::Ordering::Less => Err(Error::TruncatedPayload { expected, found }),
        std::cmp::Ordering::Greater => Err(Error::TrailingBytes { expected, found }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::BadSchema(format!("{what} {v} does not fit in 32 bits")))
}

fn grid_header(out: &mut Vec<u8>, magic: [u8; 4], height: usize, width: usize) -> Result<()> {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(height, "height")?.to_le_bytes());
    out.extend_from_slice(&to_u32(width, "width")?.to_le_bytes());
    Ok(())
}

// ---- DVEM ----

pub fn read_volume_header(buf: &[u8]) -> Result<VolumeFileHeader> {
    let mut r = Reader::new(buf);
    r.magic(VOLUME_MAGIC)?;
    r.version()?;
    let (height, width, dim) = (r.u32()?, r.u32()?, r.u32()?);
    let dtype = Dtype::from_tag(r.u8()?)?;
    if r.take(3)? != [0, 0, 0] {
        return Err(Error::BadSchema("nonzero header padding".into()));
    }
    Ok(VolumeFileHeader {
        version: FORMAT_VERSION,
        height,
        width,
        dim,
        dtype,
    })
}

pub fn encode_volume(map: &DenseEmbeddingMap, dtype: Dtype) -> Result<Vec<u8>> {
    if map.data().is_empty() {
        return Err(Error::BadSchema("volume must have H*W*D > 0".into()));
    }
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + map.data().len() * dtype.size());
    grid_header(&mut out, VOLUME_MAGIC, map.height(), map.width())?;
    out.extend_from_slice(&to_u32(map.dim(), "dim")?.to_le_bytes());
    out.extend_from_slice(&[dtype.tag(), 0, 0, 0]);
    match dtype {
        Dtype::F32 => map.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        // round-to-nearest-even
        Dtype::F16 => map
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_volume(buf: &[u8]) -> Result<DenseEmbeddingMap> {
    let h = read_volume_header(buf)?;
    if h.height == 0 || h.width == 0 || h.dim == 0 {
        return Err(Error::BadSchema("volume must have H*W*D > 0".into()));
    }
    check_len(buf, VOLUME_HEADER_LEN as u64 + h.payload_len())?;
    let payload = &buf[VOLUME_HEADER_LEN..];
    let data = match h.dtype {
        Dtype::F32 => Reader::new(payload).f32s(payload.len() / 4)?,
        Dtype::F16 => payload
            .chunks_exact(2)
            .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
    };
    DenseEmbeddingMap::new(h.height as usize, h.width as usize, h.dim as usize, data)
}

pub fn write_volume(map: &DenseEmbeddingMap, dtype: Dtype, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_volume(map, dtype)?)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<DenseEmbeddingMap> {
    decode_volume(&fs::read(path)?)
}

// ---- SMSK / LMAP ----

fn decode_grid(buf: &[u8], magic: [u8; 4]) -> Result<(usize, usize, Vec<u16>)> {
    let mut r = Reader::new(buf);
    r.magic(magic)?;
    r.version()?;
    let (h, w) = (r.u32()? as u64, r.u32()? as u64);
    check_len(buf, GRID_HEADER_LEN as u64 + h * w * 2)?;
    let ids = r.u16s((h * w) as usize)?;
    Ok((h as usize, w as usize, ids))
}

fn encode_grid(magic: [u8; 4], height: usize, width: usize, values: &[u16]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(GRID_HEADER_LEN + values.len() * 2);
    grid_header(&mut out, magic, height, width)?;
    values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    Ok(out)
}

pub fn encode_mask_map(mask: &SegmentMaskMap) -> Result<Vec<u8>> {
    encode_grid(MASK_MAGIC, mask.height(), mask.width(), mask.ids())
}

pub fn decode_mask_map(buf: &[u8]) -> Result<SegmentMaskMap> {
    let (h, w, ids) = decode_grid(buf, MASK_MAGIC)?;
    SegmentMaskMap::new(h, w, ids)
}

pub fn write_mask_map(mask: &SegmentMaskMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_mask_map(mask)?)?;
    Ok(())
}

pub fn read_mask_map(path: impl AsRef<Path>) -> Result<SegmentMaskMap> {
    decode_mask_map(&fs::read(path)?)
}

pub fn encode_label_map(labels: &LabelMap) -> Result<Vec<u8>> {
    encode_grid(LABELS_MAGIC, labels.height(), labels.width(), labels.labels())
}

pub fn decode_label_map(buf: &[u8]) -> Result<LabelMap> {
    let (h, w, labels) = decode_grid(buf, LABELS_MAGIC)?;
    LabelMap::new(h, w, labels)
}

pub fn write_label_map(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_label_map(labels)?)?;
    Ok(())
}

pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_label_map(&fs::read(path)?)
}

// ---- SEGE ----

/// Header fields of a segment-record file: `(count, dim)`.
pub fn read_segments_header(buf: &[u8]) -> Result<(u32, u32)> {
    let mut r = Reader::new(buf);
    r.magic(SEGMENTS_MAGIC)?;
    r.version()?;
    Ok((r.u32()?, r.u32()?))
}

/// Writes the raw embeddings; refined embeddings are derived data and not stored.
pub fn encode_segment_records(records: &SegmentRecords) -> Result<Vec<u8>> {
    let dim = records.dim().unwrap_or(0);
    let mut out = Vec::with_capacity(SEGMENTS_HEADER_LEN + records.len() * (4 + dim * 4));
    out.extend_from_slice(&SEGMENTS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(records.len(), "record count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(dim, "dim")?.to_le_bytes());
    for rec in records.iter() {
        out.extend_from_slice(&rec.segment_id.to_le_bytes());
        out.extend_from_slice(&rec.class_id.unwrap_or(NO_CLASS).to_le_bytes());
        rec.raw_embedding
            .as_slice()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    Ok(out)
}

pub fn decode_segment_records(buf: &[u8]) -> Result<SegmentRecords> {
    let (n, d) = read_segments_header(buf)?;
    let (n, d) = (n as u64, d as u64);
    check_len(buf, SEGMENTS_HEADER_LEN as u64 + n * (4 + 4 * d))?;
    let mut r = Reader::new(&buf[SEGMENTS_HEADER_LEN..]);
    let mut records = SegmentRecords::new();
    for _ in 0..n {
        let id = r.u16()?;
        let class = r.u16()?;
        let emb = EmbeddingVector::new(r.f32s(d as usize)?)?;
        let class_id = (class != NO_CLASS).then_some(class);
        records.insert(SegmentRecord::new(id, class_id, emb)?)?;
    }
    Ok(records)
}

pub fn write_segment_records(records: &SegmentRecords, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_segment_records(records)?)?;
    Ok(())
}

pub fn read_segment_records(path: impl AsRef<Path>) -> Result<SegmentRecords> {
    decode_segment_records(&fs::read(path)?)
}

// ---- DVE3 ----

/// `(cell_size, dim, cell_count)` of a frozen-map file.
pub fn read_map3d_header(buf: &[u8]) -> Result<(f32, u32, u64)> {
    let mut r = Reader::new(buf);
    r.magic(MAP3D_MAGIC)?;
    r.version()?;
    Ok((r.f32()?, r.u32()?, r.u64()?))
}

/// Cells are written in ascending key order; the cell size is stored as f32.
pub fn encode_map3d(map: &EmbeddingMap3D) -> Result<Vec<u8>> {
    let dim = map.dim();
    let mut out = Vec::with_capacity(MAP3D_HEADER_LEN + map.len() * (16 + dim * 4));
    out.extend_from_slice(&MAP3D_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.cell_size() as f32).to_le_bytes());
    out.extend_from_slice(&to_u32(dim, "dim")?.to_le_bytes());
    out.extend_from_slice(&(map.len() as u64).to_le_bytes());
    for (key, cell) in map.cells() {
        key.iter().for_each(|k| out.extend_from_slice(&k.to_le_bytes()));
        out.extend_from_slice(&cell.count.to_le_bytes());
        cell.mean.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    Ok(out)
}

pub fn decode_map3d(buf: &[u8]) -> Result<EmbeddingMap3D> {
    let (cell_size, dim, count) = read_map3d_header(buf)?;
    let record = 16 + 4 * u64::from(dim);
    let expected = count
        .checked_mul(record)
        .and_then(|p| p.checked_add(MAP3D_HEADER_LEN as u64))
        .ok_or_else(|| Error::BadSchema("cell count overflows".into()))?;
    check_len(buf, expected)?;
    let mut r = Reader::new(&buf[MAP3D_HEADER_LEN..]);
    let mut cells = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let key = [r.i32()?, r.i32()?, r.i32()?];
        let n = r.u32()?;
        let mean = r.f32s(dim as usize)?;
        cells.push((key, MapCell { mean, count: n }));
    }
    EmbeddingMap3D::from_cells(f64::from(cell_size), dim as usize, cells)
}

pub fn write_map3d(map: &EmbeddingMap3D, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_map3d(map)?)?;
    Ok(())
}

pub fn read_map3d(path: impl AsRef<Path>) -> Result<EmbeddingMap3D> {
    decode_map3d(&fs::read(path)?)
}
