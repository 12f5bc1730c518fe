//! On-disk artifacts: binary containers, embedding banks, PGM images and manifests.

pub mod bank;
pub mod binary;
pub mod manifest;
pub mod pgm;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use bank::{BankEntry, EmbeddingBank};
pub use binary::{
    decode_label_map, decode_map3d, decode_mask_map, decode_segment_records, decode_volume, encode_label_map,
    encode_map3d, encode_mask_map, encode_segment_records, encode_volume, read_label_map, read_map3d,
    read_mask_map, read_segment_records, read_volume, write_label_map, write_map3d, write_mask_map,
    write_segment_records, write_volume, Dtype, VolumeFileHeader,
};
pub use pgm::{encode_heatmap_pgm, read_depth_pgm, write_depth_pgm};

use crate::closed_set::IGNORE_LABEL;
use crate::error::Result;

/// Parses a file fully and renders its header fields as `key value` lines.
/// The format is detected from the leading bytes; anything starting with `{`
/// is treated as an embedding bank.
pub fn describe_file(path: impl AsRef<Path>) -> Result<String> {
    let buf = fs::read(path)?;
    describe_bytes(&buf)
}

pub fn describe_bytes(buf: &[u8]) -> Result<String> {
    let mut out = String::new();
    let magic = buf.get(..4).unwrap_or(buf);
    match magic {
        m if m == binary::VOLUME_MAGIC => {
            let h = binary::read_volume_header(buf)?;
            let map = decode_volume(buf)?;
            let _ = writeln!(out, "format DVEM\nversion {}", h.version);
            let _ = writeln!(out, "height {}\nwidth {}\ndim {}", h.height, h.width, h.dim);
            let _ = writeln!(out, "dtype {}", if h.dtype == Dtype::F32 { "f32" } else { "f16" });
            let _ = writeln!(out, "payload_bytes {}", h.payload_len());
            let zero = map.pixels().filter(|p| p.iter().all(|&v| v == 0.0)).count();
            let _ = writeln!(out, "zero_pixels {zero}");
        }
        m if m == binary::MASK_MAGIC => {
            let mask = decode_mask_map(buf)?;
            let ids: BTreeSet<u16> = mask.ids().iter().copied().filter(|&i| i != 0).collect();
            let _ = writeln!(out, "format SMSK\nversion {}", binary::FORMAT_VERSION);
            let _ = writeln!(out, "height {}\nwidth {}", mask.height(), mask.width());
            let _ = writeln!(out, "labeled_pixels {}\nsegments {}", mask.labeled_pixels(), ids.len());
        }
        m if m == binary::LABELS_MAGIC => {
            let lm = decode_label_map(buf)?;
            let ignored = lm.labels().iter().filter(|&&l| l == IGNORE_LABEL).count();
            let classes: BTreeSet<u16> = lm.labels().iter().copied().filter(|&l| l != IGNORE_LABEL).collect();
            let _ = writeln!(out, "format LMAP\nversion {}", binary::FORMAT_VERSION);
            let _ = writeln!(out, "height {}\nwidth {}", lm.height(), lm.width());
            let _ = writeln!(out, "ignored_pixels {ignored}\nclasses_present {}", classes.len());
        }
        m if m == binary::SEGMENTS_MAGIC => {
            let (n, d) = binary::read_segments_header(buf)?;
            let recs = decode_segment_records(buf)?;
            let _ = writeln!(out, "format SEGE\nversion {}", binary::FORMAT_VERSION);
            let _ = writeln!(out, "records {n}\ndim {d}");
            let _ = writeln!(out, "global {}", if recs.global().is_some() { "yes" } else { "no" });
            let ids: Vec<String> = recs.iter().map(|r| r.segment_id.to_string()).collect();
            let _ = writeln!(out, "segment_ids {}", ids.join(","));
        }
        m if m == binary::MAP3D_MAGIC => {
            let (cell, d, count) = binary::read_map3d_header(buf)?;
            let map = decode_map3d(buf)?;
            let total: u64 = map.cells().map(|(_, c)| u64::from(c.count)).sum();
            let _ = writeln!(out, "format DVE3\nversion {}", binary::FORMAT_VERSION);
            let _ = writeln!(out, "cell_size {cell}\ndim {d}\ncells {count}\nobservations {total}");
        }
        m if m.starts_with(b"P5") => {
            let depth = pgm::decode_depth_pgm(buf)?;
            let valid = depth.data().iter().filter(|&&d| d != 0).count();
            let _ = writeln!(out, "format PGM");
            let _ = writeln!(out, "height {}\nwidth {}\nnonzero_pixels {valid}", depth.height(), depth.width());
        }
        m if m.first() == Some(&b'{') => {
            let text = std::str::from_utf8(buf).map_err(|e| crate::Error::BadSchema(e.to_string()))?;
            let bank = EmbeddingBank::parse(text)?;
            let _ = writeln!(out, "format bank");
            let _ = writeln!(out, "dim {}\nentries {}\nnames {}", bank.dim(), bank.len(), bank.names().len());
        }
        _ => {
            let mut found = [0u8; 4];
            found[..magic.len()].copy_from_slice(magic);
            return Err(crate::Error::BadMagic {
                expected: binary::VOLUME_MAGIC,
                found,
            });
        }
    }
    Ok(out)
}
