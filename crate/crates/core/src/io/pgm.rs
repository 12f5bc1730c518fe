//! Binary PGM (P5): 8-bit similarity heatmaps and 8/16-bit depth images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::map3d::DepthImage;

/// Similarity in [-1, 1] mapped linearly onto 0..=255; out-of-range values clamp.
pub fn similarity_to_gray(s: f64) -> u8 {
    let g = ((s.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round();
    g as u8
}

pub fn encode_heatmap_pgm(width: usize, height: usize, similarities: &[f64]) -> Result<Vec<u8>> {
    if similarities.len() != width * height {
        return Err(Error::ShapeMismatch {
            expected: (height, width),
            found: (similarities.len(), 1),
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(similarities.iter().map(|&s| similarity_to_gray(s)));
    Ok(out)
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_header(buf: &[u8]) -> Result<Header> {
    if buf.len() < 2 || &buf[..2] != b"P5" {
        let mut found = [0u8; 4];
        found[..buf.len().min(4)].copy_from_slice(&buf[..buf.len().min(4)]);
        return Err(Error::BadMagic {
            expected: *b"P5\n\0",
            found,
        });
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match buf.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::TruncatedPayload { expected: pos as u64 + 1, found: buf.len() as u64 }),
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&buf[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::BadSchema(format!("bad PGM header field at byte {start}")))?;
    }
    // exactly one whitespace byte before the raster
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::BadSchema("PGM header must end with whitespace".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::BadSchema(format!("bad PGM header {width}x{height} maxval {maxval}")));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval,
        offset: pos + 1,
    })
}

/// Reads raw depth units. 16-bit rasters are big-endian as netpbm requires.
pub fn decode_depth_pgm(buf: &[u8]) -> Result<DepthImage> {
    let h = parse_header(buf)?;
    let bytes_per = if h.maxval > 255 { 2 } else { 1 };
    let expected = (h.offset + h.width * h.height * bytes_per) as u64;
    let found = buf.len() as u64;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingBytes { expected, found });
    }
    let raster = &buf[h.offset..];
    let data = if bytes_per == 2 {
        raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        raster.iter().map(|&b| u16::from(b)).collect()
    };
    DepthImage::new(h.height, h.width, data)
}

pub fn encode_depth_pgm(depth: &DepthImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", depth.width(), depth.height()).into_bytes();
    depth.data().iter().for_each(|d| out.extend_from_slice(&d.to_be_bytes()));
    out
}

pub fn read_depth_pgm(path: impl AsRef<Path>) -> Result<DepthImage> {
    decode_depth_pgm(&fs::read(path)?)
}

pub fn write_depth_pgm(depth: &DepthImage, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_depth_pgm(depth))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_mapping() {
        assert_eq!(similarity_to_gray(-1.0), 0);
        assert_eq!(similarity_to_gray(0.0), 128);
        assert_eq!(similarity_to_gray(1.0), 255);
        assert_eq!(similarity_to_gray(3.0), 255);
        let pgm = encode_heatmap_pgm(2, 1, &[1.0, -1.0]).unwrap();
        assert_eq!(pgm, b"P5\n2 1\n255\n\xff\x00");
        assert!(encode_heatmap_pgm(2, 2, &[0.0]).is_err());
    }

    #[test]
    fn depth_round_trip() {
        let d = DepthImage::new(2, 3, vec![0, 1, 256, 1000, 65535, 7]).unwrap();
        let bytes = encode_depth_pgm(&d);
        assert_eq!(decode_depth_pgm(&bytes).unwrap(), d);
        assert!(matches!(
            decode_depth_pgm(&bytes[..bytes.len() - 1]),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn eight_bit_with_comment() {
        let bytes = b"P5\n# depth\n2 1\n255\n\x05\x06";
        let d = decode_depth_pgm(bytes).unwrap();
        assert_eq!(d.data(), &[5, 6]);
        assert!(matches!(decode_depth_pgm(b"P2\n1 1\n255\n0"), Err(Error::BadMagic { .. })));
    }
}
