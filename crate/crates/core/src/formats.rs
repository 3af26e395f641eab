//! Image file formats (binary PPM/PGM, grayscale PFM) and the dataset
//! manifest CSV.
//!
//! * Color: PPM `P6`, maxval 255, linear quantization round(255·c).
//! * Depth: PFM `Pf`, scale `-1.0` (little-endian f32), rows bottom-to-top.
//! * Mask: PGM `P5`, maxval 255, values in {0, 255}.
//! * Manifest: CSV with header `color,depth,mask,scene_id,yaw_k`.
//!
//! Encoders/decoders work on in-memory byte buffers; `read_*`/`write_*`
//! wrappers add file I/O. Decode errors report the byte offset of the defect.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::SphereDims;
use crate::raster::{DepthMap, EquirectImage, ValidityMask};

/// Byte cursor with offset-carrying errors.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skips whitespace and `#` comments (to end of line).
    fn skip_space(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(b) = self.peek() {
                    self.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space();
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail("expected token, found end of data");
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::Format {
                offset: start,
                msg: "non-ascii header token".to_string(),
            })
    }

    fn dim(&mut self) -> Result<usize> {
        let start_err_pos = self.pos;
        let tok = self.token()?;
        tok.parse::<usize>().map_err(|_| Error::Format {
            offset: start_err_pos,
            msg: format!("invalid dimension '{tok}'"),
        })
    }

    /// Consumes the single whitespace byte that separates header and payload.
    fn expect_single_space(&mut self) -> Result<()> {
        match self.peek() {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => self.fail("expected whitespace before payload"),
        }
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            self.pos = self.bytes.len();
            return self.fail(format!(
                "truncated payload: need {len} bytes, have {}",
                self.bytes.len() - self.pos
            ));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

fn quantize_u8(c: f32) -> u8 {
    (255.0 * c.clamp(0.0, 1.0)).round() as u8
}

// ---------------------------------------------------------------------------
// PPM (P6)
// ---------------------------------------------------------------------------

pub fn encode_ppm(width: usize, height: usize, rgb: &[f32]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "ppm payload size mismatch");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|&c| quantize_u8(c)));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.token()?;
    if magic != "P6" {
        return Err(Error::Format {
            offset: 0,
            msg: format!("expected PPM magic 'P6', found '{magic}'"),
        });
    }
    let width = cur.dim()?;
    let height = cur.dim()?;
    let maxval = cur.dim()?;
    if maxval != 255 {
        return cur.fail(format!("unsupported maxval {maxval}, expected 255"));
    }
    cur.expect_single_space()?;
    let payload = cur.payload(width * height * 3)?;
    Ok((
        width,
        height,
        payload.iter().map(|&b| b as f32 / 255.0).collect(),
    ))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[f32]) -> Result<()> {
    fs::write(path, encode_ppm(width, height, rgb)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Reads a PPM and validates equirectangular dimensions.
pub fn read_equirect_ppm(path: &Path) -> Result<EquirectImage> {
    let (w, h, data) = read_ppm(path)?;
    let dims = SphereDims::new(w, h)?;
    EquirectImage::from_data(dims, 3, data)
}

pub fn write_equirect_ppm(path: &Path, img: &EquirectImage) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::shape(format!(
            "ppm needs 3 channels, image has {}",
            img.channels
        )));
    }
    write_ppm(path, img.dims.width, img.dims.height, &img.data)
}

// ---------------------------------------------------------------------------
// PFM (Pf, little-endian grayscale)
// ---------------------------------------------------------------------------

pub fn encode_pfm(width: usize, height: usize, data: &[f32]) -> Vec<u8> {
    assert_eq!(data.len(), width * height, "pfm payload size mismatch");
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    // PFM stores rows bottom-to-top.
    for row in (0..height).rev() {
        for &value in &data[row * width..(row + 1) * width] {
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.token()?;
    if magic == "PF" {
        return Err(Error::Format {
            offset: 0,
            msg: "color PFM ('PF') not supported, expected grayscale 'Pf'".to_string(),
        });
    }
    if magic != "Pf" {
        return Err(Error::Format {
            offset: 0,
            msg: format!("expected PFM magic 'Pf', found '{magic}'"),
        });
    }
    let width = cur.dim()?;
    let height = cur.dim()?;
    let scale_pos = cur.pos;
    let scale_tok = cur.token()?;
    let scale: f64 = scale_tok.parse().map_err(|_| Error::Format {
        offset: scale_pos,
        msg: format!("invalid scale '{scale_tok}'"),
    })?;
    if scale >= 0.0 {
        return Err(Error::Format {
            offset: scale_pos,
            msg: format!("big-endian PFM (scale {scale_tok}) not supported, expected -1.0"),
        });
    }
    cur.expect_single_space()?;
    let payload = cur.payload(width * height * 4)?;
    let mut data = vec![0.0f32; width * height];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let row = height - 1 - i / width;
        let col = i % width;
        data[row * width + col] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    Ok((width, height, data))
}

pub fn write_pfm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    fs::write(path, encode_pfm(width, height, data)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    decode_pfm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_depth_pfm(path: &Path) -> Result<DepthMap> {
    let (w, h, data) = read_pfm(path)?;
    DepthMap::from_data(SphereDims::new(w, h)?, data)
}

pub fn write_depth_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    write_pfm(path, depth.dims.width, depth.dims.height, &depth.data)
}

// ---------------------------------------------------------------------------
// PGM (P5)
// ---------------------------------------------------------------------------

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "pgm payload size mismatch");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.token()?;
    if magic != "P5" {
        return Err(Error::Format {
            offset: 0,
            msg: format!("expected PGM magic 'P5', found '{magic}'"),
        });
    }
    let width = cur.dim()?;
    let height = cur.dim()?;
    let maxval = cur.dim()?;
    if maxval != 255 {
        return cur.fail(format!("unsupported maxval {maxval}, expected 255"));
    }
    cur.expect_single_space()?;
    let payload = cur.payload(width * height)?;
    Ok((width, height, payload.to_vec()))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, gray)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_mask_pgm(path: &Path, mask: &ValidityMask) -> Result<()> {
    let gray: Vec<u8> = mask.data.iter().map(|&m| m * 255).collect();
    write_pgm(path, mask.dims.width, mask.dims.height, &gray)
}

pub fn read_mask_pgm(path: &Path) -> Result<ValidityMask> {
    let (w, h, gray) = read_pgm(path)?;
    let mut data = Vec::with_capacity(gray.len());
    for (i, &g) in gray.iter().enumerate() {
        match g {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(Error::Format {
                    offset: i,
                    msg: format!("mask value {other} outside {{0, 255}}"),
                })
            }
        }
    }
    ValidityMask::from_data(SphereDims::new(w, h)?, data)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

pub const MANIFEST_HEADER: &str = "color,depth,mask,scene_id,yaw_k";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub color: String,
    pub depth: String,
    pub mask: String,
    pub scene_id: String,
    pub yaw_k: u8,
}

pub fn encode_manifest(records: &[ManifestRecord]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.color, r.depth, r.mask, r.scene_id, r.yaw_k
        ));
    }
    out
}

pub fn decode_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("bad manifest header '{header}'"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty manifest".to_string(),
            })
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let yaw_k: u8 = fields[4].trim().parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("invalid yaw_k '{}'", fields[4]),
        })?;
        if yaw_k > 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("yaw_k {yaw_k} outside 0..=3"),
            });
        }
        records.push(ManifestRecord {
            color: fields[0].trim().to_string(),
            depth: fields[1].trim().to_string(),
            mask: fields[2].trim().to_string(),
            scene_id: fields[3].trim().to_string(),
            yaw_k,
        });
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    fs::write(path, encode_manifest(records)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_manifest(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_exact_bytes() {
        let bytes = encode_pfm(2, 1, &[1.5, 2.5]);
        let mut expected = b"Pf\n2 1\n-1.0\n".to_vec();
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        expected.extend_from_slice(&2.5f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn pfm_round_trip_bit_exact() {
        let data: Vec<f32> = (0..32 * 16).map(|i| (i as f32).sin() * 7.25).collect();
        let (w, h, back) = decode_pfm(&encode_pfm(32, 16, &data)).unwrap();
        assert_eq!((w, h), (32, 16));
        assert_eq!(
            back.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            data.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn pfm_rows_bottom_to_top() {
        // Two rows: top row [1, 2], bottom row [3, 4]; file stores bottom first.
        let bytes = encode_pfm(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let payload = &bytes[bytes.len() - 16..];
        let first = f32::from_le_bytes(payload[0..4].try_into().unwrap());
        assert_eq!(first, 3.0);
    }

    #[test]
    fn pfm_big_endian_rejected() {
        let mut bytes = b"Pf\n2 1\n+1.0\n".to_vec();
        bytes.extend_from_slice(&[0u8; 8]);
        let err = decode_pfm(&bytes).unwrap_err();
        assert!(err.to_string().contains("big-endian"), "got: {err}");
    }

    #[test]
    fn pfm_truncated_reports_offset() {
        let bytes = encode_pfm(4, 2, &[0.0; 8]);
        let err = decode_pfm(&bytes[..bytes.len() - 5]).unwrap_err();
        match err {
            Error::Format { offset, msg } => {
                assert!(msg.contains("truncated"), "msg: {msg}");
                assert!(offset > 0);
            }
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn ppm_round_trip_bit_exact() {
        // Quantized values (k/255) survive a write/read cycle bit-exactly.
        let mut rng = crate::rng::SplitMix64::new(11);
        let data: Vec<f32> = (0..64 * 32 * 3)
            .map(|_| (rng.next_u64() % 256) as f32 / 255.0)
            .collect();
        let (w, h, back) = decode_ppm(&encode_ppm(64, 32, &data)).unwrap();
        assert_eq!((w, h), (64, 32));
        assert_eq!(
            back.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            data.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn ppm_bad_magic() {
        let err = decode_ppm(b"P5\n2 2\n255\n....").unwrap_err();
        assert!(err.to_string().contains("P6"));
    }

    #[test]
    fn pgm_round_trip_and_mask_values() {
        let gray = vec![0u8, 255, 255, 0, 0, 255, 0, 255];
        let (w, h, back) = decode_pgm(&encode_pgm(4, 2, &gray)).unwrap();
        assert_eq!((w, h, back), (4, 2, gray));

        let bad = encode_pgm(2, 1, &[0, 17]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        std::fs::write(&p, bad).unwrap();
        assert!(read_mask_pgm(&p).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let recs = vec![
            ManifestRecord {
                color: "a_color.ppm".into(),
                depth: "a_depth.pfm".into(),
                mask: "a_mask.pgm".into(),
                scene_id: "s0000".into(),
                yaw_k: 0,
            },
            ManifestRecord {
                color: "b_color.ppm".into(),
                depth: "b_depth.pfm".into(),
                mask: "b_mask.pgm".into(),
                scene_id: "s0000".into(),
                yaw_k: 3,
            },
        ];
        let text = encode_manifest(&recs);
        assert!(text.starts_with("color,depth,mask,scene_id,yaw_k\n"));
        assert_eq!(decode_manifest(&text).unwrap(), recs);
    }

    #[test]
    fn manifest_bad_rows() {
        assert!(decode_manifest("nonsense\n").is_err());
        let err =
            decode_manifest("color,depth,mask,scene_id,yaw_k\na,b,c,d,9\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
