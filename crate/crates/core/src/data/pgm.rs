//! Binary portable graymap (P5, 8-bit) reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    write!(out, "P5\n{} {}\n255\n", img.size, img.size)?;
    for &v in &img.pixels {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?;
    parse_pgm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    // header: magic, width, height, maxval — whitespace separated, '#' comments
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".to_string());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "bad header")?.to_string());
    }
    if fields[0] != "P5" {
        return Err(format!("not a P5 graymap (magic {})", fields[0]));
    }
    let width: usize = fields[1].parse().map_err(|_| "bad width")?;
    let height: usize = fields[2].parse().map_err(|_| "bad height")?;
    let maxval: usize = fields[3].parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if width != height {
        return Err(format!("expected a square image, got {width}x{height}"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(format!("pixel payload truncated: need {need}, have {}", bytes.len() - pos));
    }
    let pixels = bytes[pos..pos + need].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(GrayImage { size: width, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = GrayImage {
            size: 4,
            pixels: (0..16).map(|i| i as f32 / 15.0).collect(),
        };
        write_pgm(&img, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.size, 4);
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
        // writing what we read reproduces the file byte for byte
        let path2 = dir.path().join("y.pgm");
        write_pgm(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_non_p5_payloads() {
        assert!(parse_pgm(b"P2\n2 2\n255\n....").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\nxx").is_err());
    }
}
