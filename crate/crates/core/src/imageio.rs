//! PNG encodings: 16-bit grayscale images and 8-bit paletted label masks.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};

/// Display colors of the four label classes.
const PALETTE: [u8; 12] = [0, 0, 0, 220, 50, 47, 133, 153, 0, 38, 139, 210];

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn encode_err(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.to_path_buf(), reason: other.to_string() },
    }
}

pub fn write_gray16(path: &Path, width: usize, height: usize, pixels: &[u16]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut enc = png::Encoder::new(create(path)?, width as u32, height as u32);
    enc.set_color(ColorType::Grayscale);
    enc.set_depth(BitDepth::Sixteen);
    let mut w = enc.write_header().map_err(|e| encode_err(path, e))?;
    let bytes: Vec<u8> = pixels.iter().flat_map(|v| v.to_be_bytes()).collect();
    w.write_image_data(&bytes).map_err(|e| encode_err(path, e))?;
    w.finish().map_err(|e| encode_err(path, e))
}

pub fn write_mask(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    assert_eq!(labels.len(), width * height);
    let mut enc = png::Encoder::new(create(path)?, width as u32, height as u32);
    enc.set_color(ColorType::Indexed);
    enc.set_depth(BitDepth::Eight);
    enc.set_palette(PALETTE.to_vec());
    let mut w = enc.write_header().map_err(|e| encode_err(path, e))?;
    w.write_image_data(labels).map_err(|e| encode_err(path, e))?;
    w.finish().map_err(|e| encode_err(path, e))
}

/// Decoded single-channel raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<P> {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<P>,
}

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(Transformations::IDENTITY);
    let bad = |e: png::DecodingError| Error::Image { path: path.to_path_buf(), reason: e.to_string() };
    let mut reader = dec.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Reads an 8- or 16-bit grayscale PNG as raw intensities.
pub fn read_gray(path: &Path) -> Result<Raster<f32>> {
    let (info, buf) = decode(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels: Vec<f32> = match (info.color_type, info.bit_depth) {
        (ColorType::Grayscale, BitDepth::Sixteen) => {
            buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f32).collect()
        }
        (ColorType::Grayscale, BitDepth::Eight) => buf.iter().map(|&b| b as f32).collect(),
        (ct, bd) => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                reason: format!("unsupported image encoding {ct:?}/{bd:?}"),
            })
        }
    };
    Ok(Raster { width: w, height: h, pixels })
}

/// Reads an 8-bit paletted or grayscale label PNG.
pub fn read_mask(path: &Path) -> Result<Raster<u8>> {
    let (info, buf) = decode(path)?;
    match (info.color_type, info.bit_depth) {
        (ColorType::Indexed | ColorType::Grayscale, BitDepth::Eight) => {
            Ok(Raster { width: info.width as usize, height: info.height as usize, pixels: buf })
        }
        (ct, bd) => Err(Error::Image {
            path: path.to_path_buf(),
            reason: format!("unsupported mask encoding {ct:?}/{bd:?}"),
        }),
    }
}

/// Maps `[-1, 1]` onto the full 16-bit range.
pub fn to_u16(v: f32) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 65535.0).round() as u16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray16_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        let px: Vec<u16> = (0..12).map(|i| i * 5000).collect();
        write_gray16(&p, 4, 3, &px).unwrap();
        let r = read_gray(&p).unwrap();
        assert_eq!((r.width, r.height), (4, 3));
        assert_eq!(r.pixels, px.iter().map(|&v| v as f32).collect::<Vec<_>>());
    }

    #[test]
    fn mask_roundtrip_keeps_indices() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.png");
        let labels = vec![0, 1, 2, 3, 3, 2];
        write_mask(&p, 3, 2, &labels).unwrap();
        assert_eq!(read_mask(&p).unwrap().pixels, labels);
    }

    #[test]
    fn missing_file_is_named() {
        let err = read_mask(Path::new("/nonexistent/m.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/m.png"));
    }

    #[test]
    fn u16_mapping_endpoints() {
        assert_eq!(to_u16(-1.0), 0);
        assert_eq!(to_u16(1.0), 65535);
        assert_eq!(to_u16(3.0), 65535);
    }
}
