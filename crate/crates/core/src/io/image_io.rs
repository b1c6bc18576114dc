//! 8-bit PNG and raw `f32` image files.
//!
//! Raw layout, little-endian: magic `A4DR`, `u32` height, `u32` width,
//! `u32` channels, then `height·width·channels` row-major `f32` samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub const RAW_MAGIC: [u8; 4] = *b"A4DR";

/// Reads a PNG as linear values in `[0, 1]`, dropping any alpha channel.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    Image::from_u8(rgb.width() as usize, rgb.height() as usize, 3, rgb.as_raw())
}

pub fn save_png(path: impl AsRef<Path>, im: &Image) -> Result<()> {
    let path = path.as_ref();
    let color = match im.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        c => return Err(Error::invalid(format!("cannot write a {c}-channel PNG"))),
    };
    image::save_buffer(path, &im.to_u8(), im.width as u32, im.height as u32, color)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn encode_raw(im: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * im.data.len());
    out.extend_from_slice(&RAW_MAGIC);
    for v in [im.height, im.width, im.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &im.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            what: "raw image header".into(),
            expected: 16,
            actual: bytes.len() as u64,
        });
    }
    if bytes[..4] != RAW_MAGIC {
        return Err(Error::BadMagic {
            expected: RAW_MAGIC,
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (u(4), u(8), u(12));
    let n = h * w * c;
    if bytes.len() - 16 < 4 * n {
        return Err(Error::Truncated {
            what: "raw image samples".into(),
            expected: n as u64,
            actual: ((bytes.len() - 16) / 4) as u64,
        });
    }
    let data = bytes[16..16 + 4 * n]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Image::from_data(w, h, c, data)
}

pub fn save_raw(path: impl AsRef<Path>, im: &Image) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_raw(im)).map_err(|e| Error::io(path, e))
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_raw(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
