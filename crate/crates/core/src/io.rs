//! Image files: 8-bit grayscale PNG for viewing and a lossless raw dump.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const RAW_MAGIC: &[u8; 4] = b"AMTR";
pub const RAW_VERSION: u32 = 1;

/// Maps `[-1, 1]` linearly onto `0..=255`, clamping outside values.
pub fn to_gray8(img: &ImageTensor) -> Vec<u8> {
    img.data
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect()
}

pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Png(format!("only single-channel images are written, got {}", img.channels)));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(&to_gray8(img))
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

/// Reads an 8-bit grayscale PNG back into `[-1, 1]`.
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png("expected 8-bit grayscale".into()));
    }
    let data = buf[..info.buffer_size()]
        .iter()
        .map(|&b| b as f32 / 127.5 - 1.0)
        .collect();
    ImageTensor::from_vec(1, info.height as usize, info.width as usize, data)
}

/// `AMTR`, version, `C`, `H`, `W` (all u32 LE), then f32 LE values.
pub fn encode_raw(img: &ImageTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * img.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    for d in [img.channels, img.height, img.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<ImageTensor> {
    let bad = |m: &str| Error::Checkpoint(format!("raw image: {m}"));
    if bytes.len() < 20 || &bytes[..4] != RAW_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != RAW_VERSION {
        return Err(bad("unsupported version"));
    }
    let (c, h, w) = (word(8) as usize, word(12) as usize, word(16) as usize);
    let body = &bytes[20..];
    if body.len() != 4 * c * h * w {
        return Err(bad("truncated data"));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ImageTensor::from_vec(c, h, w, data)
}

pub fn write_raw(path: &Path, img: &ImageTensor) -> Result<()> {
    fs::write(path, encode_raw(img)).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<ImageTensor> {
    decode_raw(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn raw_round_trip_is_exact() {
        let img = ImageTensor::standard_normal(1, 5, 7, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(decode_raw(&encode_raw(&img)).unwrap(), img);
        let mut bytes = encode_raw(&img);
        bytes.pop();
        assert!(decode_raw(&bytes).is_err());
        assert!(decode_raw(b"nope").is_err());
    }

    #[test]
    fn png_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let data = (0..64).map(|i| i as f32 / 31.5 - 1.0).collect();
        let img = ImageTensor::from_vec(1, 8, 8, data).unwrap();
        let path = dir.path().join("a.png");
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn gray8_maps_endpoints_and_clamps() {
        let img = ImageTensor::from_vec(1, 1, 4, vec![-1.0, 1.0, -3.0, 0.0]).unwrap();
        assert_eq!(to_gray8(&img), vec![0, 255, 0, 128]);
    }
}
