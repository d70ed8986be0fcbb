//! 8-bit PNG reading and writing. Images are RGB, masks are grayscale with
//! tampered pixels white.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use png::{BitDepth, ColorType, Decoder, Encoder, Limits, Transformations};
use thiserror::Error;

use super::{Image, Mask};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PNG: {0}")]
    Decode(String),
    #[error("PNG encoding failed: {0}")]
    Encode(String),
    #[error("unsupported PNG bit depth {0}, only 8-bit is accepted")]
    BitDepth(u8),
    #[error("image of {width}x{height} exceeds the {limit}-pixel side limit")]
    TooLarge { width: u32, height: u32, limit: u32 },
    #[error("buffer holds {actual} bytes, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
}

type Result<T> = std::result::Result<T, ImageIoError>;

/// Largest accepted side length; keeps untrusted headers from forcing huge allocations.
pub const MAX_SIDE: u32 = 8192;

/// Decoded 8-bit raster, interleaved, with 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Decodes PNG bytes to gray or RGB, dropping any alpha channel.
pub fn decode_png(bytes: &[u8]) -> Result<Raster8> {
    let mut decoder = Decoder::new_with_limits(Cursor::new(bytes), Limits { bytes: 1 << 26 });
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| ImageIoError::Decode(e.to_string()))?;
    let (width, height) = reader.info().size();
    if width > MAX_SIDE || height > MAX_SIDE {
        return Err(ImageIoError::TooLarge {
            width,
            height,
            limit: MAX_SIDE,
        });
    }
    let (color, depth) = reader.output_color_type();
    if depth != BitDepth::Eight {
        return Err(ImageIoError::BitDepth(depth as u8));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageIoError::Decode("frame size overflows".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageIoError::Decode(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    let (w, h) = (frame.width as usize, frame.height as usize);
    let (src_c, keep) = match color {
        ColorType::Grayscale => (1, 1),
        ColorType::GrayscaleAlpha => (2, 1),
        ColorType::Rgb => (3, 3),
        ColorType::Rgba => (4, 3),
        ColorType::Indexed => return Err(ImageIoError::Decode("palette was not expanded".into())),
    };
    let stride = frame.line_size;
    let mut data = Vec::with_capacity(w * h * keep);
    for y in 0..h {
        let row = &buf[y * stride..y * stride + w * src_c];
        for px in row.chunks_exact(src_c) {
            data.extend_from_slice(&px[..keep]);
        }
    }
    Ok(Raster8 {
        width: w,
        height: h,
        channels: keep,
        data,
    })
}

pub fn encode_png(raster: &Raster8) -> Result<Vec<u8>> {
    let expected = raster.width * raster.height * raster.channels;
    if raster.data.len() != expected {
        return Err(ImageIoError::BufferSize {
            expected,
            actual: raster.data.len(),
        });
    }
    let color = match raster.channels {
        1 => ColorType::Grayscale,
        3 => ColorType::Rgb,
        n => return Err(ImageIoError::Encode(format!("{n} channels"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = Encoder::new(&mut out, raster.width as u32, raster.height as u32);
        enc.set_color(color);
        enc.set_depth(BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| ImageIoError::Encode(e.to_string()))?;
        writer
            .write_image_data(&raster.data)
            .map_err(|e| ImageIoError::Encode(e.to_string()))?;
        writer.finish().map_err(|e| ImageIoError::Encode(e.to_string()))?;
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| ImageIoError::Read {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_raster(raster: &Raster8, path: &Path) -> Result<()> {
    let bytes = encode_png(raster)?;
    fs::write(path, bytes).map_err(|source| ImageIoError::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Image {
    /// Gray rasters are replicated into all three channels.
    pub fn from_raster(r: &Raster8) -> Image {
        Image::from_fn(r.height, r.width, |c, y, x| {
            let ch = if r.channels == 1 { 0 } else { c };
            f32::from(r.data[(y * r.width + x) * r.channels + ch]) / 255.0
        })
    }

    pub fn to_raster(&self) -> Raster8 {
        let mut data = Vec::with_capacity(3 * self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    data.push(to_u8(self.get(c, y, x)));
                }
            }
        }
        Raster8 {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }
}

impl Mask {
    /// Pixels at or above mid-gray are tampered; colour masks use their first channel.
    pub fn from_raster(r: &Raster8) -> Mask {
        let mut m = Mask::new(r.height, r.width);
        for (i, px) in r.data.chunks_exact(r.channels).enumerate() {
            m.data[i] = u8::from(px[0] >= 128);
        }
        m
    }

    pub fn to_raster(&self) -> Raster8 {
        Raster8 {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect(),
        }
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    Ok(Image::from_raster(&decode_png(&read_bytes(path)?)?))
}

pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    write_raster(&image.to_raster(), path)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(Mask::from_raster(&decode_png(&read_bytes(path)?)?))
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    write_raster(&mask.to_raster(), path)
}

/// Writes a probability map in `[0, 1]` as 8-bit gray, 1.0 mapping to white.
pub fn write_probability_map(values: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    let raster = Raster8 {
        width,
        height,
        channels: 1,
        data: values.iter().map(|&v| to_u8(v)).collect(),
    };
    write_raster(&raster, path)
}

/// Every `.png` in `dir`, sorted by file name, resized to `height x width`.
pub fn load_image_folder(dir: &Path, height: usize, width: usize) -> crate::Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| crate::Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let img = read_image(p)?;
            super::resize::resize_image(&img, height, width)
        })
        .collect()
}
