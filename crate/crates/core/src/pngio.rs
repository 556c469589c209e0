//! Grayscale PNG import/export for images and label masks, plus RGB writes
//! for overlays.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelMask};

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

struct Gray {
    width: usize,
    height: usize,
    /// Samples widened to u16; `max` is the sample range of the source depth.
    samples: Vec<u16>,
    max: u16,
}

fn read_gray(path: &Path) -> Result<Gray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(png_err(path, format!("expected grayscale, found {:?}", info.color_type)));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let (samples, max) = match info.bit_depth {
        png::BitDepth::Eight => (
            (0..height)
                .flat_map(|r| buf[r * info.line_size..r * info.line_size + width].to_vec())
                .map(u16::from)
                .collect(),
            u8::MAX as u16,
        ),
        png::BitDepth::Sixteen => (
            (0..height)
                .flat_map(|r| {
                    let row = &buf[r * info.line_size..r * info.line_size + 2 * width];
                    row.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect::<Vec<_>>()
                })
                .collect(),
            u16::MAX,
        ),
        other => return Err(png_err(path, format!("unsupported bit depth {other:?}"))),
    };
    Ok(Gray { width, height, samples, max })
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
        writer.write_image_data(data).map_err(|e| png_err(path, e))?;
        writer.finish().map_err(|e| png_err(path, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an 8- or 16-bit grayscale PNG, scaling samples to `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let g = read_gray(path.as_ref())?;
    let scale = 1.0 / g.max as f32;
    ImageGrid::new(g.height, g.width, g.samples.iter().map(|&s| s as f32 * scale).collect())
}

/// Writes an image as 16-bit grayscale, clamping to `[0, 1]`.
pub fn write_image(path: impl AsRef<Path>, img: &ImageGrid) -> Result<()> {
    let data: Vec<u8> =
        img.values().iter().flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes()).collect();
    write_png(path.as_ref(), img.width(), img.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
}

/// Reads a label mask; the pixel value is the instance id.
pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let g = read_gray(path.as_ref())?;
    LabelMask::new(g.height, g.width, g.samples.into_iter().map(u32::from).collect())
}

/// Writes a label mask as 16-bit grayscale; ids above 65535 are rejected.
pub fn write_mask(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    if mask.max_id() > u16::MAX as u32 {
        return Err(Error::Format(format!("mask id {} exceeds 16 bits", mask.max_id())));
    }
    let data: Vec<u8> = mask.ids().iter().flat_map(|&id| (id as u16).to_be_bytes()).collect();
    write_png(path.as_ref(), mask.width(), mask.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
}

/// Writes packed 8-bit RGB pixels.
pub fn write_rgb(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Shape("rgb buffer does not match dims".into()));
    }
    write_png(path.as_ref(), width, height, png::ColorType::Rgb, png::BitDepth::Eight, rgb)
}
