//! Frame and depth-map files.
//!
//! `WFIMG <rows> <cols> <channels>` and `WFDEPTH <rows> <cols>` headers are followed by
//! little-endian f32 samples in row-major, channel-interleaved order. PNG samples are read and
//! written as linear intensity in `[0, 1]`.

use std::io::{BufRead, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};

use crate::error::{invalid, Error, Result};
use crate::field::parse_token;

fn header(r: &mut impl BufRead, magic: &str, fields: usize) -> Result<Vec<usize>> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let p: Vec<&str> = line.split_whitespace().collect();
    if p.len() != fields + 1 || p[0] != magic {
        return Err(Error::Parse(format!("bad {magic} header: {:?}", line.trim_end())));
    }
    p[1..].iter().map(|t| parse_token(t)).collect()
}

fn read_f32s(r: &mut impl BufRead, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

pub fn write_image<W: Write>(image: &Array3<f64>, mut w: W) -> Result<()> {
    let (ch, rows, cols) = image.dim();
    writeln!(w, "WFIMG {rows} {cols} {ch}")?;
    let mut buf = Vec::with_capacity(rows * cols * ch * 4);
    for i in 0..rows {
        for j in 0..cols {
            for c in 0..ch {
                buf.extend_from_slice(&(image[[c, i, j]] as f32).to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_image<R: BufRead>(mut r: R) -> Result<Array3<f64>> {
    let h = header(&mut r, "WFIMG", 3)?;
    let (rows, cols, ch) = (h[0], h[1], h[2]);
    let v = read_f32s(&mut r, rows * cols * ch)?;
    Ok(Array3::from_shape_fn((ch, rows, cols), |(c, i, j)| {
        v[(i * cols + j) * ch + c]
    }))
}

pub fn write_depth<W: Write>(depth: &Array2<f64>, mut w: W) -> Result<()> {
    let (rows, cols) = depth.dim();
    writeln!(w, "WFDEPTH {rows} {cols}")?;
    let mut buf = Vec::with_capacity(rows * cols * 4);
    for v in depth.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_depth<R: BufRead>(mut r: R) -> Result<Array2<f64>> {
    let h = header(&mut r, "WFDEPTH", 2)?;
    let v = read_f32s(&mut r, h[0] * h[1])?;
    Array2::from_shape_vec((h[0], h[1]), v).map_err(|e| Error::Parse(e.to_string()))
}

fn image_err(e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(e) => Error::Io(e),
        other => Error::Parse(other.to_string()),
    }
}

/// Gray or RGB(A) PNG, 8 or 16 bit; alpha is dropped.
pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(image_err)?;
    let gray = !img.color().has_color();
    let (cols, rows) = (img.width() as usize, img.height() as usize);
    if gray {
        let g = img.into_luma16();
        Ok(Array3::from_shape_fn((1, rows, cols), |(_, i, j)| {
            g.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0
        }))
    } else {
        let c = img.into_rgb16();
        Ok(Array3::from_shape_fn((3, rows, cols), |(k, i, j)| {
            c.get_pixel(j as u32, i as u32)[k] as f64 / 65535.0
        }))
    }
}

/// Write a 1- or 3-channel frame, clamped to `[0, 1]`, at 8 or 16 bits.
pub fn write_png(path: &Path, image: &Array3<f64>, bits: u8) -> Result<()> {
    let (ch, rows, cols) = image.dim();
    let (w, h) = (cols as u32, rows as u32);
    let q = |v: f64, max: f64| (v.clamp(0.0, 1.0) * max).round();
    let dynamic = match (ch, bits) {
        (1, 8) => DynamicImage::ImageLuma8(ImageBuffer::from_fn(w, h, |x, y| {
            Luma([q(image[[0, y as usize, x as usize]], 255.0) as u8])
        })),
        (1, 16) => DynamicImage::ImageLuma16(ImageBuffer::from_fn(w, h, |x, y| {
            Luma([q(image[[0, y as usize, x as usize]], 65535.0) as u16])
        })),
        (3, 8) => DynamicImage::ImageRgb8(ImageBuffer::from_fn(w, h, |x, y| {
            Rgb(std::array::from_fn(|k| {
                q(image[[k, y as usize, x as usize]], 255.0) as u8
            }))
        })),
        (3, 16) => DynamicImage::ImageRgb16(ImageBuffer::from_fn(w, h, |x, y| {
            Rgb(std::array::from_fn(|k| {
                q(image[[k, y as usize, x as usize]], 65535.0) as u16
            }))
        })),
        _ => {
            return invalid(format!(
                "PNG output needs 1 or 3 channels at 8 or 16 bits, got {ch} / {bits}"
            ))
        }
    };
    dynamic
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err)
}

/// Frame from either a `WFIMG` raw file or a PNG.
pub fn load_frame(path: &Path) -> Result<Array3<f64>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    if r.fill_buf()?.starts_with(b"WFIMG") {
        read_image(r)
    } else {
        read_png(path)
    }
}

/// Log-scaled 8-bit preview spanning `decades` below the peak.
pub fn log_preview(values: &Array2<f64>, decades: f64) -> Array3<f64> {
    let peak = values.iter().copied().fold(0.0, f64::max);
    let (r, c) = values.dim();
    Array3::from_shape_fn((1, r, c), |(_, i, j)| {
        if peak <= 0.0 {
            return 0.0;
        }
        let v = (values[[i, j]] / peak).max(10f64.powf(-decades));
        1.0 + v.log10() / decades
    })
}
