//! Image and depth file codecs.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Decoded single-channel map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit RGB image mapped to `[0,1]`, row-major.
pub fn load_rgb(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img
        .pixels()
        .map(|p| p.0.map(|c| c as f64 / 255.0))
        .collect();
    Ok((w, h, px))
}

/// Mask image; any nonzero channel marks the pixel valid.
pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((
        w,
        h,
        img.pixels().map(|p| p.0.iter().any(|&c| c != 0)).collect(),
    ))
}

/// Depth file selected by extension: `.pfm`, or 16-bit grayscale `.png`
/// whose raw integer values are returned unscaled.
pub fn load_depth_file(path: &Path) -> Result<Map> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("pfm") => read_pfm(path),
        Some("png") => match open_image(path)? {
            DynamicImage::ImageLuma16(img) => Ok(Map {
                width: img.width() as usize,
                height: img.height() as usize,
                values: img.pixels().map(|p| p.0[0] as f64).collect(),
            }),
            _ => Err(Error::DepthFormat(path.to_path_buf())),
        },
        _ => Err(Error::DepthFormat(path.to_path_buf())),
    }
}

fn pfm_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Pfm {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a single-channel PFM ("Pf"); rows are stored bottom to top and the
/// sign of the scale field selects the byte order.
pub fn read_pfm(path: &Path) -> Result<Map> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(pfm_error(path, "truncated header"));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        pos += 1;
        Ok(t)
    };
    let magic = token()?;
    if magic != "Pf" {
        return Err(pfm_error(path, format!("unsupported magic {magic:?}")));
    }
    let parse = |t: String, what: &str| -> Result<f64> {
        t.parse::<f64>()
            .map_err(|_| pfm_error(path, format!("bad {what} {t:?}")))
    };
    let w = parse(token()?, "width")?;
    let h = parse(token()?, "height")?;
    let scale = parse(token()?, "scale")?;
    if !(w >= 1.0 && h >= 1.0 && w.fract() == 0.0 && h.fract() == 0.0) || scale == 0.0 {
        return Err(pfm_error(path, "invalid header values"));
    }
    let (w, h) = (w as usize, h as usize);
    let data = &bytes[pos.min(bytes.len())..];
    if data.len() < w * h * 4 {
        return Err(pfm_error(path, "truncated pixel data"));
    }
    let little = scale < 0.0;
    let mut values = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let k = (row * w + col) * 4;
            let b = [data[k], data[k + 1], data[k + 2], data[k + 3]];
            let v = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            values[(h - 1 - row) * w + col] = v as f64;
        }
    }
    Ok(Map {
        width: w,
        height: h,
        values,
    })
}

/// Writes a little-endian single-channel PFM.
pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: width * height,
        });
    }
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for v in &values[row * width..(row + 1) * width] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    write_file(path, &out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB PNG from `[0,1]` values (clamped).
pub fn save_rgb(path: &Path, width: usize, height: usize, pixels: &[[f64; 3]]) -> Result<()> {
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
            Rgb(pixels[y as usize * width + x as usize].map(to_u8))
        });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit grayscale PNG from booleans (255 = true).
pub fn save_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
            Luma([if mask[y as usize * width + x as usize] {
                255
            } else {
                0
            }])
        });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 16-bit grayscale PNG storing rounded, clamped raw values.
pub fn save_u16(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
            Luma([values[y as usize * width + x as usize]
                .round()
                .clamp(0.0, 65535.0) as u16])
        });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Normals encoded as `(n + 1) / 2` in RGB.
pub fn save_normals(path: &Path, width: usize, height: usize, normals: &[[f64; 3]]) -> Result<()> {
    let px: Vec<[f64; 3]> = normals.iter().map(|n| n.map(|c| (c + 1.0) * 0.5)).collect();
    save_rgb(path, width, height, &px)
}
