//! Binary video container: magic "MCVDVID1", version byte, four u32 LE dims
//! (frames, height, width, channels), then f32 LE pixels in frame-major
//! order. Round trips are bitwise lossless.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array4;

use crate::error::{McvdError, Result};

use super::Video;

pub const VIDEO_MAGIC: &[u8; 8] = b"MCVDVID1";
const VIDEO_VERSION: u8 = 1;
/// Upper bound on total elements; keeps dims * 4 bytes well inside u64 and
/// rejects absurd headers before allocating.
const MAX_ELEMS: u64 = 1 << 31;

pub fn write_video(path: impl AsRef<Path>, video: &Video) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(VIDEO_MAGIC)?;
    f.write_all(&[VIDEO_VERSION])?;
    for &d in video.shape() {
        let d32 = u32::try_from(d)
            .map_err(|_| McvdError::DimOverflow(format!("dim {d} exceeds u32")))?;
        f.write_all(&d32.to_le_bytes())?;
    }
    let data = video
        .as_slice()
        .expect("video tensors are stored contiguously");
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

pub fn read_video(path: impl AsRef<Path>) -> Result<Video> {
    let bytes = std::fs::read(path)?;
    read_video_bytes(&bytes)
}

pub fn read_video_bytes(bytes: &[u8]) -> Result<Video> {
    if bytes.len() < 8 {
        return Err(McvdError::Truncated {
            expected: 8,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..8] != VIDEO_MAGIC {
        return Err(McvdError::BadMagic {
            expected: String::from_utf8_lossy(VIDEO_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    let mut rd = &bytes[8..];
    let mut ver = [0u8; 1];
    rd.read_exact(&mut ver)
        .map_err(|_| McvdError::Truncated {
            expected: 9,
            found: bytes.len() as u64,
        })?;
    if ver[0] != VIDEO_VERSION {
        return Err(McvdError::Version(ver[0]));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        rd.read_exact(&mut b).map_err(|_| McvdError::Truncated {
            expected: 25,
            found: bytes.len() as u64,
        })?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let elems = dims.iter().try_fold(1u64, |acc, &d| {
        acc.checked_mul(d as u64)
            .filter(|&n| n <= MAX_ELEMS)
            .ok_or_else(|| McvdError::DimOverflow(format!("dims {dims:?}")))
    })?;
    let expected = 8 + 1 + 16 + elems * 4;
    if bytes.len() as u64 != expected {
        return Err(McvdError::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut data = Vec::with_capacity(elems as usize);
    for chunk in rd.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
        .map_err(|e| McvdError::shape(e.to_string()))
}

/// Writes the video as one PNG with frames tiled horizontally. Grayscale for
/// 1 channel, RGB for 3. Values are clamped to [0, 1] and quantized to u8.
pub fn export_png_strip(path: impl AsRef<Path>, video: &Video) -> Result<()> {
    let (n, h, w, c) = {
        let s = video.shape();
        (s[0], s[1], s[2], s[3])
    };
    if !(c == 1 || c == 3) {
        return Err(McvdError::config(format!(
            "png export supports 1 or 3 channels, got {c}"
        )));
    }
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let strip_w = (n * w) as u32;
    let err = |e: image::ImageError| McvdError::numeric(format!("png encode: {e}"));
    if c == 1 {
        let img = image::GrayImage::from_fn(strip_w, h as u32, |x, y| {
            let f = x as usize / w;
            image::Luma([quant(video[(f, y as usize, x as usize % w, 0)])])
        });
        img.save(path).map_err(err)?;
    } else {
        let img = image::RgbImage::from_fn(strip_w, h as u32, |x, y| {
            let f = x as usize / w;
            let px = x as usize % w;
            image::Rgb([
                quant(video[(f, y as usize, px, 0)]),
                quant(video[(f, y as usize, px, 1)]),
                quant(video[(f, y as usize, px, 2)]),
            ])
        });
        img.save(path).map_err(err)?;
    }
    Ok(())
}
