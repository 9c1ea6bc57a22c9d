//! Binary netpbm images: P6 (RGB) and P5 (grayscale), 8- or 16-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

/// Decodes a P5/P6 image into a `[C, H, W]` tensor scaled to `[0, 1]`.
pub fn decode(origin: &Path, bytes: &[u8]) -> Result<Tensor> {
    let bad = |d: &str| Error::format(origin, d.to_string());
    let mut pos = 0;
    let magic = token(bytes, &mut pos).ok_or_else(|| bad("missing magic"))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(bad("not a binary PPM/PGM (expected P5 or P6)")),
    };
    let mut header = [0usize; 3];
    for v in &mut header {
        let t = token(bytes, &mut pos).ok_or_else(|| bad("truncated header"))?;
        *v = std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    let [w, h, maxval] = header;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("invalid dimensions or maxval"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let wide = maxval > 255;
    let need = w * h * channels * if wide { 2 } else { 1 };
    let raster = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated raster"))?;
    let scale = maxval as f64;
    let mut data = vec![0.0; w * h * channels];
    for p in 0..w * h {
        for c in 0..channels {
            let i = p * channels + c;
            let v = if wide {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as f64
            } else {
                raster[i] as f64
            };
            data[c * w * h + p] = (v / scale).min(1.0);
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if bytes.get(*pos) == Some(&b'#') {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

/// Encodes a `[C, H, W]` tensor with `C` in {1, 3} as 8-bit P5/P6. Values are
/// clamped to `[0, 1]` and rounded.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        ref s => {
            return Err(Error::shape(
                "ppm encode",
                format!("expected [1|3, H, W], got {s:?}"),
            ))
        }
    };
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 3 { "P6" } else { "P5" }).into_bytes();
    for p in 0..h * w {
        for ch in 0..c {
            let v = image.data()[ch * h * w + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(path, &io::read_file(path)?)
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    io::write_file(path, &encode(image)?)
}
