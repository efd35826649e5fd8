//! Binary PPM (P6, maxval 255) images. A pixel value `v` is stored as
//! `round(v * 255)`; decoding yields `byte / 255`, so decode-encode is exact.

use std::fs;
use std::path::Path;

use crate::error::{format_err, Result};
use crate::numerics::Tensor;

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(format_err!("PPM needs 3 channels, got {c}"));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let px = image.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = px[(ch * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err!("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err!("non-ASCII PPM header"))?);
    }
    if fields[0] != "P6" {
        return Err(format_err!("not a binary PPM (magic {:?})", fields[0]));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err!("bad PPM header field {s:?}"))
    };
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(format_err!("only maxval 255 is supported, got {maxval}"));
    }
    if w == 0 || h == 0 {
        return Err(format_err!("empty PPM image"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes
        .get(pos..pos + 3 * w * h)
        .ok_or_else(|| format_err!("PPM raster truncated"))?;
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data[(ch * h + y) * w + x] = raster[(y * w + x) * 3 + ch] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}
