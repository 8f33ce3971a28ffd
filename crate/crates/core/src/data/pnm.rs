//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(magic: &str, x: &Tensor, channels: usize) -> Result<Vec<u8>> {
    let sh = x.shape();
    let (h, w) = match *sh {
        [c, h, w] if c == channels => (h, w),
        [h, w] if channels == 1 => (h, w),
        _ => {
            return Err(Error::Dimension(format!(
                "{magic} needs a [{channels}, H, W] tensor, got {sh:?}"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(plane * channels);
    // planar tensor -> interleaved pixels
    for p in 0..plane {
        for c in 0..channels {
            out.push(quantize(x.data()[c * plane + p]));
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8], magic: &str, channels: usize) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("truncated {magic} header")));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    if fields[0] != magic {
        return Err(Error::Format(format!("expected magic {magic}, found `{}`", fields[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::Format(format!("bad {what} `{s}` in {magic} header")))
    };
    let w = num(&fields[1], "width")?;
    let h = num(&fields[2], "height")?;
    let maxval = num(&fields[3], "maxval")?;
    if maxval > 255 {
        return Err(Error::Format(format!("maxval {maxval} needs 16-bit samples, unsupported")));
    }
    // exactly one whitespace byte separates the header from the payload
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format(format!("truncated {magic} header")));
    }
    pos += 1;
    let plane = h * w;
    let payload = &bytes[pos..];
    if payload.len() < plane * channels {
        return Err(Error::Format(format!(
            "{magic} payload has {} bytes, expected {}",
            payload.len(),
            plane * channels
        )));
    }
    let scale = maxval as f64;
    Ok(Tensor::from_fn(&[channels, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        payload[p * channels + c] as f64 / scale
    }))
}

pub fn encode_pgm(x: &Tensor) -> Result<Vec<u8>> {
    encode("P5", x, 1)
}

pub fn encode_ppm(x: &Tensor) -> Result<Vec<u8>> {
    encode("P6", x, 3)
}

/// Decodes to a `[1, H, W]` tensor with values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, "P5", 1)
}

/// Decodes to a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, "P6", 3)
}

pub fn write_pgm(path: impl AsRef<Path>, x: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_pgm(x)?)?)
}

pub fn write_ppm(path: impl AsRef<Path>, x: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_ppm(x)?)?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}
