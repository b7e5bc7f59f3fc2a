//! Netpbm greymap/pixmap codec.
//!
//! Reads plain (`P2`/`P3`) and binary (`P5`/`P6`) files with any maxval up to
//! 65535; writes 8-bit binary files. Decoded images are `1×C×H×W` tensors
//! with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Map `[0, 1]` to an 8-bit level (clamped, round half away from zero).
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Header {
    channels: usize,
    binary: bool,
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Next whitespace-separated header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(malformed(path, "unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, path: &Path, what: &str) -> Result<u32> {
    let t = token(bytes, pos, path)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed(path, format!("bad {what} `{}`", String::from_utf8_lossy(t))))
}

fn header(bytes: &[u8], path: &Path) -> Result<Header> {
    let magic = &bytes[..bytes.len().min(2)];
    let (channels, binary) = match magic {
        b"P2" => (1, false),
        b"P3" => (3, false),
        b"P5" => (1, true),
        b"P6" => (3, true),
        _ => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                magic: magic.to_vec(),
            })
        }
    };
    let mut pos = 2;
    let width = number(bytes, &mut pos, path, "width")? as usize;
    let height = number(bytes, &mut pos, path, "height")? as usize;
    let maxval = number(bytes, &mut pos, path, "maxval")?;
    if width == 0 || height == 0 {
        return Err(malformed(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(malformed(path, format!("maxval {maxval} outside 1..=65535")));
    }
    // exactly one whitespace byte separates the header from binary data
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed(path, "missing whitespace after maxval"));
    }
    Ok(Header {
        channels,
        binary,
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Decode an in-memory file; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let h = header(bytes, path)?;
    let count = h.channels * h.width * h.height;
    let mut interleaved = Vec::with_capacity(count);
    if h.binary {
        let wide = h.maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let body = &bytes[h.data_start..];
        if body.len() < need {
            return Err(malformed(path, format!("expected {need} data bytes, found {}", body.len())));
        }
        if wide {
            interleaved.extend(body[..need].chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as u32));
        } else {
            interleaved.extend(body[..need].iter().map(|&b| b as u32));
        }
    } else {
        let mut pos = h.data_start;
        for _ in 0..count {
            interleaved.push(number(bytes, &mut pos, path, "sample")?);
        }
    }
    if let Some(v) = interleaved.iter().find(|&&v| v > h.maxval) {
        return Err(malformed(path, format!("sample {v} exceeds maxval {}", h.maxval)));
    }
    let plane = h.width * h.height;
    let scale = h.maxval as f32;
    let data = Tensor::from_fn(&[1, h.channels, h.height, h.width], |i| {
        let (c, p) = (i / plane, i % plane);
        interleaved[p * h.channels + c] as f32 / scale
    });
    Ok(data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Encode a `1×C×H×W` image (`C` of 1 or 3) as 8-bit `P5`/`P6`.
pub fn encode(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, c, h, w) = img.dims4("pnm encode")?;
    if n != 1 {
        return Err(Error::shape("pnm encode", "batch (dim 0)", 1, n));
    }
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::invalid("pnm encode", format!("{c} channels; only 1 or 3 can be written"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    out.reserve(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize(d[ch * plane + p]));
        }
    }
    Ok(out)
}

pub fn write_image(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
