//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit interleaved pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    /// `H×W×C` tensor scaled by 1/255.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::from_parts(vec![self.height, self.width, self.channels], data)
    }

    /// Quantizes an `H×W×C` or `H×W` tensor in `[0, 1]` (values are clamped).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (height, width, channels) = match t.shape() {
            [h, w, c] => (*h, *w, *c),
            [h, w] => (*h, *w, 1),
            s => return Err(Error::shape(format!("image tensor must be H×W[×C], got {s:?}"))),
        };
        let pixels = t.data().iter().map(|&v| quantize(v)).collect();
        Ok(RawImage {
            width,
            height,
            channels,
            pixels,
        })
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(img: &RawImage) -> Result<Vec<u8>> {
    let magic = match img.channels {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::invalid(format!("cannot encode {c}-channel image"))),
    };
    if img.pixels.len() != img.width * img.height * img.channels {
        return Err(Error::shape("pixel buffer does not match image size"));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    Ok(out)
}

pub fn write(path: &Path, img: &RawImage) -> Result<()> {
    fs::write(path, encode(img)?).map_err(|e| Error::io(path, e))
}

/// Writes an `H×W×3` tensor as PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let raw = RawImage::from_tensor(image)?;
    if raw.channels != 3 {
        return Err(Error::shape("PPM needs three channels"));
    }
    write(path, &raw)
}

/// Writes an `H×W` tensor in `[0, 1]` as PGM.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let raw = RawImage::from_tensor(map)?;
    if raw.channels != 1 {
        return Err(Error::shape("PGM needs a single channel"));
    }
    write(path, &raw)
}

fn header_tokens(bytes: &[u8], count: usize, path: &Path) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::format(path, "truncated header"));
    }
    Ok((tokens, i + 1))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<RawImage> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::format(path, "bad magic, expected P6 or P5")),
    };
    let (tok, offset) = header_tokens(&bytes[2..], 3, path)?;
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad {what} {s:?}")))
    };
    let width = num(&tok[0], "width")?;
    let height = num(&tok[1], "height")?;
    let maxval = num(&tok[2], "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(Error::format(path, format!("only 8-bit images are supported, maxval {maxval}")));
    }
    let body = &bytes[2 + offset..];
    let need = width * height * channels;
    if body.len() < need {
        return Err(Error::format(
            path,
            format!("truncated payload: {} of {need} bytes", body.len()),
        ));
    }
    Ok(RawImage {
        width,
        height,
        channels,
        pixels: body[..need].to_vec(),
    })
}

pub fn read(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads a P6 image as an `H×W×3` tensor in `[0, 1]`, optionally checking its size.
pub fn read_image(path: &Path, expected: Option<(usize, usize)>) -> Result<Tensor> {
    let raw = read(path)?;
    if raw.channels != 3 {
        return Err(Error::format(path, "expected an RGB (P6) image"));
    }
    if let Some((w, h)) = expected {
        if (raw.width, raw.height) != (w, h) {
            return Err(Error::format(
                path,
                format!("image is {}×{}, expected {w}×{h}", raw.width, raw.height),
            ));
        }
    }
    Ok(raw.to_tensor())
}
