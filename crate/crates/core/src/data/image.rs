//! Image decoding (binary PPM/PGM, RT01 tensors) and resizing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_rt01, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Pgm,
    Rt01,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("ppm") => Ok(Self::Ppm),
            Some("pgm") => Ok(Self::Pgm),
            Some("rt") | Some("rt01") => Ok(Self::Rt01),
            _ => Err(Error::UnsupportedFormat(path.to_path_buf())),
        }
    }
}

/// Decodes `P6` or `P5` bytes to `[3, h, w]` intensities in `[0, 1]`.
/// Grayscale is replicated to three channels.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let corrupt = |msg: &str| Error::CorruptHeader {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut token = || -> Option<&[u8]> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| &bytes[start..pos])
    };
    let channels = match token() {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(corrupt("expected P6 or P5 magic")),
    };
    let mut number = |what: &str| -> Result<usize> {
        token()
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| corrupt(&format!("missing or malformed {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 || !(1..=65535).contains(&maxval) {
        return Err(corrupt(
            "dimensions and maxval must be positive, maxval ≤ 65535",
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let bps = if maxval > 255 { 2 } else { 1 };
    let expected = width * height * channels * bps;
    if bytes.len() < start + expected {
        return Err(corrupt(&format!(
            "raster holds {} bytes, header implies {expected}",
            bytes.len().saturating_sub(start)
        )));
    }
    let raster = &bytes[start..start + expected];
    let scale = 1.0 / maxval as f32;
    let sample = |i: usize| -> f32 {
        let v = if bps == 2 {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as f32
        } else {
            raster[i] as f32
        };
        (v * scale).min(1.0)
    };
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let src = if channels == 3 { 3 * p + c } else { p };
            data[c * plane + p] = sample(src);
        }
    }
    Tensor::new(&[3, height, width], data)
}

/// Reads any supported image file to `[3, h, w]` intensities in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let format = ImageFormat::from_path(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        ImageFormat::Ppm | ImageFormat::Pgm => decode_pnm(&bytes, path),
        ImageFormat::Rt01 => {
            let t = read_rt01(&mut bytes.as_slice()).map_err(|e| Error::CorruptHeader {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?;
            match t.dims() {
                [3, _, _] => Ok(t),
                [1, h, w] => {
                    let (h, w) = (*h, *w);
                    let mut data = t.into_data();
                    data.extend_from_within(..);
                    data.extend_from_within(..h * w);
                    Tensor::new(&[3, h, w], data)
                }
                d => Err(Error::CorruptHeader {
                    path: path.to_path_buf(),
                    msg: format!("expected [3,h,w] or [1,h,w], found {d:?}"),
                }),
            }
        }
    }
}

/// Bilinear resize of a `[c, h, w]` image with half-pixel centers.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = img.dims() else {
        return Err(Error::shape(
            "resize",
            format!("expected [c,h,w], got {:?}", img.dims()),
        ));
    };
    let (c, h, w) = (*c, *h, *w);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, h), axis(out_w, w));
    let src = img.data();
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], data)
}

/// `(x − 0.5) / 0.5` per value.
pub fn normalize(img: &mut Tensor) {
    for v in img.data_mut() {
        *v = (*v - 0.5) / 0.5;
    }
}

/// Writes `[3,h,w]` intensities in `[0,1]` as binary PPM.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let [3, h, w] = img.dims() else {
        return Err(Error::shape(
            "ppm",
            format!("expected [3,h,w], got {:?}", img.dims()),
        ));
    };
    let (h, w) = (*h, *w);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Writes a single `[h,w]` plane of values in `[0,1]` as binary PGM.
pub fn encode_pgm(plane: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        plane
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}
