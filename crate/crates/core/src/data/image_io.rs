//! Raster decoding (binary PPM by hand, PNG through `image`) and resizing.

use std::path::Path;

use crate::tensor::{Tensor, TensorResult};
use crate::{Error, Result};

/// Decodes a binary PPM (`P6`) into a `3×h×w` tensor in `[0, 1]`.
pub fn read_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(format!("expected P6 magic, found '{magic}'"));
    }
    let mut field = |name: &str| -> std::result::Result<usize, String> {
        let tok = header_token(bytes, &mut pos)?;
        tok.parse::<usize>()
            .map_err(|_| format!("bad {name} '{tok}'"))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let n = width * height * 3;
    let raster = bytes
        .get(pos..pos + n * bytes_per)
        .ok_or_else(|| format!("raster truncated: need {} bytes", n * bytes_per))?;
    let scale = maxval as f64;
    let mut data = vec![0.0; n];
    for i in 0..width * height {
        for c in 0..3 {
            let k = i * 3 + c;
            let v = if bytes_per == 1 {
                f64::from(raster[k])
            } else {
                f64::from(u16::from_be_bytes([raster[2 * k], raster[2 * k + 1]]))
            };
            if v > scale {
                return Err(format!("sample {v} exceeds maxval {maxval}"));
            }
            data[c * width * height + i] = v / scale;
        }
    }
    Tensor::new(vec![3, height, width], data).map_err(|e| e.to_string())
}

fn header_token(bytes: &[u8], pos: &mut usize) -> std::result::Result<String, String> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err("truncated header".into()),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Encodes a `3×h×w` (or `1×h×w`, replicated to grey) tensor as 8-bit P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::InvalidInput(format!(
            "PPM needs c×h×w, got {:?}",
            image.shape()
        )));
    };
    if c != 3 && c != 1 {
        return Err(Error::InvalidInput(format!(
            "PPM needs 1 or 3 channels, got {c}"
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for ch in 0..3 {
            let plane = if c == 1 { 0 } else { ch };
            let v = d[plane * h * w + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_ppm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decodes PPM or PNG, chosen by the leading magic bytes.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.starts_with(b"P6") {
        return read_ppm(bytes).map_err(err);
    }
    if bytes.starts_with(b"\x89PNG") {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| err(e.to_string()))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = f64::from(px[c]) / 255.0;
            }
        }
        return Tensor::new(vec![3, h, w], data).map_err(|e| err(e.to_string()));
    }
    Err(err(
        "unsupported image format (expected binary PPM or PNG)".into()
    ))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// Bilinear resize of a `c×h×w` tensor with corner-aligned sampling, so the
/// four corner pixels are carried over unchanged.
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> TensorResult<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(crate::tensor::TensorError::InvalidArgument {
            op: "resize_bilinear",
            msg: format!("expects c×h×w, got {:?}", image.shape()),
        });
    };
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let coord = |dst: usize, out: usize, inp: usize| -> f64 {
        if out == 1 || inp == 1 {
            0.0
        } else {
            dst as f64 * (inp - 1) as f64 / (out - 1) as f64
        }
    };
    let d = image.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..height {
            for x in 0..width {
                out.push(sample_bilinear(
                    plane,
                    h,
                    w,
                    coord(y, height, h),
                    coord(x, width, w),
                ));
            }
        }
    }
    Tensor::new(vec![c, height, width], out)
}

/// Bilinear sample of one plane; coordinates outside the frame are clamped
/// to the border (edge replication).
pub(crate) fn sample_bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    if fy == 0.0 && fx == 0.0 {
        return plane[y0 * w + x0];
    }
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}
