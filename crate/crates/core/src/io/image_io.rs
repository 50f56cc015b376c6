//! PNG and binary PPM (P6) image files.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::image::QuantImage;

pub fn encode_png(img: &QuantImage) -> Result<Vec<u8>> {
    let buf = RgbImage::from_raw(img.width, img.height, img.data.clone())
        .ok_or_else(|| Error::invalid("image buffer length does not match its shape"))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<QuantImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    QuantImage::from_data(w, h, img.into_raw())
}

pub fn encode_ppm(img: &QuantImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn ppm_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        what: "ppm".into(),
        offset,
        msg: msg.into(),
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<QuantImage> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<(usize, String)> {
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
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(ppm_err(start, "unexpected end of header"));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };
    let (off, magic) = token(&mut pos)?;
    if magic != "P6" {
        return Err(ppm_err(off, "expected P6 magic"));
    }
    let mut nums = [0u32; 3];
    for n in nums.iter_mut() {
        let (off, t) = token(&mut pos)?;
        *n = t.parse().map_err(|_| ppm_err(off, format!("'{t}' is not a number")))?;
    }
    let [w, h, maxval] = nums;
    if maxval != 255 {
        return Err(ppm_err(pos, format!("only maxval 255 supported, got {maxval}")));
    }
    // single whitespace byte separates header from raster
    pos += 1;
    let need = w as usize * h as usize * 3;
    if bytes.len() < pos + need {
        return Err(ppm_err(bytes.len(), "truncated raster"));
    }
    QuantImage::from_data(w, h, bytes[pos..pos + need].to_vec())
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Writes PNG, or PPM when the extension is `.ppm`.
pub fn write_image(path: &Path, img: &QuantImage) -> Result<()> {
    let bytes = if is_ppm(path) {
        encode_ppm(img)
    } else {
        encode_png(img)?
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<QuantImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else {
        decode_png(&bytes)
    }
}
