//! RGB image buffers in float-linear and 8-bit quantized form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major, interleaved RGB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image<T> {
    pub width: u32,
    pub height: u32,
    pub data: Vec<T>,
}

/// Float-linear image, values nominally in [0,1].
pub type FloatImage = Image<f64>;
/// 8-bit quantized image.
pub type QuantImage = Image<u8>;

impl<T: Copy> Image<T> {
    pub fn filled(width: u32, height: u32, rgb: [T; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_data(width: u32, height: u32, data: Vec<T>) -> Result<Self> {
        let want = width as usize * height as usize * 3;
        if data.len() != want {
            return Err(Error::invalid(format!(
                "image {width}x{height} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> [T; 3] {
        let i = self.index(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [T; 3]) {
        let i = self.index(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_shape<U>(&self, other: &Image<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "image shape mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Sub-rectangle starting at `(x0, y0)`.
    pub fn crop(&self, x0: u32, y0: u32, width: u32, height: u32) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::invalid(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in y0..y0 + height {
            let start = self.index(x0, y);
            data.extend_from_slice(&self.data[start..start + width as usize * 3]);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

#[inline]
pub fn quantize_value(v: f64) -> u8 {
    // round half up
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[inline]
pub fn dequantize_value(q: u8) -> f64 {
    q as f64 / 255.0
}

pub fn quantize(img: &FloatImage) -> Result<QuantImage> {
    if let Some(pos) = img.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("pixel value at flat index {pos}")));
    }
    Ok(Image {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| quantize_value(v)).collect(),
    })
}

pub fn dequantize(img: &QuantImage) -> FloatImage {
    Image {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&q| dequantize_value(q)).collect(),
    }
}

/// Largest absolute per-channel difference in quantized units.
pub fn max_abs_diff_u8(a: &QuantImage, b: &QuantImage) -> Result<u8> {
    a.check_same_shape(b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| x.abs_diff(*y))
        .max()
        .unwrap_or(0))
}
