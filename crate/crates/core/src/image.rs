//! In-memory RGB pixel grids with values in [0, 1], plus the grayscale and
//! quadrant operations the encoder and filters share.

use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, Tensor};

/// RGB image, row-major, three f64 channels per pixel in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "pixel grid {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(PixelGrid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        PixelGrid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// View as an `[h, w, 3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.data.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape(format!("expected [h,w,3], got {:?}", s)));
        }
        PixelGrid::new(s[0], s[1], t.data().to_vec())
    }

    /// Bilinear resample to a new size.
    pub fn resized(&self, out_h: usize, out_w: usize) -> Result<PixelGrid> {
        let t = bilinear_resize(&self.to_tensor(), out_h, out_w)?;
        PixelGrid::from_tensor(&t)
    }

    /// Splits into the four equal quadrants, row-major:
    /// top-left, top-right, bottom-left, bottom-right.
    pub fn quadrants(&self) -> Result<[PixelGrid; 4]> {
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::invalid(format!(
                "quadrant split needs even dims, got {}x{}",
                self.height, self.width
            )));
        }
        let (hh, hw) = (self.height / 2, self.width / 2);
        let crop = |y0: usize, x0: usize| {
            let mut data = Vec::with_capacity(hh * hw * 3);
            for y in 0..hh {
                for x in 0..hw {
                    data.extend_from_slice(&self.pixel(y0 + y, x0 + x));
                }
            }
            PixelGrid { height: hh, width: hw, data }
        };
        Ok([crop(0, 0), crop(0, hw), crop(hh, 0), crop(hh, hw)])
    }

    /// Luminance grayscale as an `[h, w]` tensor.
    pub fn to_gray(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.height * self.width);
        for p in self.data.chunks(3) {
            data.push(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
        }
        Tensor::new(vec![self.height, self.width], data).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrants_tile_the_image() {
        let mut img = PixelGrid::filled(4, 4, [0.0; 3]);
        for y in 0..4 {
            for x in 0..4 {
                img.set_pixel(y, x, [(y * 4 + x) as f64 / 16.0; 3]);
            }
        }
        let [tl, tr, bl, br] = img.quadrants().unwrap();
        assert_eq!(tl.pixel(0, 0), img.pixel(0, 0));
        assert_eq!(tr.pixel(0, 1), img.pixel(0, 3));
        assert_eq!(bl.pixel(1, 0), img.pixel(3, 0));
        assert_eq!(br.pixel(1, 1), img.pixel(3, 3));
    }

    #[test]
    fn odd_dims_rejected() {
        let img = PixelGrid::filled(3, 4, [0.0; 3]);
        assert!(img.quadrants().is_err());
    }

    #[test]
    fn gray_uses_luminance_weights() {
        let img = PixelGrid::filled(1, 1, [1.0, 0.5, 0.25]);
        let g = img.to_gray();
        let expect = 0.299 + 0.587 * 0.5 + 0.114 * 0.25;
        assert!((g.data()[0] - expect).abs() < 1e-15);
    }
}
