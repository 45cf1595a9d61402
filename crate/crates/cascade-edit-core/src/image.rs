//! RGB frame type and pixel-level utilities. Frames are `H x W x 3` float32
//! arrays with values in `[0, 1]`, row-major, matching the on-disk PNG layout.

use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub data: Array3<f32>,
}

/// Inclusive-exclusive pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn validate_in(&self, h: usize, w: usize) -> Result<()> {
        if self.y0 >= self.y1 || self.x0 >= self.x1 {
            return Err(Error::invalid(format!("degenerate ROI {self:?}")));
        }
        if self.y1 > h || self.x1 > w {
            return Err(Error::invalid(format!(
                "ROI {self:?} outside frame {h}x{w}"
            )));
        }
        Ok(())
    }
}

impl Frame {
    pub fn zeros(h: usize, w: usize) -> Self {
        Frame {
            data: Array3::zeros((h, w, 3)),
        }
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let mut f = Frame::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    f.data[[y, x, c]] = rgb[c];
                }
            }
        }
        f
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn shape_hw(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Rec.601 luminance of one pixel.
    pub fn luminance(&self, y: usize, x: usize) -> f32 {
        0.299 * self.data[[y, x, 0]] + 0.587 * self.data[[y, x, 1]] + 0.114 * self.data[[y, x, 2]]
    }

    pub fn clamp01(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    /// Round-trip through 8-bit quantization, the same transform a PNG
    /// write + read applies. Keeping references and outputs on the same
    /// grid makes spliced-frame comparisons exact.
    pub fn quantize_u8(&self) -> Frame {
        Frame {
            data: self.data.mapv(|v| {
                let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                q as f32 / 255.0
            }),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.shape_hw();
        let mut buf = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    buf.push((self.data[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        let img: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, buf)
            .expect("buffer sized from frame dims");
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Frame> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut frame = Frame::zeros(h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                frame.data[[y as usize, x as usize, c]] = px.0[c] as f32 / 255.0;
            }
        }
        Ok(frame)
    }

    pub fn max_abs_diff(&self, other: &Frame) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// HSV (all in [0,1]) to RGB.
pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.fract() + 1.0).fract() * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_preserves_quantized_pixels() {
        let dir = std::env::temp_dir().join(format!("cascade_png_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut f = Frame::zeros(8, 6);
        for y in 0..8 {
            for x in 0..6 {
                f.data[[y, x, 0]] = (y as f32) / 7.0;
                f.data[[y, x, 1]] = (x as f32) / 5.0;
                f.data[[y, x, 2]] = 0.25;
            }
        }
        let p = dir.join("t.png");
        f.save_png(&p).unwrap();
        let g = Frame::load_png(&p).unwrap();
        assert_eq!(f.quantize_u8(), g);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-6 && g[0] < 1e-6);
    }

    #[test]
    fn rect_validation() {
        let r = Rect {
            y0: 2,
            y1: 2,
            x0: 0,
            x1: 4,
        };
        assert!(r.validate_in(8, 8).is_err());
        let r = Rect {
            y0: 0,
            y1: 9,
            x0: 0,
            x1: 4,
        };
        assert!(r.validate_in(8, 8).is_err());
    }
}
