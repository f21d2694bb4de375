use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::CropTransform;

/// Planar `C x H x W` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    /// Resamples the image into the crop frame with bilinear interpolation.
    /// Source pixels outside the image read as zero.
    pub fn crop(&self, t: &CropTransform) -> Image {
        let mut out = Image::zeros(self.channels, t.out_h, t.out_w);
        let plane = self.height * self.width;
        for row in 0..t.out_h {
            for col in 0..t.out_w {
                let (sx, sy) = t.inverse(col as f64 + 0.5, row as f64 + 0.5);
                let fx = sx - 0.5;
                let fy = sy - 0.5;
                let x0 = fx.floor();
                let y0 = fy.floor();
                let ax = (fx - x0) as f32;
                let ay = (fy - y0) as f32;
                let taps = [
                    (x0, y0, (1.0 - ax) * (1.0 - ay)),
                    (x0 + 1.0, y0, ax * (1.0 - ay)),
                    (x0, y0 + 1.0, (1.0 - ax) * ay),
                    (x0 + 1.0, y0 + 1.0, ax * ay),
                ];
                for (tx, ty, w) in taps {
                    if w == 0.0
                        || tx < 0.0
                        || ty < 0.0
                        || tx >= self.width as f64
                        || ty >= self.height as f64
                    {
                        continue;
                    }
                    let src = ty as usize * self.width + tx as usize;
                    for c in 0..self.channels {
                        let o = out.idx(c, row, col);
                        out.data[o] += w * self.data[c * plane + src];
                    }
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let result = match self.channels {
            1 => {
                let buf = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                    image::Luma([to_u8(self.get(0, y as usize, x as usize))])
                });
                buf.save(path)
            }
            3 => {
                let buf = image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                    let (x, y) = (x as usize, y as usize);
                    image::Rgb([to_u8(self.get(0, y, x)), to_u8(self.get(1, y, x)), to_u8(self.get(2, y, x))])
                });
                buf.save(path)
            }
            c => {
                return Err(Error::Image {
                    path: path.into(),
                    msg: format!("cannot encode {c}-channel image"),
                })
            }
        };
        result.map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.into(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::zeros(3, h, w);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    /// Rounds every value to the 8-bit grid, matching what a PNG round trip stores.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}
