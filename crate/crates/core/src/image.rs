//! Grayscale raster type and the resampling primitives the pipeline needs.
//!
//! Pixel values are stored as `f32` but always hold integers in
//! `[0, max_value]` (8- or 16-bit range). Operations that produce fractional
//! intensities round back, so every derived image stays representable in its
//! source bit depth.

use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::geometry::{Affine2, Rect};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    data: Array2<f32>,
    max_value: f32,
}

impl GrayImage {
    pub const MAX_8BIT: f32 = 255.0;
    pub const MAX_16BIT: f32 = 65535.0;

    /// Wraps `data` (rows × columns), rounding and clamping to `[0, max_value]`.
    pub fn new(mut data: Array2<f32>, max_value: f32) -> Self {
        data.mapv_inplace(|v| v.round().clamp(0.0, max_value));
        Self { data, max_value }
    }

    pub fn zeros(height: usize, width: usize, max_value: f32) -> Self {
        Self {
            data: Array2::zeros((height, width)),
            max_value,
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn max_value(&self) -> f32 {
        self.max_value
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[[y, x]]
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(match img {
            image::DynamicImage::ImageLuma16(buf) => {
                let (w, h) = buf.dimensions();
                let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                    buf.get_pixel(x as u32, y as u32).0[0] as f32
                });
                Self {
                    data,
                    max_value: Self::MAX_16BIT,
                }
            }
            other => {
                let buf = other.to_luma8();
                let (w, h) = buf.dimensions();
                let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                    buf.get_pixel(x as u32, y as u32).0[0] as f32
                });
                Self {
                    data,
                    max_value: Self::MAX_8BIT,
                }
            }
        })
    }

    /// Writes an 8-bit PNG when the range fits, 16-bit otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, w) = self.data.dim();
        let res = if self.max_value <= Self::MAX_8BIT {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([self.data[[y as usize, x as usize]] as u8])
            });
            buf.save(path)
        } else {
            let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([self.data[[y as usize, x as usize]] as u16])
            });
            buf.save(path)
        };
        res.map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// 90° clockwise rotation. A pixel at `(x, y)` of an `H × W` image moves
    /// to `(H − 1 − y, x)` in the `W × H` result.
    pub fn rot90_cw(&self) -> Self {
        Self {
            data: rot90_cw(&self.data.view()),
            max_value: self.max_value,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = self.data.dim();
        let data = Array2::from_shape_fn((h, w), |(r, c)| self.data[[r, w - 1 - c]]);
        Self {
            data,
            max_value: self.max_value,
        }
    }

    /// Multiplies intensities by `factor`, rounding and clipping to the range.
    pub fn scale_intensity(&self, factor: f32) -> Self {
        let max = self.max_value;
        Self {
            data: self.data.mapv(|v| (v * factor).round().clamp(0.0, max)),
            max_value: max,
        }
    }

    /// Copies `rect`, replicating border pixels for any part outside the image.
    pub fn crop_edge_padded(&self, rect: Rect) -> Array2<f32> {
        let (h, w) = self.data.dim();
        Array2::from_shape_fn((rect.h, rect.w), |(r, c)| {
            let y = (rect.y + r as i64).clamp(0, h as i64 - 1) as usize;
            let x = (rect.x + c as i64).clamp(0, w as i64 - 1) as usize;
            self.data[[y, x]]
        })
    }

    /// Bilinear sample at a sub-pixel location; `fill` outside the image.
    pub fn sample_bilinear(&self, x: f64, y: f64, fill: f32) -> f32 {
        sample_bilinear(&self.data.view(), x, y, fill)
    }

    /// Resamples through an affine map. `output_to_input` maps output pixel
    /// coordinates to source coordinates.
    pub fn warp(&self, output_to_input: &Affine2, out_h: usize, out_w: usize, fill: f32) -> Self {
        let data = Array2::from_shape_fn((out_h, out_w), |(r, c)| {
            let p = output_to_input.apply(crate::geometry::Point::new(c as f64, r as f64));
            sample_bilinear(&self.data.view(), p.x, p.y, fill)
        });
        Self::new(data, self.max_value)
    }

    pub fn resample(&self, out_h: usize, out_w: usize) -> Array2<f32> {
        resample(&self.data.view(), out_h, out_w)
    }
}

pub fn save_rgb(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// 90° clockwise rotation of a raw array (see [`GrayImage::rot90_cw`]).
pub fn rot90_cw(data: &ArrayView2<f32>) -> Array2<f32> {
    let (h, w) = data.dim();
    Array2::from_shape_fn((w, h), |(r, c)| data[[h - 1 - c, r]])
}

pub fn sample_bilinear(data: &ArrayView2<f32>, x: f64, y: f64, fill: f32) -> f32 {
    let (h, w) = data.dim();
    if !(x > -1.0 && y > -1.0 && x < w as f64 && y < h as f64) {
        return fill;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let px = |xi: i64, yi: i64| -> f32 {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            fill
        } else {
            data[[yi as usize, xi as usize]]
        }
    };
    let (xi, yi) = (x0 as i64, y0 as i64);
    let top = px(xi, yi) * (1.0 - fx) + px(xi + 1, yi) * fx;
    let bot = px(xi, yi + 1) * (1.0 - fx) + px(xi + 1, yi + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Source index for sub-sample `u` of `out·m` evenly spaced samples over a
/// length-`src` axis: `floor((2u + 1)·src / (2·out·m))`.
fn sample_index(u: usize, src: usize, out: usize, m: usize) -> usize {
    ((2 * u + 1) * src) / (2 * out * m)
}

/// Resizes by averaging an `m_y × m_x` grid of nearest-pixel samples per
/// output pixel (`m = ⌈src/out⌉` per axis, so every source pixel is
/// visited when shrinking).
///
/// The sampling positions are symmetric about the window centre, so for an
/// odd source length and an even output length the result commutes exactly
/// with flips and 90° rotations of integer-valued inputs.
pub fn resample(src: &ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (sh, sw) = src.dim();
    assert!(sh > 0 && sw > 0 && out_h > 0 && out_w > 0, "resample of empty image");
    let my = sh.div_ceil(out_h);
    let mx = sw.div_ceil(out_w);
    let ys: Vec<usize> = (0..out_h * my).map(|u| sample_index(u, sh, out_h, my)).collect();
    let xs: Vec<usize> = (0..out_w * mx).map(|u| sample_index(u, sw, out_w, mx)).collect();
    let norm = (my * mx) as f32;
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let mut acc = 0.0f32;
        for &sy in &ys[r * my..(r + 1) * my] {
            for &sx in &xs[c * mx..(c + 1) * mx] {
                acc += src[[sy, sx]];
            }
        }
        acc / norm
    })
}

/// Separable Gaussian blur with replicated borders, truncated at 3σ.
pub fn gaussian_blur(src: &ArrayView2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return src.to_owned();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let s: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let (h, w) = src.dim();
    let tmp: Array2<f32> = Array2::from_shape_fn((h, w), |(r, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &kv)| {
                let x = (c as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                kv * src[[r, x]]
            })
            .sum::<f32>()
    });
    Array2::from_shape_fn((h, w), |(r, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &kv)| {
                let y = (r as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                kv * tmp[[y, c]]
            })
            .sum::<f32>()
    })
}
