//! Gaussian heatmap targets and two-resolution argmax decoding.
//!
//! A heatmap at scale `s` maps image coordinate `x` to `(x + ½)·s − ½`, so
//! pixel centres line up for any integer or fractional ratio.

use ndarray::{Array3, ArrayView2};

use super::{LandmarkSet, NUM_LANDMARKS};
use crate::error::{Error, Result};
use crate::geometry::Point;

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    /// `(channels, rows, cols)`, nonnegative.
    pub data: Array3<f32>,
    /// Heatmap pixels per image pixel along x.
    pub scale_x: f64,
    /// Heatmap pixels per image pixel along y.
    pub scale_y: f64,
}

impl HeatmapStack {
    pub fn new(data: Array3<f32>, scale_x: f64, scale_y: f64) -> Result<Self> {
        if data.dim().0 != NUM_LANDMARKS {
            return Err(Error::shape(format!("{NUM_LANDMARKS} channels"), format!("{} channels", data.dim().0)));
        }
        if !(scale_x > 0.0 && scale_y > 0.0) {
            return Err(Error::invalid("heatmap scale must be positive"));
        }
        Ok(Self { data, scale_x, scale_y })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn to_heatmap(&self, p: Point) -> Point {
        Point::new((p.x + 0.5) * self.scale_x - 0.5, (p.y + 0.5) * self.scale_y - 0.5)
    }

    pub fn to_image(&self, u: Point) -> Point {
        Point::new((u.x + 0.5) / self.scale_x - 0.5, (u.y + 0.5) / self.scale_y - 0.5)
    }

    /// Position of the maximum of channel `c` in image coordinates. Ties go
    /// to the first pixel in row-major order.
    pub fn argmax(&self, c: usize) -> Result<Point> {
        let (r, col) = argmax2(&self.data.index_axis(ndarray::Axis(0), c)).ok_or(Error::ZeroHeatmapChannel(c))?;
        Ok(self.to_image(Point::new(col as f64, r as f64)))
    }
}

fn argmax2(ch: &ArrayView2<f32>) -> Option<(usize, usize)> {
    let mut best = 0.0f32;
    let mut at = None;
    for ((r, c), &v) in ch.indexed_iter() {
        if v > best {
            best = v;
            at = Some((r, c));
        }
    }
    at
}

/// One unnormalised Gaussian per landmark (peak 1, SD `sigma` heatmap
/// pixels) on a `height × width` grid at the given scales. `sigma = 0`
/// gives a one-hot map at the nearest pixel.
pub fn render_target_heatmaps(lms: &LandmarkSet, height: usize, width: usize, scale_x: f64, scale_y: f64, sigma: f64) -> Result<HeatmapStack> {
    let mut out = HeatmapStack::new(Array3::zeros((NUM_LANDMARKS, height, width)), scale_x, scale_y)?;
    for (c, &p) in lms.points().iter().enumerate() {
        let u = out.to_heatmap(p);
        let mut ch = out.data.index_axis_mut(ndarray::Axis(0), c);
        if sigma <= 0.0 {
            let r = u.y.round().clamp(0.0, (height - 1) as f64) as usize;
            let col = u.x.round().clamp(0.0, (width - 1) as f64) as usize;
            ch[[r, col]] = 1.0;
            continue;
        }
        let inv = 1.0 / (2.0 * sigma * sigma);
        let reach = (4.0 * sigma).ceil();
        let r0 = (u.y - reach).floor().max(0.0) as usize;
        let r1 = ((u.y + reach).ceil() as i64).clamp(-1, height as i64 - 1);
        let c0 = (u.x - reach).floor().max(0.0) as usize;
        let c1 = ((u.x + reach).ceil() as i64).clamp(-1, width as i64 - 1);
        if r1 < 0 || c1 < 0 {
            continue;
        }
        // separable: exp(-(dx² + dy²)/2σ²) = gx · gy
        let gx: Vec<f64> = (c0..=c1 as usize).map(|x| (-(x as f64 - u.x).powi(2) * inv).exp()).collect();
        for y in r0..=r1 as usize {
            let gy = (-(y as f64 - u.y).powi(2) * inv).exp();
            for (i, x) in (c0..=c1 as usize).enumerate() {
                ch[[y, x]] = (gx[i] * gy) as f32;
            }
        }
    }
    Ok(out)
}

/// Per channel: argmax of each stack, mapped to image coordinates and
/// averaged.
pub fn decode_heatmaps(hi: &HeatmapStack, lo: &HeatmapStack) -> Result<LandmarkSet> {
    let pts = (0..NUM_LANDMARKS)
        .map(|c| Ok(hi.argmax(c)?.midpoint(lo.argmax(c)?)))
        .collect::<Result<Vec<_>>>()?;
    LandmarkSet::new(pts)
}
