//! Morphological foreground masks and foreground fractions.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::image::{gaussian_blur, GrayImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub blur_sigma: f64,
    pub erode_iters: usize,
    pub dilate_iters: usize,
    /// Foreground components below this fraction of the image area are dropped.
    pub min_component_frac: f64,
    /// Background holes below this fraction of the image area are filled.
    pub min_hole_frac: f64,
    /// Post-processing removal threshold, fraction of the image area.
    pub post_min_frac: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            erode_iters: 1,
            dilate_iters: 2,
            min_component_frac: 0.001,
            min_hole_frac: 0.001,
            post_min_frac: 0.0005,
        }
    }
}

impl MaskConfig {
    fn area(frac: f64, n: usize) -> usize {
        (frac * n as f64).ceil() as usize
    }
}

/// Binary mask with values in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    pub pixels: Array2<u8>,
    pub source_id: String,
    /// Set when the source image had no contrast to threshold.
    pub degenerate: bool,
}

impl ForegroundMask {
    pub fn new(pixels: Array2<u8>, source_id: impl Into<String>) -> Self {
        Self {
            pixels: pixels.mapv(|v| u8::from(v != 0)),
            source_id: source_id.into(),
            degenerate: false,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v != 0).count()
    }

    pub fn union(&self, other: &ForegroundMask) -> Result<ForegroundMask> {
        if self.pixels.dim() != other.pixels.dim() {
            return Err(Error::shape(format!("{:?}", self.pixels.dim()), format!("{:?}", other.pixels.dim())));
        }
        let mut px = self.pixels.clone();
        px.zip_mut_with(&other.pixels, |a, &b| *a |= b);
        Ok(ForegroundMask::new(px, self.source_id.clone()))
    }

    pub fn file_name(id: &str) -> String {
        format!("{id}.mask.png")
    }

    pub fn path_in(dir: &Path, id: &str) -> PathBuf {
        dir.join(Self::file_name(id))
    }

    /// Writes a single-channel 0/255 PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        let img = GrayImage::new(self.pixels.mapv(|v| if v != 0 { 255.0 } else { 0.0 }), 255.0);
        img.save(path)
    }

    /// Reads a mask PNG, including externally produced ones. Pixels at or
    /// above half the bit-depth range count as foreground.
    pub fn load(path: &Path, source_id: impl Into<String>) -> Result<Self> {
        let img = GrayImage::load(path)?;
        let half = img.max_value() / 2.0;
        Ok(Self::new(img.data().mapv(|v| u8::from(v >= half)), source_id))
    }
}

/// Otsu threshold over a 256-bin histogram spanning `[lo, hi]`.
/// Returns `None` for a constant image.
pub fn otsu_threshold(data: &Array2<f32>) -> Option<f32> {
    let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return None;
    }
    const BINS: usize = 256;
    let scale = (BINS - 1) as f32 / (hi - lo);
    let mut hist = [0u64; BINS];
    for &v in data {
        hist[((v - lo) * scale).round() as usize] += 1;
    }
    let total = data.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best, mut best_t) = (-1.0f64, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    // class 0 holds bins 0..=best_t; foreground is strictly above
    Some(lo + (best_t as f32 + 0.5) / scale)
}

/// 3×3 erosion; pixels outside the image count as background.
pub fn erode(m: &Array2<u8>) -> Array2<u8> {
    morph(m, true)
}

/// 3×3 dilation.
pub fn dilate(m: &Array2<u8>) -> Array2<u8> {
    morph(m, false)
}

fn morph(m: &Array2<u8>, erode: bool) -> Array2<u8> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut all = true;
        let mut any = false;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (y, x) = (r as i64 + dr, c as i64 + dc);
                let v = y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m[[y as usize, x as usize]] != 0;
                all &= v;
                any |= v;
            }
        }
        u8::from(if erode { all } else { any })
    })
}

/// Labels connected components of pixels equal to `value`. Returns the label
/// image (0 = not part of any component) and component sizes indexed by
/// `label − 1`.
pub fn connected_components(m: &Array2<u8>, value: u8, eight: bool) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = m.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    let n4: &[(i64, i64)] = &[(-1, 0), (1, 0), (0, -1), (0, 1)];
    let n8: &[(i64, i64)] = &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    let nbrs = if eight { n8 } else { n4 };
    for r in 0..h {
        for c in 0..w {
            if m[[r, c]] != value || labels[[r, c]] != 0 {
                continue;
            }
            let lab = sizes.len() as u32 + 1;
            let mut size = 0;
            labels[[r, c]] = lab;
            stack.push((r, c));
            while let Some((y, x)) = stack.pop() {
                size += 1;
                for &(dy, dx) in nbrs {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if m[[ny, nx]] == value && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = lab;
                        stack.push((ny, nx));
                    }
                }
            }
            sizes.push(size);
        }
    }
    (labels, sizes)
}

/// Removes 8-connected foreground components with fewer than `min_area` pixels.
pub fn remove_small_components(m: &Array2<u8>, min_area: usize) -> Array2<u8> {
    let (labels, sizes) = connected_components(m, 1, true);
    labels.mapv(|l| u8::from(l != 0 && sizes[l as usize - 1] >= min_area))
}

/// Fills 4-connected background regions smaller than `max_area` that do not
/// touch the image border.
pub fn fill_small_holes(m: &Array2<u8>, max_area: usize) -> Array2<u8> {
    let (h, w) = m.dim();
    let (labels, sizes) = connected_components(m, 0, false);
    let mut touches = vec![false; sizes.len()];
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r == h - 1 || c == w - 1) && labels[[r, c]] != 0 {
                touches[labels[[r, c]] as usize - 1] = true;
            }
        }
    }
    Array2::from_shape_fn((h, w), |(r, c)| {
        let l = labels[[r, c]];
        if l == 0 {
            1
        } else {
            let i = l as usize - 1;
            u8::from(!touches[i] && sizes[i] < max_area)
        }
    })
}

/// blur → Otsu threshold → erosion → dilation → small-component removal →
/// small-hole filling.
pub fn generate_mask(id: &str, img: &GrayImage, cfg: &MaskConfig) -> Result<ForegroundMask> {
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 {
        return Err(Error::invalid("cannot mask an empty image"));
    }
    let blurred = gaussian_blur(&img.view(), cfg.blur_sigma);
    let Some(t) = otsu_threshold(&blurred) else {
        log::warn!("{id}: constant image, empty foreground mask");
        return Ok(ForegroundMask {
            pixels: Array2::zeros((h, w)),
            source_id: id.to_string(),
            degenerate: true,
        });
    };
    let mut m = blurred.mapv(|v| u8::from(v > t));
    for _ in 0..cfg.erode_iters {
        m = erode(&m);
    }
    for _ in 0..cfg.dilate_iters {
        m = dilate(&m);
    }
    let n = h * w;
    m = remove_small_components(&m, MaskConfig::area(cfg.min_component_frac, n));
    m = fill_small_holes(&m, MaskConfig::area(cfg.min_hole_frac, n));
    Ok(ForegroundMask {
        pixels: m,
        source_id: id.to_string(),
        degenerate: false,
    })
}

/// Drops foreground components below the configured post-processing area.
pub fn postprocess_mask(mask: &ForegroundMask, cfg: &MaskConfig) -> ForegroundMask {
    let min_area = MaskConfig::area(cfg.post_min_frac, mask.pixels.len());
    postprocess_mask_area(mask, min_area)
}

pub fn postprocess_mask_area(mask: &ForegroundMask, min_area: usize) -> ForegroundMask {
    ForegroundMask {
        pixels: remove_small_components(&mask.pixels, min_area),
        source_id: mask.source_id.clone(),
        degenerate: mask.degenerate,
    }
}

/// Fraction of foreground pixels inside `rect` clipped to the mask bounds.
pub fn foreground_fraction(mask: &ForegroundMask, rect: Rect) -> Result<f64> {
    let clipped = rect
        .clip(mask.width(), mask.height())
        .ok_or_else(|| Error::invalid(format!("rect {rect:?} has zero area inside the mask")))?;
    let y0 = clipped.y as usize;
    let x0 = clipped.x as usize;
    let view = mask.pixels.slice(ndarray::s![y0..y0 + clipped.h, x0..x0 + clipped.w]);
    let fg = view.iter().filter(|&&v| v != 0).count();
    Ok(fg as f64 / clipped.area() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square_image() -> (GrayImage, Array2<u8>) {
        let mut d = Array2::from_elem((200, 240), 20.0f32);
        let mut truth = Array2::zeros((200, 240));
        for r in 50..150 {
            for c in 70..170 {
                d[[r, c]] = 200.0;
                truth[[r, c]] = 1;
            }
        }
        (GrayImage::new(d, 255.0), truth)
    }

    fn bbox(m: &Array2<u8>) -> (usize, usize, usize, usize) {
        let mut b = (usize::MAX, usize::MAX, 0, 0);
        for ((r, c), &v) in m.indexed_iter() {
            if v != 0 {
                b = (b.0.min(r), b.1.min(c), b.2.max(r), b.3.max(c));
            }
        }
        b
    }

    #[test]
    fn square_is_recovered_within_two_pixels() {
        let (img, truth) = square_image();
        let m = generate_mask("sq", &img, &MaskConfig::default()).unwrap();
        // oracle: direct threshold halfway between the two known levels
        let oracle = img.data().mapv(|v| u8::from(v > 110.0));
        assert_eq!(oracle, truth);
        let (t0, l0, b0, r0) = bbox(&oracle);
        let (t1, l1, b1, r1) = bbox(&m.pixels);
        for (a, b) in [(t0, t1), (l0, l1), (b0, b1), (r0, r1)] {
            assert!(a.abs_diff(b) <= 2, "{a} vs {b}");
        }
        // mask is a filled rectangle: no pixel outside the 2-px band differs
        for ((r, c), &v) in m.pixels.indexed_iter() {
            if (52..148).contains(&r) && (72..168).contains(&c) {
                assert_eq!(v, 1);
            }
            if !(48..152).contains(&r) || !(68..172).contains(&c) {
                assert_eq!(v, 0);
            }
        }
    }

    #[test]
    fn all_zero_image_gives_empty_flagged_mask() {
        let m = generate_mask("z", &GrayImage::zeros(30, 40, 255.0), &MaskConfig::default()).unwrap();
        assert_eq!(m.count(), 0);
        assert!(m.degenerate);
        assert_eq!(m.pixels.dim(), (30, 40));
    }

    #[test]
    fn speckles_are_excluded() {
        let (img, _) = square_image();
        let mut d = img.data().clone();
        let speckles = [(10, 10), (15, 200), (180, 30), (190, 220), (100, 20)];
        for &(r, c) in &speckles {
            d[[r, c]] = 255.0;
        }
        let m = generate_mask("sp", &GrayImage::new(d, 255.0), &MaskConfig::default()).unwrap();
        let (labels, sizes) = connected_components(&m.pixels, 1, true);
        assert_eq!(sizes.len(), 1);
        for &(r, c) in &speckles {
            assert_eq!(labels[[r, c]], 0);
        }
    }

    #[test]
    fn postprocess_thresholds() {
        let mut px = Array2::zeros((120, 120));
        px.slice_mut(ndarray::s![2..4, 2..4]).fill(1);
        let m = ForegroundMask::new(px, "a");
        assert_eq!(postprocess_mask_area(&m, 10).count(), 0);
        let mut big = Array2::zeros((120, 120));
        big.slice_mut(ndarray::s![10..110, 10..110]).fill(1);
        let m = ForegroundMask::new(big, "b");
        assert_eq!(postprocess_mask_area(&m, 10), m);
    }

    #[test]
    fn postprocess_idempotent_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p: f64 = rng.random_range(0.1..0.6);
            let px = Array2::from_shape_fn((40, 40), |_| u8::from(rng.random_bool(p)));
            let m = ForegroundMask::new(px, "r");
            let once = postprocess_mask_area(&m, 6);
            assert_eq!(postprocess_mask_area(&once, 6), once);
            let cfg = MaskConfig {
                post_min_frac: 0.004,
                ..Default::default()
            };
            let once = postprocess_mask(&m, &cfg);
            assert_eq!(postprocess_mask(&once, &cfg), once);
        }
    }

    #[test]
    fn fraction_examples() {
        let mut px = Array2::zeros((300, 300));
        px.slice_mut(ndarray::s![0..100, 0..100]).fill(1);
        let m = ForegroundMask::new(px.clone(), "f");
        assert_eq!(foreground_fraction(&m, Rect::new(10, 10, 50, 50)).unwrap(), 1.0);
        assert_eq!(foreground_fraction(&m, Rect::new(150, 150, 100, 100)).unwrap(), 0.0);
        // exactly 200 foreground px in a 100×100 window
        let mut px = Array2::zeros((300, 300));
        px.slice_mut(ndarray::s![200..210, 200..220]).fill(1);
        let m = ForegroundMask::new(px, "g");
        assert_eq!(foreground_fraction(&m, Rect::new(150, 150, 100, 100)).unwrap(), 0.02);
        assert!(foreground_fraction(&m, Rect::new(0, 0, 0, 5)).is_err());
        // clipped denominator
        let mut px = Array2::zeros((10, 10));
        px.slice_mut(ndarray::s![0..5, 0..5]).fill(1);
        let m = ForegroundMask::new(px, "h");
        assert_eq!(foreground_fraction(&m, Rect::new(-5, -5, 10, 10)).unwrap(), 1.0);
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = square_image();
        let m = generate_mask("img1", &img, &MaskConfig::default()).unwrap();
        let p = ForegroundMask::path_in(dir.path(), "img1");
        assert!(p.ends_with("img1.mask.png"));
        m.save(&p).unwrap();
        let raw = GrayImage::load(&p).unwrap();
        assert!(raw.data().iter().all(|&v| v == 0.0 || v == 255.0));
        assert_eq!(ForegroundMask::load(&p, "img1").unwrap(), m);
    }

    proptest! {
        #[test]
        fn fraction_monotone_under_union(
            seed in 0u64..1000,
            x in -5i64..30, y in -5i64..30, w in 1usize..20, h in 1usize..20,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = ForegroundMask::new(Array2::from_shape_fn((32, 32), |_| u8::from(rng.random_bool(0.3))), "a");
            let b = ForegroundMask::new(Array2::from_shape_fn((32, 32), |_| u8::from(rng.random_bool(0.3))), "b");
            let r = Rect::new(x, y, w, h);
            if r.clip(32, 32).is_some() {
                let u = a.union(&b).unwrap();
                prop_assert!(foreground_fraction(&u, r).unwrap() >= foreground_fraction(&a, r).unwrap());
            }
        }
    }
}
