//! Dual-hand landmarks: annotation schema, file I/O, pixel spacing, noise
//! injection and localisation metrics. Heatmap coding, alignment and joint
//! cropping, and the heatmap model live in the submodules.
//!
//! Landmarks are indexed by position in the image: 0–36 belong to the hand on
//! the left side of the image, 37–73 to the hand on the right side.

pub mod heatmap;
pub mod model;
pub mod patching;

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Affine2, Point};

pub use heatmap::{decode_heatmaps, render_target_heatmaps, HeatmapStack};
pub use patching::{align_to_standard, crop_joint_patches, Alignment, HandAlignment, JointEntry, JointPatchSpec};

pub const PER_HAND: usize = 37;
pub const NUM_LANDMARKS: usize = 2 * PER_HAND;

/// Assumed physical distance between the two wrist endpoints.
pub const WRIST_WIDTH_MM: f64 = 50.0;

/// Per-hand landmark names in index order.
pub const LANDMARK_NAMES: [&str; PER_HAND] = [
    "thumb_tip",
    "thumb_ip",
    "thumb_mcp",
    "thumb_cmc",
    "index_tip",
    "index_dip",
    "index_pip",
    "index_mcp",
    "index_cmc",
    "middle_tip",
    "middle_dip",
    "middle_pip",
    "middle_mcp",
    "middle_cmc",
    "ring_tip",
    "ring_dip",
    "ring_pip",
    "ring_mcp",
    "ring_cmc",
    "little_tip",
    "little_dip",
    "little_pip",
    "little_mcp",
    "little_cmc",
    "trapezium",
    "trapezoid",
    "capitate",
    "hamate",
    "scaphoid",
    "lunate",
    "triquetrum",
    "pisiform",
    "radial_styloid",
    "ulnar_styloid",
    "distal_radius",
    "distal_ulna",
    "radiocarpal",
];

/// Wrist-width endpoints (radial and ulnar styloid), per-hand indices.
pub const WRIST_ENDPOINTS: (usize, usize) = (32, 33);
/// Middle fingertip, the distal end of the alignment axis.
pub const AXIS_TIP: usize = 9;

/// First landmark of finger `f` (0 = index … 3 = little).
pub const fn finger_base(f: usize) -> usize {
    4 + 5 * f
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hand {
    /// Hand on the left side of the image.
    Left,
    Right,
}

impl Hand {
    pub const BOTH: [Hand; 2] = [Hand::Left, Hand::Right];

    pub fn offset(self) -> usize {
        match self {
            Hand::Left => 0,
            Hand::Right => PER_HAND,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Hand::Left => 0,
            Hand::Right => 1,
        }
    }
}

/// 74 ordered landmarks in image pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::shape(NUM_LANDMARKS, points.len()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("landmark {i}")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn get(&self, i: usize) -> Point {
        self.points[i]
    }

    pub fn hand(&self, h: Hand) -> &[Point] {
        &self.points[h.offset()..h.offset() + PER_HAND]
    }

    pub fn wrist_endpoints(&self, h: Hand) -> (Point, Point) {
        let o = h.offset();
        (self.points[o + WRIST_ENDPOINTS.0], self.points[o + WRIST_ENDPOINTS.1])
    }

    pub fn wrist_centre(&self, h: Hand) -> Point {
        let (a, b) = self.wrist_endpoints(h);
        a.midpoint(b)
    }

    /// Applies `f` to every point.
    pub fn map(&self, f: impl Fn(Point) -> Point) -> Result<Self> {
        Self::new(self.points.iter().map(|&p| f(p)).collect())
    }

    pub fn transformed(&self, t: &Affine2) -> Result<Self> {
        self.map(|p| t.apply(p))
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.points
            .iter()
            .all(|p| p.x >= 0.0 && p.y >= 0.0 && p.x <= (width - 1) as f64 && p.y <= (height - 1) as f64)
    }

    /// Reads a text file of 74 lines `index,x,y` (any order, each index once).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut slots: Vec<Option<Point>> = vec![None; NUM_LANDMARKS];
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("index") {
                continue;
            }
            let bad = || Error::invalid(format!("line {}: expected `index,x,y`, found \"{line}\"", ln + 1));
            let mut it = line.split(',').map(str::trim);
            let (Some(i), Some(x), Some(y), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(bad());
            };
            let i: usize = i.parse().map_err(|_| bad())?;
            let x: f64 = x.parse().map_err(|_| bad())?;
            let y: f64 = y.parse().map_err(|_| bad())?;
            let slot = slots.get_mut(i).ok_or_else(|| Error::invalid(format!("line {}: index {i} out of range", ln + 1)))?;
            if slot.replace(Point::new(x, y)).is_some() {
                return Err(Error::invalid(format!("line {}: index {i} repeated", ln + 1)));
            }
        }
        let missing: Vec<usize> = slots.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(i, _)| i).collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!("missing landmark indices {missing:?}")));
        }
        Self::new(slots.into_iter().map(Option::unwrap).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for (i, p) in self.points.iter().enumerate() {
            writeln!(f, "{i},{},{}", p.x, p.y).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Millimetres per pixel from the wrist width of one hand.
pub fn estimate_pixel_spacing(lms: &LandmarkSet, hand: Hand) -> Result<f64> {
    let (a, b) = lms.wrist_endpoints(hand);
    let d = a.dist(b);
    if !(d > 0.0) {
        return Err(Error::invalid(format!("{hand:?} wrist endpoints coincide")));
    }
    Ok(WRIST_WIDTH_MM / d)
}

/// Image-level spacing: mean of the two per-hand estimates.
pub fn image_pixel_spacing(lms: &LandmarkSet) -> Result<f64> {
    Ok(0.5 * (estimate_pixel_spacing(lms, Hand::Left)? + estimate_pixel_spacing(lms, Hand::Right)?))
}

/// Displaces each landmark by `|N(0, sd_i)|` millimetres in a uniformly
/// random direction.
pub fn perturb_landmarks<R: Rng + ?Sized>(lms: &LandmarkSet, sd_mm: &[f64], spacing: f64, rng: &mut R) -> Result<LandmarkSet> {
    if sd_mm.len() != NUM_LANDMARKS {
        return Err(Error::shape(NUM_LANDMARKS, sd_mm.len()));
    }
    if let Some(s) = sd_mm.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("negative noise sd {s}")));
    }
    if !(spacing > 0.0) {
        return Err(Error::invalid("spacing must be positive"));
    }
    let pts = lms
        .points()
        .iter()
        .zip(sd_mm)
        .map(|(&p, &sd)| {
            if sd == 0.0 {
                return p;
            }
            let r: f64 = Normal::new(0.0, sd).unwrap().sample(rng).abs() / spacing;
            let theta: f64 = rng.random_range(0.0..2.0 * PI);
            Point::new(p.x + r * theta.cos(), p.y + r * theta.sin())
        })
        .collect();
    LandmarkSet::new(pts)
}

pub const SDR_THRESHOLDS_MM: [f64; 4] = [2.0, 3.0, 4.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalisationMetrics {
    pub mre_mm: f64,
    /// Percent of landmarks within 2, 3, 4 and 10 mm (inclusive).
    pub sdr: [f64; 4],
}

pub fn radial_errors_mm(pred: &[Point], truth: &[Point], spacing: f64) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| p.dist(*t) * spacing).collect())
}

pub fn mre_sdr(pred: &LandmarkSet, truth: &LandmarkSet, spacing: f64) -> Result<LocalisationMetrics> {
    metrics_from_errors(&radial_errors_mm(pred.points(), truth.points(), spacing)?)
}

pub fn metrics_from_errors(errors: &[f64]) -> Result<LocalisationMetrics> {
    if errors.is_empty() {
        return Err(Error::Empty("landmark errors"));
    }
    let n = errors.len() as f64;
    let mre_mm = errors.iter().sum::<f64>() / n;
    let sdr = SDR_THRESHOLDS_MM.map(|t| 100.0 * errors.iter().filter(|&&e| e <= t).count() as f64 / n);
    Ok(LocalisationMetrics { mre_mm, sdr })
}

/// Per-landmark mean radial error (mm) over a set of images; used as the
/// noise SDs for training-time perturbation.
pub fn landmarkwise_mre(pairs: &[(LandmarkSet, LandmarkSet, f64)]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Empty("landmark pairs"));
    }
    let mut acc = vec![0.0; NUM_LANDMARKS];
    for (pred, truth, spacing) in pairs {
        for (a, e) in acc.iter_mut().zip(radial_errors_mm(pred.points(), truth.points(), *spacing)?) {
            *a += e;
        }
    }
    Ok(acc.into_iter().map(|a| a / pairs.len() as f64).collect())
}

/// Flags a set whose left-side hand lies, on average, right of the
/// right-side hand: the left/right symmetry confusion.
pub fn symmetry_confusion(lms: &LandmarkSet) -> bool {
    let mean_x = |h| lms.hand(h).iter().map(|p| p.x).sum::<f64>() / PER_HAND as f64;
    mean_x(Hand::Left) >= mean_x(Hand::Right)
}
