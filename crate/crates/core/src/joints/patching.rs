//! Per-hand orientation alignment and joint-patch cropping.
//!
//! Each hand gets its own rigid frame: the wrist centre sits at the origin
//! and the wrist-to-middle-fingertip axis points up (−y). Patches are
//! axis-aligned squares in that frame, sampled back from the source image.
//! Sample positions are snapped to a 1/256-pixel grid and interpolated in
//! exact arithmetic, so crops are pixel-identical under integer translations
//! and right-angle rotations of the input.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{Hand, LandmarkSet, AXIS_TIP, PER_HAND};
use crate::bag::{Patch, PatchBag, PatchTag, Provenance, Scheme};
use crate::error::{Error, Result};
use crate::geometry::{centroid, Affine2, Point, Quad, Rect};
use crate::image::{resample, GrayImage};

const DEFAULT_SPEC: &str = include_str!("default_patch_spec.toml");

/// Sub-pixel grid for sample positions.
const SAMPLE_GRID: f64 = 256.0;
/// Grid for patch centres and sizes before rounding to whole pixels.
const GEOM_GRID: f64 = 1024.0;

fn snap(v: f64, grid: f64) -> f64 {
    (v * grid).round() / grid
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentreRule {
    /// The single anchor landmark.
    Landmark,
    /// Mean of the anchors.
    Centroid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointEntry {
    pub name: String,
    /// Per-hand landmark indices.
    pub anchors: Vec<usize>,
    pub rule: CentreRule,
    pub side_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointPatchSpec {
    #[serde(rename = "joint")]
    pub joints: Vec<JointEntry>,
}

pub const JOINTS_PER_HAND: usize = 25;

impl Default for JointPatchSpec {
    fn default() -> Self {
        Self::parse(DEFAULT_SPEC).expect("built-in joint patch spec is valid")
    }
}

impl JointPatchSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: JointPatchSpec = toml::from_str(text).map_err(|e| Error::Config {
            key: "joint".into(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |i: usize, message: String| Error::Config {
            key: format!("joint[{i}]"),
            message,
        };
        if self.joints.len() != JOINTS_PER_HAND {
            return Err(Error::Config {
                key: "joint".into(),
                message: format!("expected {JOINTS_PER_HAND} entries, found {}", self.joints.len()),
            });
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.side_mm > 0.0 && j.side_mm.is_finite()) {
                return Err(bad(i, format!("side_mm {} must be positive", j.side_mm)));
            }
            if j.anchors.is_empty() || j.anchors.iter().any(|&a| a >= PER_HAND) {
                return Err(bad(i, format!("anchors {:?} must be nonempty indices below {PER_HAND}", j.anchors)));
            }
            if j.rule == CentreRule::Landmark && j.anchors.len() != 1 {
                return Err(bad(i, "rule `landmark` takes exactly one anchor".into()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandAlignment {
    pub hand: Hand,
    /// Image coordinates → aligned frame.
    pub to_aligned: Affine2,
    /// Aligned frame → image coordinates.
    pub to_image: Affine2,
}

impl HandAlignment {
    /// Rotation applied to the image, radians (clockwise on screen).
    pub fn rotation(&self) -> f64 {
        self.to_aligned.rotation_angle()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub hands: [HandAlignment; 2],
    /// Each hand's landmarks in that hand's aligned frame.
    pub aligned: LandmarkSet,
}

impl Alignment {
    pub fn hand(&self, h: Hand) -> &HandAlignment {
        &self.hands[h.index()]
    }

    /// Renders one hand upright on a canvas of the source size, rotated
    /// about its wrist centre.
    pub fn aligned_image(&self, img: &GrayImage, lms: &LandmarkSet, h: Hand) -> GrayImage {
        let c = lms.wrist_centre(h);
        let canvas_to_frame = Affine2::translation(-c.x, -c.y);
        let out_to_in = self.hand(h).to_image.then_after(&canvas_to_frame);
        img.warp(&out_to_in, img.height(), img.width(), 0.0)
    }
}

/// Rotates each hand about its wrist centre so that the axis from the wrist
/// centre to the middle fingertip points up.
pub fn align_to_standard(lms: &LandmarkSet) -> Result<Alignment> {
    let mut hands = Vec::with_capacity(2);
    let mut pts = Vec::with_capacity(lms.points().len());
    for h in Hand::BOTH {
        let c = lms.wrist_centre(h);
        let tip = lms.get(h.offset() + AXIS_TIP);
        let (vx, vy) = (tip.x - c.x, tip.y - c.y);
        if !(vx.hypot(vy) > 0.0) {
            return Err(Error::invalid(format!("{h:?} alignment axis has zero length")));
        }
        let theta = -FRAC_PI_2 - vy.atan2(vx);
        let to_aligned = Affine2::rotation_about(Point::default(), theta).then_after(&Affine2::translation(-c.x, -c.y));
        let to_image = to_aligned.inverse().expect("rotation is invertible");
        pts.extend(lms.hand(h).iter().map(|&p| to_aligned.apply(p)));
        hands.push(HandAlignment { hand: h, to_aligned, to_image });
    }
    Ok(Alignment {
        hands: [hands[0], hands[1]],
        aligned: LandmarkSet::new(pts)?,
    })
}

/// Bilinear sample with replicated borders at a snapped position, exact for
/// integer-valued images.
fn sample_exact(src: &ArrayView2<f32>, x: f64, y: f64) -> f64 {
    let (h, w) = src.dim();
    let x = snap(x, SAMPLE_GRID).clamp(0.0, (w - 1) as f64);
    let y = snap(y, SAMPLE_GRID).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as usize, y0 as usize);
    let (xj, yj) = ((xi + 1).min(w - 1), (yi + 1).min(h - 1));
    let v = |r: usize, c: usize| src[[r, c]] as f64;
    (v(yi, xi) * (1.0 - fx) + v(yi, xj) * fx) * (1.0 - fy) + (v(yj, xi) * (1.0 - fx) + v(yj, xj) * fx) * fy
}

/// Odd pixel side for a physical size.
pub fn side_px(side_mm: f64, spacing: f64) -> usize {
    let s = snap(side_mm / spacing, GEOM_GRID);
    2 * ((s - 1.0) / 2.0).round().max(0.0) as usize + 1
}

/// Crops one square of odd side `side` centred on integer aligned-frame
/// position `centre`, returning the raw crop and whether it left the image.
fn crop_aligned(img: &GrayImage, frame: &HandAlignment, centre: (i64, i64), side: usize) -> (Array2<f32>, bool) {
    let half = (side / 2) as i64;
    let src = img.view();
    let (h, w) = (img.height() as f64, img.width() as f64);
    let mut outside = false;
    let data = Array2::from_shape_fn((side, side), |(r, c)| {
        let q = Point::new((centre.0 - half + c as i64) as f64, (centre.1 - half + r as i64) as f64);
        let p = frame.to_image.apply(q);
        let (sx, sy) = (snap(p.x, SAMPLE_GRID), snap(p.y, SAMPLE_GRID));
        if sx < 0.0 || sy < 0.0 || sx > w - 1.0 || sy > h - 1.0 {
            outside = true;
        }
        sample_exact(&src, p.x, p.y).round() as f32
    });
    (data, outside)
}

/// Crops 25 patches per hand (left-side hand first) and resizes each to
/// `out_size × out_size`.
pub fn crop_joint_patches(
    source_id: &str,
    img: &GrayImage,
    alignment: &Alignment,
    spec: &JointPatchSpec,
    spacing: f64,
    out_size: usize,
) -> Result<PatchBag> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::invalid(format!("spacing {spacing} must be positive")));
    }
    let mut patches = Vec::with_capacity(2 * spec.joints.len());
    for h in Hand::BOTH {
        let frame = alignment.hand(h);
        let aligned = alignment.aligned.hand(h);
        for j in &spec.joints {
            let anchors: Vec<Point> = j.anchors.iter().map(|&a| aligned[a]).collect();
            let c = match j.rule {
                CentreRule::Landmark => anchors[0],
                CentreRule::Centroid => centroid(&anchors),
            };
            let centre = (snap(c.x, GEOM_GRID).round() as i64, snap(c.y, GEOM_GRID).round() as i64);
            let side = side_px(j.side_mm, spacing);
            let (raw, padded) = crop_aligned(img, frame, centre, side);
            let half = (side / 2) as i64;
            let square = Rect::new(centre.0 - half, centre.1 - half, side, side).quad();
            let quad: Quad = square.transformed(&frame.to_image);
            patches.push(Patch {
                pixels: resample(&raw.view(), out_size, out_size),
                provenance: Provenance {
                    rect: quad.bounding_rect(),
                    quad,
                    tag: PatchTag::Joint {
                        hand: h.index(),
                        name: j.name.clone(),
                    },
                    padded,
                },
            });
        }
    }
    Ok(PatchBag {
        source_id: source_id.to_string(),
        scheme: Scheme::Joints,
        patches,
        repeated: false,
    })
}
