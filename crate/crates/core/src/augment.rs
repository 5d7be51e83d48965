//! Random image augmentation that keeps landmarks and masks in register.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foreground::ForegroundMask;
use crate::geometry::{Affine2, Point};
use crate::image::{rot90_cw, GrayImage};
use crate::joints::{LandmarkSet, NUM_LANDMARKS, PER_HAND};

/// Small random affine applied about the image centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineJitter {
    pub max_rotation_deg: f64,
    /// Maximum shift as a fraction of each image side.
    pub max_translate: f64,
    pub scale: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub flip_prob: f64,
    pub intensity: (f32, f32),
    /// Allowed clockwise quarter turns, drawn uniformly.
    pub quarter_turns: Vec<u8>,
    pub affine: Option<AffineJitter>,
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            intensity: (1.0, 1.0),
            quarter_turns: vec![0],
            affine: None,
        }
    }

    /// Flip, intensity scaling and right-angle rotation.
    pub fn shared() -> Self {
        Self {
            flip_prob: 0.5,
            intensity: (0.9, 1.1),
            quarter_turns: vec![0, 1, 2, 3],
            affine: None,
        }
    }

    /// The shared policy plus a small random affine.
    pub fn joint_scheme() -> Self {
        Self {
            affine: Some(AffineJitter {
                max_rotation_deg: 10.0,
                max_translate: 0.05,
                scale: (0.9, 1.1),
            }),
            ..Self::shared()
        }
    }

    /// Translation and scaling only; no flips or rotations, so the two hands
    /// keep their image sides and the input shape stays fixed.
    pub fn landmark_training() -> Self {
        Self {
            flip_prob: 0.0,
            intensity: (0.9, 1.1),
            quarter_turns: vec![0],
            affine: Some(AffineJitter {
                max_rotation_deg: 0.0,
                max_translate: 0.05,
                scale: (0.9, 1.1),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Config { key: key.into(), message: message.into() });
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob", "must lie in [0, 1]");
        }
        let (lo, hi) = self.intensity;
        if !(0.9..=1.1).contains(&lo) || !(0.9..=1.1).contains(&hi) || lo > hi {
            return bad("intensity", "bounds must satisfy 0.9 <= lo <= hi <= 1.1");
        }
        if self.quarter_turns.is_empty() || self.quarter_turns.iter().any(|&k| k > 3) {
            return bad("quarter_turns", "must be a nonempty subset of {0, 1, 2, 3}");
        }
        if let Some(a) = &self.affine {
            if !(a.max_rotation_deg >= 0.0 && a.max_translate >= 0.0 && a.scale.0 > 0.0 && a.scale.0 <= a.scale.1) {
                return bad("affine", "rotation and translation must be nonnegative and scale bounds ordered and positive");
            }
        }
        Ok(())
    }
}

/// One drawn set of augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub quarter_turns: u8,
    pub intensity: f32,
    /// `(angle radians, (dx, dy) as side fractions, scale)` of the affine stage.
    pub affine: Option<(f64, (f64, f64), f64)>,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            flip: false,
            quarter_turns: 0,
            intensity: 1.0,
            affine: None,
        }
    }
}

pub fn draw<R: Rng + ?Sized>(policy: &AugmentationPolicy, rng: &mut R) -> AugmentDraw {
    let flip = policy.flip_prob > 0.0 && rng.random::<f64>() < policy.flip_prob;
    let quarter_turns = policy.quarter_turns[rng.random_range(0..policy.quarter_turns.len())];
    let (lo, hi) = policy.intensity;
    let intensity = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let affine = policy.affine.as_ref().map(|a| {
        let angle = if a.max_rotation_deg > 0.0 {
            rng.random_range(-a.max_rotation_deg..=a.max_rotation_deg).to_radians()
        } else {
            0.0
        };
        let t = a.max_translate;
        let shift = if t > 0.0 {
            (rng.random_range(-t..=t), rng.random_range(-t..=t))
        } else {
            (0.0, 0.0)
        };
        let scale = if a.scale.1 > a.scale.0 { rng.random_range(a.scale.0..=a.scale.1) } else { a.scale.0 };
        (angle, shift, scale)
    });
    AugmentDraw {
        flip,
        quarter_turns,
        intensity,
        affine,
    }
}

#[derive(Clone, Debug)]
pub struct Augmented {
    pub image: GrayImage,
    pub landmarks: Option<LandmarkSet>,
    pub mask: Option<ForegroundMask>,
}

/// Forward map of the affine stage for an `h × w` image.
fn affine_forward(angle: f64, shift: (f64, f64), scale: f64, h: usize, w: usize) -> Affine2 {
    let c = Point::new((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    Affine2::scale_about(c, scale, scale)
        .then(&Affine2::rotation_about(c, angle))
        .then(&Affine2::translation(shift.0 * w as f64, shift.1 * h as f64))
}

/// Applies flip, quarter turns, affine and intensity scaling, in that order.
/// A flip mirrors `x` and swaps the two hand blocks, so the first block
/// always describes the hand on the left of the image.
pub fn apply(img: &GrayImage, lms: Option<&LandmarkSet>, mask: Option<&ForegroundMask>, d: &AugmentDraw) -> Result<Augmented> {
    let mut image = img.clone();
    let mut pts: Option<Vec<Point>> = lms.map(|l| l.points().to_vec());
    let mut m = mask.map(|m| m.pixels.mapv(|v| v as f32));
    let (mut h, mut w) = (img.height(), img.width());

    if d.flip {
        image = image.flip_horizontal();
        if let Some(p) = pts.as_mut() {
            let mirrored: Vec<Point> = p.iter().map(|q| Point::new(w as f64 - 1.0 - q.x, q.y)).collect();
            let mut swapped = Vec::with_capacity(NUM_LANDMARKS);
            swapped.extend_from_slice(&mirrored[PER_HAND..]);
            swapped.extend_from_slice(&mirrored[..PER_HAND]);
            *p = swapped;
        }
        if let Some(mm) = m.as_mut() {
            *mm = Array2::from_shape_fn((h, w), |(r, c)| mm[[r, w - 1 - c]]);
        }
    }
    for _ in 0..d.quarter_turns {
        image = image.rot90_cw();
        if let Some(p) = pts.as_mut() {
            for q in p.iter_mut() {
                *q = Point::new(h as f64 - 1.0 - q.y, q.x);
            }
        }
        if let Some(mm) = m.as_mut() {
            *mm = rot90_cw(&mm.view());
        }
        std::mem::swap(&mut h, &mut w);
    }
    if let Some((angle, shift, scale)) = d.affine {
        let fwd = affine_forward(angle, shift, scale, h, w);
        let inv = fwd.inverse().ok_or_else(|| Error::invalid("degenerate augmentation affine"))?;
        image = image.warp(&inv, h, w, 0.0);
        if let Some(p) = pts.as_mut() {
            for q in p.iter_mut() {
                *q = fwd.apply(*q);
            }
        }
        if let Some(mm) = m.as_mut() {
            let src = GrayImage::new(mm.mapv(|v| v * 255.0), 255.0);
            *mm = src.warp(&inv, h, w, 0.0).into_data().mapv(|v| v / 255.0);
        }
    }
    if d.intensity != 1.0 {
        image = image.scale_intensity(d.intensity);
    }
    let landmarks = pts.map(LandmarkSet::new).transpose()?;
    let mask = match (m, mask) {
        (Some(mm), Some(orig)) => Some(ForegroundMask::new(mm.mapv(|v| u8::from(v >= 0.5)), orig.source_id.clone())),
        _ => None,
    };
    Ok(Augmented { image, landmarks, mask })
}

/// Draws parameters from `policy` and applies them.
pub fn augment<R: Rng + ?Sized>(
    img: &GrayImage,
    lms: Option<&LandmarkSet>,
    mask: Option<&ForegroundMask>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<Augmented> {
    apply(img, lms, mask, &draw(policy, rng))
}

/// Flip, quarter turn and intensity scaling of a raw patch, clipped to
/// `[0, max_value]`.
pub fn augment_patch<R: Rng + ?Sized>(patch: &Array2<f32>, max_value: f32, policy: &AugmentationPolicy, rng: &mut R) -> Array2<f32> {
    let d = draw(policy, rng);
    let mut p = patch.clone();
    if d.flip {
        let (h, w) = p.dim();
        p = Array2::from_shape_fn((h, w), |(r, c)| p[[r, w - 1 - c]]);
    }
    for _ in 0..d.quarter_turns {
        p = rot90_cw(&p.view());
    }
    if d.intensity != 1.0 {
        p.mapv_inplace(|v| (v * d.intensity).clamp(0.0, max_value));
    }
    p
}
