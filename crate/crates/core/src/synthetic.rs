//! Procedural dual-hand radiographs with known landmarks, lesions, scores
//! and foreground masks.
//!
//! Each hand is a chain of capsules (soft tissue, then brighter bone) posed
//! in a per-hand frame: `u` points toward the thumb, `v` distally, both in
//! millimetres with the wrist centre at the origin. Lesions are dark discs
//! centred on eligible joint landmarks. The score is `score_per_lesion`
//! times the lesion count.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, ManifestEntry, Radiograph, Split};
use crate::error::{Error, Result};
use crate::foreground::ForegroundMask;
use crate::geometry::{Point, Rect};
use crate::image::GrayImage;
use crate::joints::{finger_base, Hand, LandmarkSet, PER_HAND};
use crate::tiling::grid_shape;

/// Per-hand landmark indices that can carry a lesion: thumb IP and MCP,
/// and the PIP and MCP joints of the four fingers.
pub const LESION_JOINTS: [usize; 10] = [1, 2, 6, 7, 11, 12, 16, 17, 21, 22];

/// Half-width of the bone at a lesion-eligible joint, mm.
const JOINT_HALF_WIDTH_MM: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Inclusive lesion-count range; counts are drawn uniformly.
    pub min_lesions: usize,
    pub max_lesions: usize,
    pub lesion_radius_mm: f64,
    /// Intensity removed at a lesion (8-bit units).
    pub lesion_delta: f64,
    pub score_per_lesion: f64,
    /// Pixels per millimetre range, drawn per image.
    pub px_per_mm: (f64, f64),
    /// Maximum per-hand rotation, degrees.
    pub max_rotation_deg: f64,
    pub noise_sd: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 224,
            width: 272,
            seed: 7,
            min_lesions: 0,
            max_lesions: 8,
            lesion_radius_mm: 4.5,
            lesion_delta: 150.0,
            score_per_lesion: 10.0,
            px_per_mm: (0.76, 0.86),
            max_rotation_deg: 10.0,
            noise_sd: 4.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config { key: key.into(), message };
        if self.height < 128 || self.width < 160 {
            return Err(bad("height", format!("{}×{} is too small for two hands", self.height, self.width)));
        }
        if !(self.lesion_radius_mm > 0.0) {
            return Err(bad("lesion_radius_mm", "must be positive".into()));
        }
        if self.lesion_radius_mm > JOINT_HALF_WIDTH_MM {
            return Err(bad(
                "lesion_radius_mm",
                format!("{} mm lesions are larger than the {JOINT_HALF_WIDTH_MM} mm joints", self.lesion_radius_mm),
            ));
        }
        if self.min_lesions > self.max_lesions || self.max_lesions > 2 * LESION_JOINTS.len() {
            return Err(bad("max_lesions", format!("range {}..={} is not feasible", self.min_lesions, self.max_lesions)));
        }
        if !(self.px_per_mm.0 > 0.0 && self.px_per_mm.0 <= self.px_per_mm.1) {
            return Err(bad("px_per_mm", format!("{:?} is not a valid range", self.px_per_mm)));
        }
        if self.score_per_lesion < 0.0 || self.noise_sd < 0.0 || self.lesion_delta < 0.0 {
            return Err(bad("score_per_lesion", "scores, noise and lesion contrast must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub centre: Point,
    pub radius_px: f64,
    /// Global landmark index of the joint.
    pub landmark: usize,
}

impl Lesion {
    /// Pixel `(x, y)` lies in the lesion disc.
    pub fn covers(&self, x: i64, y: i64) -> bool {
        Point::new(x as f64, y as f64).dist(self.centre) <= self.radius_px
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCase {
    pub radiograph: Radiograph,
    pub landmarks: LandmarkSet,
    pub lesions: Vec<Lesion>,
    /// Rasterized soft-tissue outline.
    pub foreground: Array2<u8>,
    pub px_per_mm: f64,
}

impl SyntheticCase {
    pub fn spacing(&self) -> f64 {
        1.0 / self.px_per_mm
    }
}

/// Signed distance to a capsule (segment `a`–`b`, radius `r`).
#[derive(Clone, Copy, Debug)]
struct Capsule {
    a: Point,
    b: Point,
    r: f64,
}

impl Capsule {
    fn sdf(&self, p: Point) -> f64 {
        let (dx, dy) = (self.b.x - self.a.x, self.b.y - self.a.y);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.x - self.a.x) * dx + (p.y - self.a.y) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        p.dist(Point::new(self.a.x + t * dx, self.a.y + t * dy)) - self.r
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.a.x.min(self.b.x) - self.r,
            self.a.y.min(self.b.y) - self.r,
            self.a.x.max(self.b.x) + self.r,
            self.a.y.max(self.b.y) + self.r,
        )
    }
}

/// Signed distance to a simple polygon (negative inside).
fn polygon_sdf(poly: &[Point], p: Point) -> f64 {
    let mut d = f64::INFINITY;
    let mut inside = false;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        d = d.min(Capsule { a, b, r: 0.0 }.sdf(p));
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
    }
    if inside {
        -d
    } else {
        d
    }
}

#[derive(Default)]
struct HandShapes {
    soft: Vec<Capsule>,
    soft_polys: Vec<Vec<Point>>,
    bone: Vec<Capsule>,
}

/// Pose of one hand in image space.
struct Pose {
    centre: Point,
    angle: f64,
    scale: f64,
    /// +1 when the thumb points toward +x.
    mirror: f64,
}

impl Pose {
    fn place(&self, u: f64, v: f64) -> Point {
        let (s, c) = self.angle.sin_cos();
        let x = self.mirror * u * self.scale;
        let y = -v * self.scale;
        Point::new(self.centre.x + c * x - s * y, self.centre.y + s * x + c * y)
    }
}

fn along(p: (f64, f64), angle_deg: f64, len: f64) -> (f64, f64) {
    let a = angle_deg.to_radians();
    (p.0 + len * a.sin(), p.1 + len * a.cos())
}

/// Builds one hand: its 37 landmarks (image px) and render primitives.
fn build_hand(pose: &Pose, rng: &mut ChaCha8Rng) -> (Vec<Point>, HandShapes) {
    let mut local = vec![(0.0f64, 0.0f64); PER_HAND];
    let length = rng.random_range(0.95..1.05);
    let mut jit = |sd: f64| Normal::new(0.0, sd).unwrap().sample(&mut *rng);

    local[32] = (25.0, 0.0);
    local[33] = (-25.0, 0.0);
    local[34] = (14.0 + jit(0.5), -10.0 + jit(0.5));
    local[35] = (-16.0 + jit(0.5), -9.0 + jit(0.5));
    local[36] = (2.0 + jit(0.5), 6.0 + jit(0.5));
    let carpals = [
        (24, (15.0, 27.0)),
        (25, (6.0, 30.0)),
        (26, (-3.0, 29.0)),
        (27, (-13.0, 28.0)),
        (28, (11.0, 14.0)),
        (29, (-1.0, 14.0)),
        (30, (-12.0, 15.0)),
        (31, (-18.0, 19.0)),
    ];
    for (i, (u, v)) in carpals {
        local[i] = (u + jit(0.6), v + jit(0.6));
    }

    // fingers: cmc base, spread angle (toward thumb positive), segment lengths
    let fingers = [
        ((6.0, 38.0), 6.0, [65.0, 40.0, 24.0, 18.0]),
        ((-3.0, 39.0), -1.0, [63.0, 44.0, 28.0, 19.0]),
        ((-12.0, 37.0), -8.0, [56.0, 41.0, 26.0, 19.0]),
        ((-20.0, 34.0), -16.0, [52.0, 33.0, 18.0, 17.0]),
    ];
    for (f, (base, angle, lens)) in fingers.iter().enumerate() {
        let b = finger_base(f);
        let cmc = (base.0 + jit(0.6), base.1 + jit(0.6));
        let mc_angle = angle + jit(1.5);
        let ph_angle = mc_angle + jit(3.0);
        let mcp = along(cmc, mc_angle, lens[0] * length);
        let pip = along(mcp, ph_angle, lens[1] * length);
        let dip = along(pip, ph_angle + jit(2.0), lens[2] * length);
        let tip = along(dip, ph_angle + jit(2.0), lens[3] * length);
        local[b + 4] = cmc;
        local[b + 3] = mcp;
        local[b + 2] = pip;
        local[b + 1] = dip;
        local[b] = tip;
    }
    let thumb_angle = 30.0 + jit(3.0);
    let cmc = (19.0 + jit(0.6), 24.0 + jit(0.6));
    let mcp = along(cmc, thumb_angle, 40.0 * length);
    let ip = along(mcp, thumb_angle - 4.0 + jit(2.0), 28.0 * length);
    let tip = along(ip, thumb_angle - 6.0 + jit(2.0), 20.0 * length);
    local[3] = cmc;
    local[2] = mcp;
    local[1] = ip;
    local[0] = tip;

    let at = |i: usize| local[i];
    let p = |(u, v): (f64, f64)| pose.place(u, v);
    let mm = pose.scale;
    let mut s = HandShapes::default();

    // soft tissue
    let cap = |a: (f64, f64), b: (f64, f64), r: f64| Capsule { a: p(a), b: p(b), r: r * mm };
    for f in 0..4 {
        let b = finger_base(f);
        let dir = (at(b).0 - at(b + 1).0, at(b).1 - at(b + 1).1);
        let n = dir.0.hypot(dir.1).max(1e-9);
        let beyond = (at(b).0 + 2.0 * dir.0 / n, at(b).1 + 2.0 * dir.1 / n);
        s.soft.push(cap(at(b + 3), at(b + 2), 8.5));
        s.soft.push(cap(at(b + 2), at(b + 1), 8.0));
        s.soft.push(cap(at(b + 1), beyond, 7.5));
        s.soft.push(cap(at(b + 4), at(b + 3), 8.5));
    }
    s.soft.push(cap(at(3), at(2), 10.0));
    s.soft.push(cap(at(2), at(1), 9.0));
    s.soft.push(cap(at(1), at(0), 8.5));
    let mcp = |f: usize| at(finger_base(f) + 3);
    s.soft_polys.push(
        [
            (26.0, 0.0),
            (at(3).0 + 7.0, at(3).1),
            mcp(0),
            mcp(1),
            mcp(2),
            mcp(3),
            (-25.0, 22.0),
            (-26.0, 0.0),
        ]
        .map(p)
        .to_vec(),
    );
    let far = 400.0;
    s.soft_polys.push([(27.0, 2.0), (-27.0, 2.0), (-30.0, -far), (30.0, -far)].map(p).to_vec());

    // bone: phalanges and metacarpals with joint gaps
    let gap = 1.8;
    let mut bone = |a: (f64, f64), b: (f64, f64), r: f64, gap_a: f64, gap_b: f64| {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let n = dx.hypot(dy).max(1e-9);
        let a2 = (a.0 + gap_a * dx / n, a.1 + gap_a * dy / n);
        let b2 = (b.0 - gap_b * dx / n, b.1 - gap_b * dy / n);
        s.bone.push(Capsule { a: p(a2), b: p(b2), r: r * mm });
    };
    for f in 0..4 {
        let b = finger_base(f);
        bone(at(b + 4), at(b + 3), 4.0, 0.0, gap);
        bone(at(b + 3), at(b + 2), 4.2, gap, gap);
        bone(at(b + 2), at(b + 1), 3.8, gap, gap);
        bone(at(b + 1), at(b), 3.3, gap, 0.0);
    }
    bone(at(3), at(2), 4.5, 2.5, gap);
    bone(at(2), at(1), 4.2, gap, gap);
    bone(at(1), at(0), 3.6, gap, 0.0);
    for i in 24..32 {
        let r = if i == 31 { 3.8 } else { 5.2 };
        bone(at(i), at(i), r, 0.0, 0.0);
    }
    bone((14.0, -2.0), (15.0, -far), 9.0, 0.0, 0.0);
    bone((-16.0, -4.0), (-14.0, -far), 6.0, 0.0, 0.0);
    bone(at(32), at(34), 3.0, 0.0, 0.0);

    (local.iter().map(|&l| p(l)).collect(), s)
}

fn union_sdf(caps: &[Capsule], polys: &[Vec<Point>], p: Point) -> f64 {
    let mut d = f64::INFINITY;
    for c in caps {
        let (x0, y0, x1, y1) = c.bounds();
        // a capsule cannot be closer than its bounding box
        let bx = (x0 - p.x).max(p.x - x1).max(0.0);
        let by = (y0 - p.y).max(p.y - y1).max(0.0);
        if bx.hypot(by) - 2.0 > d {
            continue;
        }
        d = d.min(c.sdf(p));
    }
    for poly in polys {
        d = d.min(polygon_sdf(poly, p));
    }
    d
}

/// Renders one case. `index` selects an independent random stream.
pub fn generate_one(spec: &SyntheticSpec, index: usize, lesion_count: Option<usize>) -> Result<SyntheticCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.height, spec.width);
    let scale = rng.random_range(spec.px_per_mm.0..=spec.px_per_mm.1);

    let mut landmarks = Vec::with_capacity(2 * PER_HAND);
    let mut soft = Vec::new();
    let mut polys = Vec::new();
    let mut bones = Vec::new();
    for hand in Hand::BOTH {
        let (cx, mirror) = match hand {
            Hand::Left => (0.26 * w as f64, 1.0),
            Hand::Right => (0.74 * w as f64, -1.0),
        };
        let pose = Pose {
            centre: Point::new(cx + rng.random_range(-6.0..6.0), h as f64 - 30.0 + rng.random_range(-6.0..6.0)),
            angle: rng.random_range(-spec.max_rotation_deg..=spec.max_rotation_deg).to_radians(),
            scale,
            mirror,
        };
        let (pts, shapes) = build_hand(&pose, &mut rng);
        landmarks.extend(pts);
        soft.extend(shapes.soft);
        polys.extend(shapes.soft_polys);
        bones.extend(shapes.bone);
    }

    let eligible: Vec<usize> = Hand::BOTH
        .iter()
        .flat_map(|h| LESION_JOINTS.iter().map(move |&j| h.offset() + j))
        .collect();
    let n_lesions = match lesion_count {
        Some(n) if n > eligible.len() => return Err(Error::invalid(format!("{n} lesions exceed the {} eligible joints", eligible.len()))),
        Some(n) => n,
        None => rng.random_range(spec.min_lesions..=spec.max_lesions),
    };
    let chosen = rand::seq::index::sample(&mut rng, eligible.len(), n_lesions);
    let mut lesions: Vec<Lesion> = chosen
        .iter()
        .map(|i| Lesion {
            centre: landmarks[eligible[i]],
            radius_px: spec.lesion_radius_mm * scale,
            landmark: eligible[i],
        })
        .collect();
    lesions.sort_by_key(|l| l.landmark);

    let bg = rng.random_range(10.0..25.0);
    let soft_level = rng.random_range(115.0..135.0);
    let bone_level = rng.random_range(190.0..220.0);
    let noise = Normal::new(0.0, spec.noise_sd.max(1e-12)).unwrap();
    let mut pixels = Array2::<f32>::zeros((h, w));
    let mut foreground = Array2::<u8>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let p = Point::new(c as f64, r as f64);
            let ds = union_sdf(&soft, &polys, p);
            let a_soft = (-ds / 2.0).clamp(0.0, 1.0);
            let a_bone = if ds < 0.0 { (0.5 - union_sdf(&bones, &[], p)).clamp(0.0, 1.0) } else { 0.0 };
            let a_lesion = lesions
                .iter()
                .map(|l| (0.5 - (p.dist(l.centre) - l.radius_px)).clamp(0.0, 1.0))
                .fold(0.0, f64::max);
            let mut v = bg + (soft_level - bg) * a_soft + (bone_level - soft_level) * a_bone - spec.lesion_delta * a_lesion * a_bone.max(a_soft);
            if spec.noise_sd > 0.0 {
                v += noise.sample(&mut rng);
            }
            pixels[[r, c]] = v as f32;
            foreground[[r, c]] = u8::from(ds <= 0.0);
        }
    }
    let id = format!("syn{:05}", index);
    let score = spec.score_per_lesion * lesions.len() as f64;
    let landmarks = LandmarkSet::new(landmarks)?;
    let radiograph = Radiograph::new(id, GrayImage::new(pixels, GrayImage::MAX_8BIT), Some(score))?.with_landmarks(landmarks.clone());
    Ok(SyntheticCase {
        radiograph,
        landmarks,
        lesions,
        foreground,
        px_per_mm: scale,
    })
}

/// `n` cases with indices `0..n`, deterministic in `spec.seed`.
pub fn generate(spec: &SyntheticSpec, n: usize) -> Result<Vec<SyntheticCase>> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    (0..n).map(|i| generate_one(spec, i, None)).collect()
}

/// Tile indices (row-major over the padded grid) whose pixels intersect any
/// lesion disc.
pub fn oracle_best_bag(lesions: &[Lesion], height: usize, width: usize) -> Result<Vec<usize>> {
    let (rows, cols, side) = grid_shape(height, width)?;
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let rect = Rect::new((c * side) as i64, (r * side) as i64, side, side);
            let Some(rect) = rect.clip(width, height) else { continue };
            if lesions.iter().any(|l| rect_hits_disc(rect, l)) {
                out.push(r * cols + c);
            }
        }
    }
    Ok(out)
}

/// Tests the pixel of `rect` nearest the disc centre, found per axis.
fn rect_hits_disc(rect: Rect, l: &Lesion) -> bool {
    let nx = (l.centre.x.round() as i64).clamp(rect.x, rect.right() - 1);
    let ny = (l.centre.y.round() as i64).clamp(rect.y, rect.bottom() - 1);
    l.covers(nx, ny)
}

/// File layout written by [`write_dataset`].
pub struct WrittenDataset {
    pub manifest: DatasetManifest,
    pub manifest_path: std::path::PathBuf,
}

#[derive(Serialize, Deserialize)]
struct LesionRecord {
    id: String,
    px_per_mm: f64,
    lesions: Vec<Lesion>,
}

/// Writes images, landmark files, foreground-truth masks, lesion records
/// and a manifest into `dir`.
pub fn write_dataset(cases: &[SyntheticCase], splits: &[Split], dir: &Path) -> Result<WrittenDataset> {
    if cases.len() != splits.len() {
        return Err(Error::shape(cases.len(), splits.len()));
    }
    for sub in ["images", "landmarks", "truth"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut entries = Vec::with_capacity(cases.len());
    let mut records = Vec::with_capacity(cases.len());
    for (case, &split) in cases.iter().zip(splits) {
        let id = &case.radiograph.id;
        let image = Path::new("images").join(format!("{id}.png"));
        let lms = Path::new("landmarks").join(format!("{id}.txt"));
        case.radiograph.image.save(&dir.join(&image))?;
        case.landmarks.save(&dir.join(&lms))?;
        ForegroundMask::new(case.foreground.clone(), id.clone()).save(&ForegroundMask::path_in(&dir.join("truth"), id))?;
        records.push(LesionRecord {
            id: id.clone(),
            px_per_mm: case.px_per_mm,
            lesions: case.lesions.clone(),
        });
        entries.push(ManifestEntry {
            id: id.clone(),
            image,
            score: case.radiograph.score,
            landmarks: Some(lms),
            split,
        });
    }
    let lesion_path = dir.join("lesions.json");
    std::fs::write(&lesion_path, serde_json::to_string_pretty(&records)?).map_err(|e| Error::io(&lesion_path, e))?;
    let manifest = DatasetManifest::new(entries, dir)?;
    let manifest_path = dir.join("manifest.csv");
    manifest.save(&manifest_path)?;
    Ok(WrittenDataset { manifest, manifest_path })
}

/// Reads the lesion records written next to a synthetic manifest.
pub fn load_lesions(dir: &Path) -> Result<Vec<(String, f64, Vec<Lesion>)>> {
    let p = dir.join("lesions.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let recs: Vec<LesionRecord> = serde_json::from_str(&text)?;
    Ok(recs.into_iter().map(|r| (r.id, r.px_per_mm, r.lesions)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;
    use crate::foreground::{generate_mask, MaskConfig};
    use crate::joints::{estimate_pixel_spacing, finger_base};

    fn small() -> SyntheticSpec {
        SyntheticSpec::default()
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticSpec { seed: 7, ..small() };
        let a = generate(&spec, 3).unwrap();
        let b = generate(&spec, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.radiograph.image, y.radiograph.image);
            assert_eq!(x.landmarks, y.landmarks);
        }
        let c = generate(&SyntheticSpec { seed: 8, ..small() }, 1).unwrap();
        assert_ne!(a[0].radiograph.image, c[0].radiograph.image);
    }

    #[test]
    fn zero_lesion_spec_scores_zero() {
        let spec = SyntheticSpec {
            max_lesions: 0,
            ..small()
        };
        for c in generate(&spec, 3).unwrap() {
            assert_eq!(c.radiograph.score, Some(0.0));
            assert!(c.lesions.is_empty());
        }
    }

    #[test]
    fn score_rule_and_lesion_placement() {
        for c in generate(&small(), 6).unwrap() {
            assert_eq!(c.radiograph.score, Some(10.0 * c.lesions.len() as f64));
            for l in &c.lesions {
                assert_eq!(l.centre, c.landmarks.get(l.landmark));
                assert!(LESION_JOINTS.contains(&(l.landmark % PER_HAND)));
            }
        }
    }

    #[test]
    fn infeasible_specs_rejected() {
        let big = SyntheticSpec {
            lesion_radius_mm: 12.0,
            ..small()
        };
        assert!(matches!(generate(&big, 1), Err(Error::Config { .. })));
        assert!(generate(&small(), 0).is_err());
        assert!(generate_one(&small(), 0, Some(21)).is_err());
    }

    #[test]
    fn geometry_is_consistent() {
        for c in generate(&small(), 4).unwrap() {
            let (h, w) = (c.radiograph.height(), c.radiograph.width());
            assert!(c.landmarks.in_bounds(h, w));
            for hand in Hand::BOTH {
                let s = estimate_pixel_spacing(&c.landmarks, hand).unwrap();
                assert!((s - c.spacing()).abs() < 1e-9);
                // fingertips lie in the rendered soft tissue
                for f in 0..4 {
                    let t = c.landmarks.get(hand.offset() + finger_base(f));
                    assert_eq!(c.foreground[[t.y.round() as usize, t.x.round() as usize]], 1);
                }
                let t = c.landmarks.get(hand.offset());
                assert_eq!(c.foreground[[t.y.round() as usize, t.x.round() as usize]], 1);
            }
            // left-side hand is on the left
            assert!(!crate::joints::symmetry_confusion(&c.landmarks));
        }
    }

    #[test]
    fn morphological_mask_matches_outline() {
        for c in generate(&small(), 3).unwrap() {
            let m = generate_mask("x", &c.radiograph.image, &MaskConfig::default()).unwrap();
            let inter = m.pixels.iter().zip(&c.foreground).filter(|(a, b)| **a == 1 && **b == 1).count() as f64;
            let dice = 2.0 * inter / (m.count() as f64 + c.foreground.iter().filter(|&&v| v == 1).count() as f64);
            assert!(dice >= 0.95, "dice {dice}");
        }
    }

    fn brute_force(lesions: &[Lesion], h: usize, w: usize) -> Vec<usize> {
        let (_, cols, side) = grid_shape(h, w).unwrap();
        let mut hit = std::collections::BTreeSet::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if lesions.iter().any(|l| l.covers(x, y)) {
                    hit.insert((y as usize / side) * cols + x as usize / side);
                }
            }
        }
        hit.into_iter().collect()
    }

    #[test]
    fn oracle_bag_examples() {
        let (h, w) = (224, 272);
        // side 27: tile (row 1, col 2) spans x 54..81, y 27..54
        let inside = Lesion {
            centre: Point::new(67.0, 40.0),
            radius_px: 3.5,
            landmark: 0,
        };
        assert_eq!(oracle_best_bag(&[inside], h, w).unwrap(), vec![11 + 2]);
        let straddle = Lesion {
            centre: Point::new(80.5, 40.0),
            radius_px: 3.5,
            landmark: 0,
        };
        assert_eq!(oracle_best_bag(&[straddle], h, w).unwrap(), vec![13, 14]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let lesions: Vec<Lesion> = (0..rng.random_range(1..5))
                .map(|_| Lesion {
                    centre: Point::new(rng.random_range(0.0..272.0), rng.random_range(0.0..224.0)),
                    radius_px: rng.random_range(1.0..6.0),
                    landmark: 0,
                })
                .collect();
            assert_eq!(oracle_best_bag(&lesions, h, w).unwrap(), brute_force(&lesions, h, w));
        }
        for c in generate(&small(), 3).unwrap() {
            assert_eq!(oracle_best_bag(&c.lesions, h, w).unwrap(), brute_force(&c.lesions, h, w));
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cases = generate(&small(), 3).unwrap();
        let w = write_dataset(&cases, &[Split::Train, Split::Val, Split::Test], dir.path()).unwrap();
        let m = load_manifest(&w.manifest_path).unwrap();
        assert_eq!(m.entries.len(), 3);
        let r = m.load_radiograph(&m.entries[1]).unwrap();
        assert_eq!(r.image, cases[1].radiograph.image);
        let l = r.landmarks.unwrap();
        for (a, b) in l.points().iter().zip(cases[1].landmarks.points()) {
            assert!(a.dist(*b) < 1e-9);
        }
        assert_eq!(load_lesions(dir.path()).unwrap()[2].2, cases[2].lesions);
    }
}
