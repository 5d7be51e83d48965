//! Grid tiling, weak image-level labels and abnormality-ranked top-K
//! sampling.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bag::{Patch, PatchBag, PatchTag, Provenance, Scheme};
use crate::error::{Error, Result};
use crate::foreground::{foreground_fraction, ForegroundMask};
use crate::geometry::Rect;
use crate::image::GrayImage;

pub const NORMAL_BELOW: f64 = 5.0;
pub const ABNORMAL_FROM: f64 = 70.0;
pub const BACKGROUND_MAX_FRACTION: f64 = 0.02;

pub const CLASS_NORMAL: usize = 0;
pub const CLASS_ABNORMAL: usize = 1;
pub const CLASS_BACKGROUND: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeakLabel {
    Normal,
    Abnormal,
    Background,
    Unlabeled,
}

impl WeakLabel {
    /// Class index for patch-classifier training, if the label has one.
    pub fn class(self) -> Option<usize> {
        match self {
            WeakLabel::Normal => Some(CLASS_NORMAL),
            WeakLabel::Abnormal => Some(CLASS_ABNORMAL),
            WeakLabel::Background => Some(CLASS_BACKGROUND),
            WeakLabel::Unlabeled => None,
        }
    }
}

pub fn weak_label_image(score: f64) -> Result<WeakLabel> {
    if !(score >= 0.0) {
        return Err(Error::invalid(format!("negative score {score}")));
    }
    Ok(if score < NORMAL_BELOW {
        WeakLabel::Normal
    } else if score >= ABNORMAL_FROM {
        WeakLabel::Abnormal
    } else {
        WeakLabel::Unlabeled
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    /// Row-major position in the grid.
    pub index: usize,
    pub rect: Rect,
    pub pixels: Array2<f32>,
    /// (p-normal, p-abnormal, p-background).
    pub class_probs: Option<[f64; 3]>,
    pub background: bool,
}

impl Tile {
    pub fn set_probs(&mut self, probs: [f64; 3]) -> Result<()> {
        let s: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("class probabilities {probs:?} are not a distribution")));
        }
        self.class_probs = Some(probs);
        Ok(())
    }

    /// Training label: background overrides the image's weak label.
    pub fn label(&self, image_label: WeakLabel) -> WeakLabel {
        if self.background {
            WeakLabel::Background
        } else {
            image_label
        }
    }

    fn argmax(&self) -> usize {
        let p = self.class_probs.expect("tile without class probabilities");
        let mut best = 0;
        for c in 1..3 {
            if p[c] > p[best] {
                best = c;
            }
        }
        best
    }
}

pub fn tile_side(height: usize, width: usize) -> usize {
    height.max(width) / 10
}

/// Grid dimensions `(rows, cols)` after padding up to a multiple of the side.
pub fn grid_shape(height: usize, width: usize) -> Result<(usize, usize, usize)> {
    let side = tile_side(height, width);
    if side == 0 || height.min(width) < side {
        return Err(Error::invalid(format!("{height}×{width} image is smaller than one tile")));
    }
    Ok((height.div_ceil(side), width.div_ceil(side), side))
}

/// Non-overlapping square tiles of side ⌊max(H, W)/10⌋ over the edge-padded
/// image, in row-major order.
pub fn partition_tiles(img: &GrayImage) -> Result<Vec<Tile>> {
    let (rows, cols, side) = grid_shape(img.height(), img.width())?;
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let rect = Rect::new((c * side) as i64, (r * side) as i64, side, side);
            tiles.push(Tile {
                index: r * cols + c,
                rect,
                pixels: img.crop_edge_padded(rect),
                class_probs: None,
                background: false,
            });
        }
    }
    Ok(tiles)
}

/// Marks tiles whose foreground fraction is at most 2% (inclusive).
pub fn label_background_tiles(tiles: &mut [Tile], mask: &ForegroundMask) -> Result<()> {
    for t in tiles.iter_mut() {
        t.background = foreground_fraction(mask, t.rect)? <= BACKGROUND_MAX_FRACTION;
    }
    Ok(())
}

fn bucket_rank(class: usize) -> usize {
    match class {
        CLASS_ABNORMAL => 0,
        CLASS_NORMAL => 1,
        _ => 2,
    }
}

/// Ordering used for sampling: bucket (abnormal, normal, background), then
/// p-abnormal descending, then tile index ascending.
fn sample_order(a: &Tile, b: &Tile) -> Ordering {
    let pa = a.class_probs.unwrap()[CLASS_ABNORMAL];
    let pb = b.class_probs.unwrap()[CLASS_ABNORMAL];
    bucket_rank(a.argmax())
        .cmp(&bucket_rank(b.argmax()))
        .then(pb.total_cmp(&pa))
        .then(a.index.cmp(&b.index))
}

/// Takes the first `k` tiles in sampling order. With fewer than `k` tiles the
/// ordered list repeats cyclically and the bag is flagged.
pub fn rank_and_sample(source_id: &str, tiles: &[Tile], k: usize, img_size: (usize, usize)) -> Result<PatchBag> {
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    if tiles.is_empty() {
        return Err(Error::Empty("tiles"));
    }
    if let Some(t) = tiles.iter().find(|t| t.class_probs.is_none()) {
        return Err(Error::invalid(format!("tile {} has no class probabilities", t.index)));
    }
    let mut order: Vec<&Tile> = tiles.iter().collect();
    order.sort_by(|a, b| sample_order(a, b));
    let (h, w) = img_size;
    let patches = order
        .iter()
        .cycle()
        .take(k)
        .map(|t| Patch {
            pixels: t.pixels.clone(),
            provenance: Provenance {
                rect: t.rect,
                quad: t.rect.quad(),
                tag: PatchTag::Tile {
                    index: t.index,
                    class: t.argmax(),
                    p_abnormal: t.class_probs.unwrap()[CLASS_ABNORMAL],
                },
                padded: !t.rect.within(w, h),
            },
        })
        .collect();
    Ok(PatchBag {
        source_id: source_id.to_string(),
        scheme: Scheme::Tiling,
        patches,
        repeated: tiles.len() < k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tile_with(index: usize, probs: [f64; 3]) -> Tile {
        Tile {
            index,
            rect: Rect::new(index as i64 * 4, 0, 4, 4),
            pixels: Array2::zeros((4, 4)),
            class_probs: Some(probs),
            background: false,
        }
    }

    fn indices(bag: &PatchBag) -> Vec<usize> {
        bag.patches
            .iter()
            .map(|p| match p.provenance.tag {
                PatchTag::Tile { index, .. } => index,
                _ => unreachable!(),
            })
            .collect()
    }

    #[test]
    fn grid_sizes() {
        let t = partition_tiles(&GrayImage::zeros(1000, 800, 255.0)).unwrap();
        assert_eq!(t.len(), 80);
        assert_eq!(t[0].rect.w, 100);
        assert_eq!(grid_shape(1000, 800).unwrap(), (10, 8, 100));
        assert_eq!(grid_shape(1024, 768).unwrap(), (11, 8, 102));
        assert_eq!(11 * 102, 1122);
        assert_eq!(8 * 102, 816);
        assert_eq!(partition_tiles(&GrayImage::zeros(1024, 768, 255.0)).unwrap().len(), 88);
        assert!(partition_tiles(&GrayImage::zeros(100, 5, 255.0)).is_err());
    }

    #[test]
    fn tiles_cover_image_exactly_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let h = rng.random_range(20..160);
            let w = rng.random_range(20..160);
            if h.max(w) / 10 > h.min(w) {
                continue;
            }
            let img = GrayImage::new(Array2::from_shape_fn((h, w), |(r, c)| ((r * 7 + c * 3) % 256) as f32), 255.0);
            let tiles = partition_tiles(&img).unwrap();
            let mut hits = Array2::<u32>::zeros((h, w));
            for t in &tiles {
                assert_eq!((t.rect.w, t.rect.h), (tile_side(h, w), tile_side(h, w)));
                let c = t.rect.clip(w, h).unwrap();
                for y in c.y..c.bottom() {
                    for x in c.x..c.right() {
                        hits[[y as usize, x as usize]] += 1;
                        // pixels inside the image are copied verbatim
                        assert_eq!(
                            t.pixels[[(y - t.rect.y) as usize, (x - t.rect.x) as usize]],
                            img.data()[[y as usize, x as usize]]
                        );
                    }
                }
            }
            assert!(hits.iter().all(|&n| n == 1));
            for (i, t) in tiles.iter().enumerate() {
                assert_eq!(t.index, i);
            }
        }
    }

    #[test]
    fn weak_labels() {
        assert_eq!(weak_label_image(3.0).unwrap(), WeakLabel::Normal);
        assert_eq!(weak_label_image(70.0).unwrap(), WeakLabel::Abnormal);
        assert_eq!(weak_label_image(30.0).unwrap(), WeakLabel::Unlabeled);
        assert_eq!(weak_label_image(4.999).unwrap(), WeakLabel::Normal);
        assert_eq!(weak_label_image(5.0).unwrap(), WeakLabel::Unlabeled);
        assert!(weak_label_image(-1.0).is_err());
    }

    #[test]
    fn background_flags() {
        let mut px = Array2::zeros((100, 100));
        // tile 0 (0..10, 0..10): 2 px of 100 = 2%
        px[[0, 0]] = 1;
        px[[0, 1]] = 1;
        // tile 1 (0..10, 10..20): 50%
        px.slice_mut(ndarray::s![0..5, 10..20]).fill(1);
        let mask = ForegroundMask::new(px, "m");
        let mut tiles = partition_tiles(&GrayImage::zeros(100, 100, 255.0)).unwrap();
        label_background_tiles(&mut tiles, &mask).unwrap();
        assert!(tiles[0].background);
        assert!(!tiles[1].background);
        assert!(tiles[55].background);
        assert_eq!(tiles[1].label(WeakLabel::Abnormal), WeakLabel::Abnormal);
        assert_eq!(tiles[0].label(WeakLabel::Abnormal), WeakLabel::Background);
    }

    #[test]
    fn three_tile_example() {
        let tiles = vec![
            tile_with(0, [0.6, 0.3, 0.1]),
            tile_with(1, [0.3, 0.6, 0.1]),
            tile_with(2, [0.2, 0.1, 0.7]),
        ];
        let bag = rank_and_sample("x", &tiles, 2, (4, 12)).unwrap();
        assert_eq!(indices(&bag), vec![1, 0]);
        assert!(!bag.repeated);
    }

    #[test]
    fn single_bucket_and_cyclic_repeat() {
        let tiles: Vec<Tile> = (0..3).map(|i| tile_with(i, [0.1, 0.1 * i as f64, 0.8 - 0.1 * i as f64])).collect();
        let bag = rank_and_sample("x", &tiles, 5, (4, 12)).unwrap();
        assert_eq!(indices(&bag), vec![2, 1, 0, 2, 1]);
        assert!(bag.repeated);
        assert!(rank_and_sample("x", &tiles, 0, (4, 12)).is_err());
    }

    /// Brute force: stable-sort by the composite key computed independently.
    fn oracle(tiles: &[Tile], k: usize) -> Vec<usize> {
        let mut keyed: Vec<(usize, f64, usize)> = tiles
            .iter()
            .map(|t| {
                let p = t.class_probs.unwrap();
                let cls = if p[1] > p[0] && p[1] >= p[2] {
                    1
                } else if p[0] >= p[1] && p[0] >= p[2] {
                    0
                } else {
                    2
                };
                let bucket = [1, 0, 2][cls];
                (bucket, -p[1], t.index)
            })
            .collect();
        keyed.sort_by(|a, b| a.partial_cmp(b).unwrap());
        keyed.iter().cycle().take(k).map(|k| k.2).collect()
    }

    #[test]
    fn ties_and_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let mut tiles: Vec<Tile> = (0..n)
                .map(|i| {
                    // coarse values force ties
                    let a = rng.random_range(0..5) as f64;
                    let b = rng.random_range(0..5) as f64;
                    let c = rng.random_range(0..5) as f64 + 0.5;
                    let s = a + b + c;
                    tile_with(i, [a / s, b / s, c / s])
                })
                .collect();
            let k = rng.random_range(1..60);
            let base = rank_and_sample("x", &tiles, k, (4, 4 * n)).unwrap();
            assert_eq!(indices(&base), oracle(&tiles, k));
            tiles.shuffle(&mut rng);
            assert_eq!(rank_and_sample("x", &tiles, k, (4, 4 * n)).unwrap(), base);
        }
    }
}
