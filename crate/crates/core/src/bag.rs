//! Patch and feature bags with per-patch provenance.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Quad, Rect};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// Abnormality-ranked grid tiles.
    Tiling,
    /// Landmark-anchored joint crops.
    Joints,
}

impl Scheme {
    pub fn number(self) -> u8 {
        match self {
            Scheme::Tiling => 1,
            Scheme::Joints => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Scheme::Tiling),
            2 => Some(Scheme::Joints),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PatchTag {
    Tile {
        /// Row-major tile index.
        index: usize,
        /// Argmax class (0 normal, 1 abnormal, 2 background).
        class: usize,
        p_abnormal: f64,
    },
    Joint {
        /// 0 for the left-side hand, 1 for the right-side hand.
        hand: usize,
        name: String,
    },
}

/// Where a patch came from in the source radiograph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Axis-aligned bounding box of `quad` in source pixels.
    pub rect: Rect,
    /// Exact footprint in source pixels (rotated for aligned crops).
    pub quad: Quad,
    pub tag: PatchTag,
    /// The window extended past the image border and was edge-padded.
    pub padded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Array2<f32>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchBag {
    pub source_id: String,
    pub scheme: Scheme,
    pub patches: Vec<Patch>,
    /// Fewer candidates than requested; the bag repeats cyclically.
    pub repeated: bool,
}

impl PatchBag {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn provenance(&self) -> Vec<Provenance> {
        self.patches.iter().map(|p| p.provenance.clone()).collect()
    }
}

/// `K × d` patch embeddings with the bag label in SvdH units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBag {
    pub source_id: String,
    pub features: Array2<f64>,
    pub score: Option<f64>,
    pub provenance: Vec<Provenance>,
}

impl FeatureBag {
    pub fn new(source_id: impl Into<String>, features: Array2<f64>, score: Option<f64>) -> Self {
        Self {
            source_id: source_id.into(),
            features,
            score,
            provenance: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn with_provenance(mut self, provenance: Vec<Provenance>) -> Result<Self> {
        if provenance.len() != self.k() {
            return Err(Error::shape(self.k(), provenance.len()));
        }
        self.provenance = provenance;
        Ok(self)
    }

    /// Reorders rows (and provenance) so row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let features = self.features.select(Axis(0), perm);
        let provenance = if self.provenance.is_empty() {
            Vec::new()
        } else {
            perm.iter().map(|&i| self.provenance[i].clone()).collect()
        };
        Self {
            source_id: self.source_id.clone(),
            features,
            score: self.score,
            provenance,
        }
    }
}
