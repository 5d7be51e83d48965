//! Radiographs, dataset manifests, split assignment and score
//! standardization.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::joints::LandmarkSet;

/// Upper bound of the hand-and-foot damage score.
pub const MAX_SCORE: f64 = 448.0;

pub const MANIFEST_HEADER: [&str; 5] = ["id", "image", "score", "landmarks", "split"];

#[derive(Clone, Debug)]
pub struct Radiograph {
    pub id: String,
    pub image: GrayImage,
    pub score: Option<f64>,
    pub landmarks: Option<LandmarkSet>,
}

impl Radiograph {
    pub fn new(id: impl Into<String>, image: GrayImage, score: Option<f64>) -> Result<Self> {
        if image.height() == 0 || image.width() == 0 {
            return Err(Error::invalid("radiograph has zero extent"));
        }
        if let Some(s) = score {
            validate_score(s)?;
        }
        Ok(Self {
            id: id.into(),
            image,
            score,
            landmarks: None,
        })
    }

    pub fn with_landmarks(mut self, lms: LandmarkSet) -> Self {
        self.landmarks = Some(lms);
        self
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

pub fn validate_score(s: f64) -> Result<()> {
    if !s.is_finite() || !(0.0..=MAX_SCORE).contains(&s) {
        return Err(Error::invalid(format!("score {s} outside [0, {MAX_SCORE}]")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split tag \"{other}\"")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Absolute, or relative to the manifest's directory.
    pub image: PathBuf,
    pub score: Option<f64>,
    pub landmarks: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if let Some(s) = e.score {
                validate_score(s)?;
            }
        }
        Ok(Self {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Loads the image (and landmarks, when referenced) of one entry.
    pub fn load_radiograph(&self, entry: &ManifestEntry) -> Result<Radiograph> {
        let image = GrayImage::load(&self.resolve(&entry.image))?;
        let mut r = Radiograph::new(entry.id.clone(), image, entry.score)?;
        if let Some(lp) = &entry.landmarks {
            r.landmarks = Some(LandmarkSet::load(&self.resolve(lp))?);
        }
        Ok(r)
    }

    /// Stable fingerprint of the ids in one split.
    pub fn split_hash(&self, split: Split) -> String {
        let mut ids: Vec<&str> = self.split(split).map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        let mut h = Sha256::new();
        h.update(split.as_str().as_bytes());
        for id in ids {
            h.update([0u8]);
            h.update(id.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(MANIFEST_HEADER).map_err(|e| csv_err(path, e))?;
        for e in &self.entries {
            let score = e.score.map(|s| s.to_string()).unwrap_or_default();
            let lms = e.landmarks.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            w.write_record([
                e.id.as_str(),
                &e.image.display().to_string(),
                &score,
                &lms,
                e.split.as_str(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serde(format!("{}: {other:?}", path.display())),
    }
}

/// Reads a comma-delimited manifest with header `id,image,score,landmarks,split`.
///
/// Rows keep file order. Referenced image and landmark files must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols != MANIFEST_HEADER {
        return Err(Error::Manifest {
            row: 1,
            message: format!("expected header {:?}, found {:?}", MANIFEST_HEADER.join(","), cols.join(",")),
        });
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Manifest {
            row,
            message: e.to_string(),
        })?;
        let bad = |message: String| Error::Manifest { row, message };
        let id = rec.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(bad("empty id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(bad(format!("duplicate id \"{id}\"")));
        }
        let image = PathBuf::from(rec.get(1).unwrap_or(""));
        let score = match rec.get(2).unwrap_or("") {
            "" => None,
            s => {
                let v: f64 = s.parse().map_err(|_| bad(format!("unparseable score \"{s}\" for \"{id}\"")))?;
                validate_score(v).map_err(|e| bad(format!("{id}: {e}")))?;
                Some(v)
            }
        };
        let landmarks = match rec.get(3).unwrap_or("") {
            "" => None,
            s => Some(PathBuf::from(s)),
        };
        let split: Split = rec.get(4).unwrap_or("").parse().map_err(bad)?;
        for p in std::iter::once(&image).chain(landmarks.as_ref()) {
            let full = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
            if !full.exists() {
                return Err(bad(format!("{id}: file {} not found", full.display())));
            }
        }
        entries.push(ManifestEntry {
            id,
            image,
            score,
            landmarks,
            split,
        });
    }
    DatasetManifest::new(entries, base_dir)
}

/// Deterministically assigns `n` items to train/val/test in the given
/// proportions. The same `(n, fractions, seed)` always yields the same split.
pub fn assign_splits(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train.min(n));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in idx.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Where a standardizer's statistics came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitProvenance {
    pub split: Split,
    pub split_hash: String,
    pub n: usize,
}

/// Affine map from SvdH units to zero-mean, unit-SD targets. Uses the
/// population SD (divide by N).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStandardizer {
    pub mean: f64,
    pub sd: f64,
    #[serde(default)]
    pub provenance: Option<FitProvenance>,
}

pub fn fit_standardizer(scores: &[f64]) -> Result<ScoreStandardizer> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad}")));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 0.0 || sd <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::ZeroVariance("cannot standardize constant scores".into()));
    }
    Ok(ScoreStandardizer {
        mean,
        sd,
        provenance: None,
    })
}

impl ScoreStandardizer {
    /// Fits on the scored training entries of `manifest` and records which
    /// split it saw.
    pub fn fit_on_training(manifest: &DatasetManifest) -> Result<Self> {
        let scores: Vec<f64> = manifest.split(Split::Train).filter_map(|e| e.score).collect();
        let mut s = fit_standardizer(&scores)?;
        s.provenance = Some(FitProvenance {
            split: Split::Train,
            split_hash: manifest.split_hash(Split::Train),
            n: scores.len(),
        });
        Ok(s)
    }

    /// Fails unless this standardizer was fitted on exactly the training
    /// split of `manifest`.
    pub fn assert_fitted_on_training(&self, manifest: &DatasetManifest) -> Result<()> {
        match &self.provenance {
            Some(p) if p.split == Split::Train && p.split_hash == manifest.split_hash(Split::Train) => Ok(()),
            Some(p) => Err(Error::invalid(format!(
                "standardizer was fitted on split `{}` ({}), not this manifest's training split",
                p.split, p.split_hash
            ))),
            None => Err(Error::invalid("standardizer has no fit provenance")),
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.sd > 0.0 && self.sd.is_finite() && self.mean.is_finite()) {
            return Err(Error::invalid(format!("invalid standardizer (mean {}, sd {})", self.mean, self.sd)));
        }
        Ok(())
    }

    pub fn apply(&self, y: f64) -> Result<f64> {
        self.check()?;
        Ok((y - self.mean) / self.sd)
    }

    pub fn invert(&self, z: f64) -> Result<f64> {
        self.check()?;
        Ok(z * self.sd + self.mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::io::Write;

    fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(contents.as_bytes()).unwrap();
        p
    }

    fn touch_images(dir: &Path, names: &[&str]) {
        for n in names {
            GrayImage::zeros(4, 4, 255.0).save(&dir.join(n)).unwrap();
        }
    }

    #[test]
    fn loads_well_formed_manifest_in_order() {
        let dir = tempfile::tempdir().unwrap();
        touch_images(dir.path(), &["a.png", "b.png", "c.png"]);
        let p = write(
            dir.path(),
            "m.csv",
            "id,image,score,landmarks,split\nimg1,a.png,3.5,,train\nimg2,b.png,70,,val\nimg3,c.png,,,test\n",
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[0].id, "img1");
        assert_eq!(m.entries[1].score, Some(70.0));
        assert_eq!(m.entries[2].score, None);
        assert_eq!(m.entries[2].split, Split::Test);
        // loading is pure
        assert_eq!(load_manifest(&p).unwrap(), m);
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        touch_images(dir.path(), &["a.png"]);
        let p = write(
            dir.path(),
            "m.csv",
            "id,image,score,landmarks,split\nimg7,a.png,1,,train\nimg7,a.png,2,,train\n",
        );
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("img7"), "{err}");
        assert!(err.contains("row 3"), "{err}");
    }

    #[test]
    fn negative_score_rejected() {
        let dir = tempfile::tempdir().unwrap();
        touch_images(dir.path(), &["a.png"]);
        let p = write(dir.path(), "m.csv", "id,image,score,landmarks,split\nx,a.png,-1,,train\n");
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { row: 2, .. })));
    }

    #[test]
    fn other_manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        touch_images(dir.path(), &["a.png"]);
        let bad_split = write(dir.path(), "s.csv", "id,image,score,landmarks,split\nx,a.png,1,,holdout\n");
        assert!(load_manifest(&bad_split).unwrap_err().to_string().contains("holdout"));
        let bad_score = write(dir.path(), "t.csv", "id,image,score,landmarks,split\nx,a.png,abc,,train\n");
        assert!(load_manifest(&bad_score).unwrap_err().to_string().contains("unparseable"));
        let missing = write(dir.path(), "u.csv", "id,image,score,landmarks,split\nx,nope.png,1,,train\n");
        assert!(load_manifest(&missing).unwrap_err().to_string().contains("not found"));
        assert!(matches!(load_manifest(&dir.path().join("absent.csv")), Err(Error::Io { .. })));
    }

    #[test]
    fn two_point_standardizer() {
        let s = fit_standardizer(&[0.0, 10.0]).unwrap();
        assert_eq!((s.mean, s.sd), (5.0, 5.0));
        assert_eq!(s.apply(10.0).unwrap(), 1.0);
        assert_eq!(s.invert(0.0).unwrap(), 5.0);
    }

    #[test]
    fn degenerate_standardizer_inputs() {
        assert!(matches!(fit_standardizer(&[7.0, 7.0, 7.0]), Err(Error::ZeroVariance(_))));
        assert!(matches!(fit_standardizer(&[]), Err(Error::Empty(_))));
        let bad = ScoreStandardizer {
            mean: 0.0,
            sd: 0.0,
            provenance: None,
        };
        assert!(bad.apply(1.0).is_err());
    }

    #[test]
    fn standardized_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..200.0)).collect();
        let s = fit_standardizer(&scores).unwrap();
        let z: Vec<f64> = scores.iter().map(|&y| s.apply(y).unwrap()).collect();
        let m = z.iter().sum::<f64>() / 100.0;
        let sd = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 100.0).sqrt();
        assert!(m.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn standardizer_round_trip(mean in -100.0f64..300.0, sd in 0.01f64..100.0, y in -1e4f64..1e4) {
            let s = ScoreStandardizer { mean, sd, provenance: None };
            let back = s.invert(s.apply(y).unwrap()).unwrap();
            prop_assert!((back - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn splits_are_stable_and_sized() {
        let a = assign_splits(100, 0.7, 0.2, 5);
        assert_eq!(a, assign_splits(100, 0.7, 0.2, 5));
        assert_eq!(a.iter().filter(|s| **s == Split::Train).count(), 70);
        assert_eq!(a.iter().filter(|s| **s == Split::Val).count(), 20);
        assert_ne!(a, assign_splits(100, 0.7, 0.2, 6));
    }

    #[test]
    fn provenance_guards_against_foreign_splits() {
        let mk = |id: &str, s: f64, split| ManifestEntry {
            id: id.into(),
            image: "x.png".into(),
            score: Some(s),
            landmarks: None,
            split,
        };
        let m = DatasetManifest::new(
            vec![mk("a", 1.0, Split::Train), mk("b", 9.0, Split::Train), mk("c", 50.0, Split::Test)],
            ".",
        )
        .unwrap();
        let s = ScoreStandardizer::fit_on_training(&m).unwrap();
        assert_eq!(s.mean, 5.0);
        s.assert_fitted_on_training(&m).unwrap();
        let other = DatasetManifest::new(vec![mk("a", 1.0, Split::Train), mk("c", 50.0, Split::Train)], ".").unwrap();
        assert!(s.assert_fitted_on_training(&other).is_err());
        assert!(fit_standardizer(&[1.0, 9.0]).unwrap().assert_fitted_on_training(&m).is_err());
    }
}
