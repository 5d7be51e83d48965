//! Run orchestration for both bag construction schemes: configuration,
//! patch-classifier development, cached augmented feature views, attention
//! MIL training (frozen or fine-tuned extractor), scoring and ensembling.
//!
//! A run directory holds `config-snapshot.toml`, `seed`, `history.csv`,
//! `pc_history.csv`, `checkpoints/` and `reports/`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abmil::{
    evaluate_bags, train_abmil, AbmilConfig, AbmilEpoch, AbmilGrads, AbmilModel, AbmilSgd, AbmilTrainResult, FeatureScaling,
};
use crate::augment::{self, AugmentationPolicy};
use crate::bag::{FeatureBag, PatchBag, PatchTag, Scheme};
use crate::classifier::{train_patch_classifier, FeatureExtractor, LabeledPatch, PatchClassifier, PcEpoch, PcTrainConfig};
use crate::data::{load_manifest, DatasetManifest, Radiograph, ScoreStandardizer, Split};
use crate::error::{Error, Result};
use crate::evaluation::RegressionReport;
use crate::foreground::{generate_mask, ForegroundMask, MaskConfig};
use crate::image::GrayImage;
use crate::joints::model::LandmarkModel;
use crate::joints::{align_to_standard, crop_joint_patches, image_pixel_spacing, perturb_landmarks, JointPatchSpec, LandmarkSet};
use crate::joints::NUM_LANDMARKS;
use crate::nn::{softmax, Module, Optimizer, Sgd};
use crate::tiling::{label_background_tiles, partition_tiles, rank_and_sample, weak_label_image, WeakLabel};

pub const CONFIG_SNAPSHOT: &str = "config-snapshot.toml";
pub const SEED_FILE: &str = "seed";
pub const HISTORY: &str = "history.csv";
pub const PC_HISTORY: &str = "pc_history.csv";
pub const CHECKPOINTS: &str = "checkpoints";
pub const REPORTS: &str = "reports";
pub const PC_BEST: &str = "pc_best.json";
pub const EXTRACTOR: &str = "extractor.json";
pub const ABMIL_BEST: &str = "abmil_best.json";
pub const ABMIL_FINAL: &str = "abmil_final.json";
pub const ABMIL_LAST_GOOD: &str = "abmil_last_good.json";
pub const STANDARDIZER: &str = "standardizer.json";
pub const LANDMARK_MODEL: &str = "landmarks.json";

pub const ALLOWED_K: [usize; 3] = [30, 40, 50];
pub const ALLOWED_BATCH: [usize; 2] = [4, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointsConfig {
    /// Side of the resized joint patches fed to the extractor.
    pub patch_size: usize,
    /// SD (mm) of the landmark noise used when cropping training images.
    pub noise_sd_mm: f64,
    /// Per-landmark noise SDs, one value per line; overrides `noise_sd_mm`.
    pub noise_sd_file: Option<PathBuf>,
    /// Joint patch table; the built-in table when absent.
    pub spec: Option<PathBuf>,
}

impl Default for JointsConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            noise_sd_mm: 2.0,
            noise_sd_file: None,
            spec: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: u8,
    /// Bag size for tiling; joint bags always hold 50 patches.
    pub k: usize,
    pub seed: u64,
    /// Augmented feature views cached per training image.
    pub views: usize,
    /// Train the extractor jointly with the attention model.
    pub fine_tune_extractor: bool,
    /// Learning rate of the extractor when fine-tuning.
    pub fine_tune_lr: f32,
    /// Cap on patches per class in the classifier development set.
    pub pc_max_per_class: usize,
    /// Fraction of weakly labelled training images held out for classifier
    /// model selection.
    pub pc_val_fraction: f64,
    pub pc: PcTrainConfig,
    pub abmil: AbmilConfig,
    pub mask: MaskConfig,
    pub joints: JointsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: 1,
            k: 30,
            seed: 0,
            views: 4,
            fine_tune_extractor: false,
            fine_tune_lr: 1e-4,
            pc_max_per_class: 1000,
            pc_val_fraction: 0.2,
            pc: PcTrainConfig::default(),
            abmil: AbmilConfig::default(),
            mask: MaskConfig::default(),
            joints: JointsConfig::default(),
        }
    }
}

fn config_error(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

/// Maps a TOML error onto the offending key where one can be recovered.
pub(crate) fn toml_error(e: &toml::de::Error) -> Error {
    let msg = e.message().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("unknown field") || msg.contains("missing field"))
        .map(str::to_string)
        .unwrap_or_else(|| "config".into());
    config_error(&key, msg)
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| toml_error(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn scheme(&self) -> Scheme {
        Scheme::from_number(self.scheme).expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let scheme = Scheme::from_number(self.scheme).ok_or_else(|| config_error("scheme", format!("{} is not 1 or 2", self.scheme)))?;
        if scheme == Scheme::Tiling && !ALLOWED_K.contains(&self.k) {
            return Err(config_error("k", format!("{} is not one of {ALLOWED_K:?}", self.k)));
        }
        if self.views == 0 {
            return Err(config_error("views", "must be positive"));
        }
        if !ALLOWED_BATCH.contains(&self.abmil.batch_size) {
            return Err(config_error("abmil.batch_size", format!("{} is not one of {ALLOWED_BATCH:?}", self.abmil.batch_size)));
        }
        if !(self.fine_tune_lr > 0.0 && self.fine_tune_lr.is_finite()) {
            return Err(config_error("fine_tune_lr", "must be positive"));
        }
        if self.pc_max_per_class == 0 {
            return Err(config_error("pc_max_per_class", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.pc_val_fraction) {
            return Err(config_error("pc_val_fraction", "must lie in [0, 1)"));
        }
        if self.joints.patch_size < 8 {
            return Err(config_error("joints.patch_size", "must be at least 8"));
        }
        if !(self.joints.noise_sd_mm >= 0.0 && self.joints.noise_sd_mm.is_finite()) {
            return Err(config_error("joints.noise_sd_mm", "must be nonnegative"));
        }
        self.pc.validate().map_err(|e| prefix_key(e, "pc"))?;
        self.abmil.validate().map_err(|e| prefix_key(e, "abmil"))?;
        Ok(())
    }

    fn joint_spec(&self) -> Result<JointPatchSpec> {
        match &self.joints.spec {
            Some(p) => JointPatchSpec::load(p),
            None => Ok(JointPatchSpec::default()),
        }
    }

    fn noise_sds(&self) -> Result<Vec<f64>> {
        match &self.joints.noise_sd_file {
            Some(p) => read_noise_sds(p),
            None => Ok(vec![self.joints.noise_sd_mm; NUM_LANDMARKS]),
        }
    }
}

fn prefix_key(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { key, message } => Error::Config {
            key: format!("{prefix}.{key}"),
            message,
        },
        other => other,
    }
}

/// One SD per line, as written by [`write_noise_sds`].
pub fn read_noise_sds(path: &Path) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>().map_err(|e| config_error("joints.noise_sd_file", format!("{l:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if v.len() != NUM_LANDMARKS {
        return Err(config_error("joints.noise_sd_file", format!("expected {NUM_LANDMARKS} values, found {}", v.len())));
    }
    Ok(v)
}

pub fn write_noise_sds(path: &Path, sds: &[f64]) -> Result<()> {
    let text: String = sds.iter().map(|v| format!("{v}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A manifest with its images loaded, in manifest order.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub items: Vec<Radiograph>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        if !manifest_path.exists() {
            return Err(Error::MissingArtifact(manifest_path.to_path_buf()));
        }
        Self::from_manifest(load_manifest(manifest_path)?)
    }

    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        let items = manifest.entries.iter().map(|e| manifest.load_radiograph(e)).collect::<Result<_>>()?;
        Ok(Self { manifest, items })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.manifest.entries[i].split == split).collect()
    }
}

/// Where joint-scheme landmarks come from.
pub enum LandmarkSource<'a> {
    /// Reference landmarks stored with each radiograph.
    Reference,
    Model(&'a LandmarkModel),
}

impl LandmarkSource<'_> {
    fn locate(&self, r: &Radiograph, img: &GrayImage, transformed: Option<&LandmarkSet>) -> Result<LandmarkSet> {
        match self {
            LandmarkSource::Model(m) => m.predict(img),
            LandmarkSource::Reference => transformed
                .cloned()
                .or_else(|| r.landmarks.clone())
                .ok_or_else(|| Error::invalid(format!("{} has no reference landmarks", r.id))),
        }
    }
}

fn row_probs(logits: &Array2<f32>) -> Vec<Vec<f64>> {
    softmax(logits)
        .rows()
        .into_iter()
        .map(|r| {
            let s: f64 = r.iter().map(|&v| v as f64).sum();
            r.iter().map(|&v| v as f64 / s).collect()
        })
        .collect()
}

/// Builds bags for one scheme from a trained classifier and, optionally, a
/// separately tuned extractor.
pub struct BagBuilder {
    pub scheme: Scheme,
    pub k: usize,
    pub classifier: PatchClassifier,
    pub extractor: Option<FeatureExtractor>,
    pub joint_spec: JointPatchSpec,
    pub patch_size: usize,
}

impl BagBuilder {
    /// Tiles, classifies, ranks and samples `k` tiles.
    pub fn tile_patch_bag(&self, id: &str, img: &GrayImage) -> Result<(PatchBag, Array2<f32>)> {
        let mut tiles = partition_tiles(img)?;
        let refs: Vec<&Array2<f32>> = tiles.iter().map(|t| &t.pixels).collect();
        let feats = self.classifier.features(&refs);
        let probs = row_probs(&self.classifier.head_logits(&feats));
        for (t, p) in tiles.iter_mut().zip(probs) {
            t.set_probs([p[0], p[1], p[2]])?;
        }
        let bag = rank_and_sample(id, &tiles, self.k, (img.height(), img.width()))?;
        let pos: Vec<usize> = bag
            .patches
            .iter()
            .map(|p| match p.provenance.tag {
                PatchTag::Tile { index, .. } => tiles.iter().position(|t| t.index == index).expect("sampled tile exists"),
                PatchTag::Joint { .. } => unreachable!("tile bags hold tiles"),
            })
            .collect();
        Ok((bag, feats.select(Axis(0), &pos)))
    }

    /// Aligns both hands and crops 50 joint patches.
    pub fn joint_patch_bag(&self, id: &str, img: &GrayImage, lms: &LandmarkSet) -> Result<PatchBag> {
        let spacing = image_pixel_spacing(lms)?;
        let alignment = align_to_standard(lms)?;
        crop_joint_patches(id, img, &alignment, &self.joint_spec, spacing, self.patch_size)
    }

    fn features(&self, bag: &PatchBag, cached: Option<Array2<f32>>, score: Option<f64>) -> Result<FeatureBag> {
        match (&self.extractor, cached) {
            (None, Some(f)) => FeatureBag::new(bag.source_id.clone(), f.mapv(|v| v as f64), score).with_provenance(bag.provenance()),
            (Some(fe), _) => fe.extract_features(bag, score),
            (None, None) => {
                let refs: Vec<&Array2<f32>> = bag.patches.iter().map(|p| &p.pixels).collect();
                let f = self.classifier.features(&refs).mapv(|v| v as f64);
                FeatureBag::new(bag.source_id.clone(), f, score).with_provenance(bag.provenance())
            }
        }
    }

    pub fn patch_bag(&self, id: &str, img: &GrayImage, lms: Option<&LandmarkSet>) -> Result<(PatchBag, Option<Array2<f32>>)> {
        match self.scheme {
            Scheme::Tiling => {
                let (b, f) = self.tile_patch_bag(id, img)?;
                Ok((b, Some(f)))
            }
            Scheme::Joints => {
                let lms = lms.ok_or_else(|| Error::invalid(format!("{id}: joint bags need landmarks")))?;
                Ok((self.joint_patch_bag(id, img, lms)?, None))
            }
        }
    }

    pub fn feature_bag(&self, id: &str, img: &GrayImage, lms: Option<&LandmarkSet>, score: Option<f64>) -> Result<FeatureBag> {
        let (bag, cached) = self.patch_bag(id, img, lms)?;
        self.features(&bag, cached, score)
    }

    pub fn extractor_id(&self) -> String {
        match &self.extractor {
            Some(fe) => fe.id(),
            None => self.classifier.truncate().id(),
        }
    }
}

/// Weakly labelled classifier development patches. Tiling uses three
/// classes with the background override; joints use normal/abnormal.
pub fn development_patches(
    scheme: Scheme,
    items: &[(&Radiograph, Option<&ForegroundMask>, Option<&LandmarkSet>)],
    builder: &BagBuilder,
) -> Result<Vec<LabeledPatch>> {
    let mut out = Vec::new();
    for (r, mask, lms) in items {
        let Some(score) = r.score else { continue };
        let label = weak_label_image(score)?;
        if label == WeakLabel::Unlabeled {
            continue;
        }
        match scheme {
            Scheme::Tiling => {
                let mask = mask.ok_or_else(|| Error::invalid(format!("{}: tiling labels need a foreground mask", r.id)))?;
                let mut tiles = partition_tiles(&r.image)?;
                label_background_tiles(&mut tiles, mask)?;
                for t in tiles {
                    let class = t.label(label).class().expect("labelled image");
                    out.push(LabeledPatch { pixels: t.pixels, label: class });
                }
            }
            Scheme::Joints => {
                let lms = lms.ok_or_else(|| Error::invalid(format!("{}: joint patches need landmarks", r.id)))?;
                let bag = builder.joint_patch_bag(&r.id, &r.image, lms)?;
                let class = label.class().expect("labelled image");
                out.extend(bag.patches.into_iter().map(|p| LabeledPatch { pixels: p.pixels, label: class }));
            }
        }
    }
    Ok(out)
}

/// Subsamples every class to at most `min(smallest class, cap)` patches.
pub fn balance_classes(patches: Vec<LabeledPatch>, num_classes: usize, cap: usize, rng: &mut impl Rng) -> Vec<LabeledPatch> {
    let mut by_class: Vec<Vec<LabeledPatch>> = (0..num_classes).map(|_| Vec::new()).collect();
    for p in patches {
        by_class[p.label].push(p);
    }
    let n = by_class.iter().filter(|c| !c.is_empty()).map(Vec::len).min().unwrap_or(0).min(cap);
    let mut out = Vec::with_capacity(n * num_classes);
    for mut c in by_class {
        c.shuffle(rng);
        c.truncate(n);
        out.extend(c);
    }
    out.shuffle(rng);
    out
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Serde(format!("{}: {e}", path.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

/// Appends attention-MIL epochs to `history.csv`, flushing each row.
struct HistoryLog {
    path: PathBuf,
    w: csv::Writer<fs::File>,
}

impl HistoryLog {
    fn create(path: &Path) -> Result<Self> {
        let mut w = csv_writer(path)?;
        w.write_record(["epoch", "train_loss", "val_loss", "val_rmse"]).map_err(|e| csv_err(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), w })
    }

    fn push(&mut self, e: &AbmilEpoch) -> Result<()> {
        self.w
            .write_record([e.epoch.to_string(), format!("{:.9}", e.train_loss), fmt_opt(e.val_loss), fmt_opt(e.val_rmse)])
            .map_err(|err| csv_err(&self.path, err))?;
        self.w.flush().map_err(|err| Error::io(&self.path, err))
    }
}

fn write_pc_history(path: &Path, h: &[PcEpoch]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]).map_err(|e| csv_err(path, e))?;
    for e in h {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.9}", e.train_loss),
            format!("{:.6}", e.train_acc),
            fmt_opt(e.val_loss),
            fmt_opt(e.val_acc),
        ])
        .map_err(|err| csv_err(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Creates the run directory layout and writes the config snapshot and seed.
pub fn init_run_dir(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    for sub in [CHECKPOINTS, REPORTS] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let snap = dir.join(CONFIG_SNAPSHOT);
    fs::write(&snap, cfg.to_toml()).map_err(|e| Error::io(&snap, e))?;
    let seed = dir.join(SEED_FILE);
    fs::write(&seed, format!("{}\n", cfg.seed)).map_err(|e| Error::io(&seed, e))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

/// Masks for the given items, computed from the images.
pub fn compute_masks(items: &[&Radiograph], cfg: &MaskConfig) -> Result<Vec<ForegroundMask>> {
    items.iter().map(|r| generate_mask(&r.id, &r.image, cfg)).collect()
}

/// Trains the patch classifier used for ranking (tiling) or as the joint
/// feature extractor, on weakly labelled training images only.
pub fn develop_classifier(
    data: &Dataset,
    cfg: &TrainConfig,
    masks: Option<&[ForegroundMask]>,
    run_dir: Option<&Path>,
) -> Result<(PatchClassifier, Vec<PcEpoch>)> {
    let scheme = cfg.scheme();
    let train_idx = data.indices(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9c);
    let owned_masks;
    let masks = match (scheme, masks) {
        (Scheme::Tiling, Some(m)) => Some(m),
        (Scheme::Tiling, None) => {
            let items: Vec<&Radiograph> = data.items.iter().collect();
            owned_masks = compute_masks(&items, &cfg.mask)?;
            Some(&owned_masks[..])
        }
        (Scheme::Joints, _) => None,
    };
    let num_classes = match scheme {
        Scheme::Tiling => 3,
        Scheme::Joints => 2,
    };
    let builder = BagBuilder {
        scheme,
        k: cfg.k,
        classifier: PatchClassifier::new(cfg.pc.backbone, num_classes, cfg.pc.input_size, &mut rng)?,
        extractor: None,
        joint_spec: cfg.joint_spec()?,
        patch_size: cfg.joints.patch_size,
    };
    // hold out images per weak label so both parts see every label
    let (mut val_imgs, mut train_imgs) = (Vec::new(), Vec::new());
    for wanted in [WeakLabel::Normal, WeakLabel::Abnormal] {
        let mut group: Vec<usize> = train_idx
            .iter()
            .copied()
            .filter(|&i| data.items[i].score.and_then(|s| weak_label_image(s).ok()) == Some(wanted))
            .collect();
        group.shuffle(&mut rng);
        let n_val = (group.len() as f64 * cfg.pc_val_fraction).round() as usize;
        val_imgs.extend_from_slice(&group[..n_val]);
        train_imgs.extend_from_slice(&group[n_val..]);
    }
    let collect = |idx: &[usize]| -> Result<Vec<LabeledPatch>> {
        let items: Vec<_> = idx
            .iter()
            .map(|&i| (&data.items[i], masks.map(|m| &m[i]), data.items[i].landmarks.as_ref()))
            .collect();
        development_patches(scheme, &items, &builder)
    };
    let train = balance_classes(collect(&train_imgs)?, num_classes, cfg.pc_max_per_class, &mut rng);
    let val = balance_classes(collect(&val_imgs)?, num_classes, cfg.pc_max_per_class, &mut rng);
    log::info!("classifier development set: {} train / {} val patches", train.len(), val.len());
    let max_value = data.items.first().map(|r| r.image.max_value()).unwrap_or(255.0);
    let mut pc_cfg = cfg.pc.clone();
    pc_cfg.seed = cfg.seed;
    let ck_dir = run_dir.map(|d| d.join(CHECKPOINTS));
    let res = train_patch_classifier(num_classes, &train, &val, max_value, &pc_cfg, ck_dir.as_deref())?;
    if let Some(d) = run_dir {
        write_pc_history(&d.join(PC_HISTORY), &res.history)?;
    }
    if res.still_improving {
        log::warn!("patch classifier loss was still decreasing at the final epoch");
    }
    Ok((res.best, res.history))
}

/// Augmented training views (one inner list per image) and unaugmented
/// bags for the other splits. Tiling augments whole images and then tiles;
/// joints augment whole images, locate (and, for training, perturb)
/// landmarks, align and crop.
pub struct BagSet {
    pub train: Vec<Vec<PatchBag>>,
    pub train_features: Vec<Vec<FeatureBag>>,
    pub val: Vec<FeatureBag>,
    pub val_patches: Vec<PatchBag>,
    pub test: Vec<FeatureBag>,
}

pub fn build_bags(
    data: &Dataset,
    cfg: &TrainConfig,
    builder: &BagBuilder,
    landmarks: &LandmarkSource,
    keep_patches: bool,
) -> Result<BagSet> {
    let scheme = cfg.scheme();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa9);
    let policy = match scheme {
        Scheme::Tiling => AugmentationPolicy::shared(),
        Scheme::Joints => AugmentationPolicy::joint_scheme(),
    };
    let sds = if scheme == Scheme::Joints { cfg.noise_sds()? } else { Vec::new() };
    let mut out = BagSet {
        train: Vec::new(),
        train_features: Vec::new(),
        val: Vec::new(),
        val_patches: Vec::new(),
        test: Vec::new(),
    };
    for i in data.indices(Split::Train) {
        let r = &data.items[i];
        let mut views = Vec::with_capacity(cfg.views);
        let mut feats = Vec::with_capacity(cfg.views);
        for _ in 0..cfg.views {
            let ref_lms = if scheme == Scheme::Joints { r.landmarks.as_ref() } else { None };
            let a = augment::augment(&r.image, ref_lms, None, &policy, &mut rng)?;
            let lms = if scheme == Scheme::Joints {
                let located = landmarks.locate(r, &a.image, a.landmarks.as_ref())?;
                let spacing = image_pixel_spacing(&located)?;
                Some(perturb_landmarks(&located, &sds, spacing, &mut rng)?)
            } else {
                None
            };
            let (bag, cached) = builder.patch_bag(&r.id, &a.image, lms.as_ref())?;
            feats.push(builder.features(&bag, cached, r.score)?);
            if keep_patches {
                views.push(bag);
            }
        }
        out.train.push(views);
        out.train_features.push(feats);
    }
    for split in [Split::Val, Split::Test] {
        for i in data.indices(split) {
            let r = &data.items[i];
            let lms = if scheme == Scheme::Joints { Some(landmarks.locate(r, &r.image, None)?) } else { None };
            let (bag, cached) = builder.patch_bag(&r.id, &r.image, lms.as_ref())?;
            let fb = builder.features(&bag, cached, r.score)?;
            match split {
                Split::Val => {
                    out.val.push(fb);
                    if keep_patches {
                        out.val_patches.push(bag);
                    }
                }
                _ => out.test.push(fb),
            }
        }
    }
    Ok(out)
}

/// Joint training of extractor and attention model on cached patch views.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    extractor: &mut FeatureExtractor,
    train: &[Vec<PatchBag>],
    scores: &[f64],
    val: &[PatchBag],
    val_scores: &[f64],
    standardizer: &ScoreStandardizer,
    cfg: &AbmilConfig,
    extractor_lr: f32,
    last_good: Option<&Path>,
    on_epoch: &mut dyn FnMut(&AbmilEpoch),
) -> Result<AbmilTrainResult> {
    cfg.validate()?;
    if train.is_empty() || train.iter().any(|v| v.is_empty()) || train.len() != scores.len() {
        return Err(Error::Empty("training bags"));
    }
    let embed_all = |fe: &FeatureExtractor, bags: &[PatchBag], ys: &[f64]| -> Result<Vec<FeatureBag>> {
        bags.iter().zip(ys).map(|(b, &y)| fe.extract_features(b, Some(y))).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = AbmilModel::new(extractor.dim(), cfg.hidden, cfg.dropout, &mut rng)?;
    if cfg.normalize_features {
        let first: Vec<FeatureBag> = train.iter().zip(scores).map(|(v, &y)| extractor.extract_features(&v[0], Some(y))).collect::<Result<_>>()?;
        model.scaling = Some(FeatureScaling::fit(first.iter())?);
    }
    model.standardizer = Some(standardizer.clone());
    let targets: Vec<f64> = scores.iter().map(|&y| standardizer.apply(y)).collect::<Result<_>>()?;
    let mut opt = AbmilSgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut fe_opt = Sgd::new(extractor_lr, cfg.momentum as f32, cfg.weight_decay as f32);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, AbmilModel, FeatureExtractor)> = None;
    for epoch in 0..cfg.epochs {
        let good = model.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = AbmilGrads::zeros(&model);
            extractor.network_mut().zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let bag = &train[i][rng.random_range(0..train[i].len())];
                let refs: Vec<&Array2<f32>> = bag.patches.iter().map(|p| &p.pixels).collect();
                let h = extractor.forward_train(&refs).mapv(|v| v as f64);
                let mask = model.dropout_mask(&mut rng);
                let tr = model.trace(&h.view(), mask)?;
                let err = tr.prediction - targets[i];
                loss_sum += err * err;
                let (g, dh) = model.backward(&tr, 2.0 * err * scale);
                acc.add_assign(&g);
                extractor.backward(&dh.mapv(|v| v as f32));
            }
            opt.step(&mut model, &acc);
            fe_opt.step(extractor.network_mut());
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() || !model.is_finite() {
            if let Some(p) = last_good {
                good.save(p)?;
            }
            return Err(Error::NonFinite(format!("fine-tuning loss {train_loss} at epoch {epoch}")));
        }
        model.extractor_id = extractor.id();
        let (val_loss, val_rmse) = if val.is_empty() {
            (None, None)
        } else {
            let (l, r) = evaluate_bags(&model, &embed_all(extractor, val, val_scores)?, standardizer)?;
            (Some(l), Some(r))
        };
        let rec = AbmilEpoch {
            epoch,
            train_loss,
            val_loss,
            val_rmse,
        };
        on_epoch(&rec);
        let key = val_loss.unwrap_or(-(epoch as f64));
        if best.as_ref().is_none_or(|(_, k, _, _)| key < *k) {
            best = Some((epoch, key, model.clone(), extractor.clone()));
        }
        history.push(rec);
    }
    let (best_epoch, _, best_model, best_fe) = best.expect("at least one epoch");
    *extractor = best_fe;
    Ok(AbmilTrainResult {
        best: best_model,
        last: model,
        best_epoch,
        history,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub scheme: u8,
    pub best_epoch: usize,
    pub val_rmse: Option<f64>,
    pub test: Option<RegressionReport>,
}

pub const RUN_SUMMARY: &str = "summary.json";

/// Trains a full run: standardizer, classifier, bags, attention model,
/// checkpoints and reports. `classifier` reuses an already trained patch
/// classifier instead of developing one.
pub fn train_run(
    data: &Dataset,
    cfg: &TrainConfig,
    run_dir: &Path,
    landmarks: &LandmarkSource,
    classifier: Option<PatchClassifier>,
) -> Result<RunSummary> {
    cfg.validate()?;
    init_run_dir(run_dir, cfg)?;
    let ck = run_dir.join(CHECKPOINTS);
    let standardizer = ScoreStandardizer::fit_on_training(&data.manifest)?;
    standardizer.assert_fitted_on_training(&data.manifest)?;
    save_json(&ck.join(STANDARDIZER), &standardizer)?;

    let classifier = match classifier {
        Some(c) => c,
        None => develop_classifier(data, cfg, None, Some(run_dir))?.0,
    };
    classifier.save(&ck.join(PC_BEST))?;
    let mut builder = BagBuilder {
        scheme: cfg.scheme(),
        k: cfg.k,
        classifier,
        extractor: None,
        joint_spec: cfg.joint_spec()?,
        patch_size: cfg.joints.patch_size,
    };
    let bags = build_bags(data, cfg, &builder, landmarks, cfg.fine_tune_extractor)?;
    let mut abmil_cfg = cfg.abmil.clone();
    abmil_cfg.seed = cfg.seed;
    let mut log = HistoryLog::create(&run_dir.join(HISTORY))?;
    let mut log_err = None;
    let mut on_epoch = |e: &AbmilEpoch| {
        log::info!("epoch {}: train {:.5} val {:?} rmse {:?}", e.epoch, e.train_loss, e.val_loss, e.val_rmse);
        if let Err(err) = log.push(e) {
            log_err.get_or_insert(err);
        }
    };
    let last_good = ck.join(ABMIL_LAST_GOOD);
    let result = if cfg.fine_tune_extractor {
        let mut fe = builder.classifier.truncate();
        let scores: Vec<f64> = bags.train_features.iter().map(|v| v[0].score.expect("scored")).collect();
        let val_scores: Vec<f64> = bags.val.iter().map(|b| b.score.expect("scored")).collect();
        let res = fine_tune(
            &mut fe,
            &bags.train,
            &scores,
            &bags.val_patches,
            &val_scores,
            &standardizer,
            &abmil_cfg,
            cfg.fine_tune_lr,
            Some(&last_good),
            &mut on_epoch,
        )?;
        fe.save(&ck.join(EXTRACTOR))?;
        builder.extractor = Some(fe);
        res
    } else {
        builder.classifier.truncate().save(&ck.join(EXTRACTOR))?;
        let id = builder.extractor_id();
        train_abmil(&bags.train_features, &bags.val, &standardizer, &id, &abmil_cfg, Some(&last_good), &mut on_epoch)?
    };
    if let Some(e) = log_err {
        return Err(e);
    }
    result.best.save(&ck.join(ABMIL_BEST))?;
    result.last.save(&ck.join(ABMIL_FINAL))?;

    let val_rmse = result.history[result.best_epoch].val_rmse;
    let test = if bags.test.is_empty() {
        None
    } else {
        // fine-tuned extractors change the features, so rebuild test bags
        let test_bags = if cfg.fine_tune_extractor {
            rebuild(data, Split::Test, &builder, landmarks)?
        } else {
            bags.test
        };
        let mut rep = report(&result.best, &test_bags)?;
        rep.write_scatter(&run_dir.join(REPORTS).join("test_scatter.png"))?;
        rep.save_json(&run_dir.join(REPORTS).join("test_report.json"))?;
        Some(rep)
    };
    let summary = RunSummary {
        dir: run_dir.to_path_buf(),
        scheme: cfg.scheme,
        best_epoch: result.best_epoch,
        val_rmse,
        test,
    };
    save_json(&run_dir.join(RUN_SUMMARY), &summary)?;
    Ok(summary)
}

fn rebuild(data: &Dataset, split: Split, builder: &BagBuilder, landmarks: &LandmarkSource) -> Result<Vec<FeatureBag>> {
    data.indices(split)
        .into_iter()
        .map(|i| {
            let r = &data.items[i];
            let lms = match builder.scheme {
                Scheme::Joints => Some(landmarks.locate(r, &r.image, None)?),
                Scheme::Tiling => None,
            };
            builder.feature_bag(&r.id, &r.image, lms.as_ref(), r.score)
        })
        .collect()
}

/// Regression report of `model` over scored bags.
pub fn report(model: &AbmilModel, bags: &[FeatureBag]) -> Result<RegressionReport> {
    let ids: Vec<String> = bags.iter().map(|b| b.source_id.clone()).collect();
    let pred: Vec<f64> = bags.iter().map(|b| model.predict_score(b)).collect::<Result<_>>()?;
    let truth: Vec<f64> = bags
        .iter()
        .map(|b| b.score.ok_or_else(|| Error::invalid(format!("bag {} has no score", b.source_id))))
        .collect::<Result<_>>()?;
    RegressionReport::new(&ids, &pred, &truth)
}

/// Everything needed to score new radiographs with one trained run.
pub struct ScoringPipeline {
    pub config: TrainConfig,
    pub builder: BagBuilder,
    pub model: AbmilModel,
    pub standardizer: ScoreStandardizer,
    pub landmark_model: Option<LandmarkModel>,
}

impl ScoringPipeline {
    /// Loads a run directory. Joint runs also need a landmark checkpoint
    /// unless every radiograph carries reference landmarks.
    pub fn load(run_dir: &Path, landmark_checkpoint: Option<&Path>) -> Result<Self> {
        let config = TrainConfig::load(&run_dir.join(CONFIG_SNAPSHOT))?;
        let ck = run_dir.join(CHECKPOINTS);
        let classifier = PatchClassifier::load(&ck.join(PC_BEST))?;
        let extractor = FeatureExtractor::load(&ck.join(EXTRACTOR))?;
        let model = AbmilModel::load(&ck.join(ABMIL_BEST))?;
        let standardizer: ScoreStandardizer = load_json(&ck.join(STANDARDIZER))?;
        let landmark_model = landmark_checkpoint.map(LandmarkModel::load).transpose()?;
        let extractor = if extractor.id() == classifier.truncate().id() { None } else { Some(extractor) };
        let builder = BagBuilder {
            scheme: config.scheme(),
            k: config.k,
            classifier,
            extractor,
            joint_spec: config.joint_spec()?,
            patch_size: config.joints.patch_size,
        };
        if model.extractor_id != builder.extractor_id() {
            return Err(Error::invalid(format!(
                "attention model expects extractor {}, run provides {}",
                model.extractor_id,
                builder.extractor_id()
            )));
        }
        Ok(Self {
            config,
            builder,
            model,
            standardizer,
            landmark_model,
        })
    }

    pub fn bag(&self, r: &Radiograph) -> Result<FeatureBag> {
        let lms = match (self.builder.scheme, &self.landmark_model) {
            (Scheme::Tiling, _) => None,
            (Scheme::Joints, Some(m)) => Some(m.predict(&r.image)?),
            (Scheme::Joints, None) => Some(
                r.landmarks
                    .clone()
                    .ok_or_else(|| Error::MissingArtifact(PathBuf::from(LANDMARK_MODEL)))?,
            ),
        };
        self.builder.feature_bag(&r.id, &r.image, lms.as_ref(), r.score)
    }

    pub fn score(&self, r: &Radiograph) -> Result<f64> {
        self.model.predict_score(&self.bag(r)?)
    }
}

/// Ensemble members chosen per scheme by validation RMSE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<PathBuf>,
}

/// Picks the run with the lowest validation RMSE for each scheme. Runs
/// without validation data rank last.
pub fn select_and_ensemble(runs: &[RunSummary]) -> Result<EnsembleSpec> {
    if runs.is_empty() {
        return Err(Error::Empty("runs"));
    }
    let mut members = Vec::new();
    for scheme in [1u8, 2] {
        let best = runs
            .iter()
            .filter(|r| r.scheme == scheme)
            .min_by(|a, b| a.val_rmse.unwrap_or(f64::INFINITY).total_cmp(&b.val_rmse.unwrap_or(f64::INFINITY)));
        if let Some(r) = best {
            members.push(r.dir.clone());
        }
    }
    Ok(EnsembleSpec { members })
}

/// Writes one `id,score` line per radiograph.
pub fn write_scores(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "id,score").map_err(|e| Error::io(path, e))?;
    for (id, s) in rows {
        writeln!(f, "{id},{s:.6}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::BackboneKind;
    use crate::data::assign_splits;
    use crate::synthetic::{generate_one, write_dataset, SyntheticSpec};

    #[test]
    fn config_round_trip_and_defaults() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&c.to_toml()).unwrap(), c);
        assert_eq!(c.abmil.lr, 0.001);
        assert_eq!(c.abmil.weight_decay, 0.001);
        assert_eq!(c.abmil.momentum, 0.9);
        assert_eq!(c.abmil.epochs, 100);
        assert_eq!(c.abmil.batch_size, 16);
    }

    #[test]
    fn config_errors_name_the_key() {
        let key = |t: &str| match TrainConfig::parse(t) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{:?}", other.map(|_| ())),
        };
        assert_eq!(key("k = 35"), "k");
        assert_eq!(key("scheme = 3"), "scheme");
        assert_eq!(key("bogus = 1"), "bogus");
        assert_eq!(key("[abmil]\nbatch_size = 8"), "abmil.batch_size");
        assert_eq!(key("[pc]\nepochs = 0"), "pc.epochs");
        assert_eq!(key("[abmil]\nlr = -1.0"), "abmil.lr");
        // joint bags have a fixed size; K is not checked
        assert!(TrainConfig::parse("scheme = 2\nk = 7").is_ok());
    }

    #[test]
    fn balancing_equalises_classes() {
        let mk = |label| LabeledPatch {
            pixels: Array2::zeros((2, 2)),
            label,
        };
        let patches: Vec<_> = (0..10).map(|_| mk(0)).chain((0..4).map(|_| mk(1))).chain((0..7).map(|_| mk(2))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = balance_classes(patches, 3, 100, &mut rng);
        assert_eq!(b.len(), 12);
        for c in 0..3 {
            assert_eq!(b.iter().filter(|p| p.label == c).count(), 4);
        }
    }

    #[test]
    fn ensemble_selection() {
        let run = |d: &str, s, v| RunSummary {
            dir: d.into(),
            scheme: s,
            best_epoch: 0,
            val_rmse: v,
            test: None,
        };
        let runs = [run("a", 1, Some(3.0)), run("b", 1, Some(2.0)), run("c", 2, None), run("d", 2, Some(9.0))];
        assert_eq!(select_and_ensemble(&runs).unwrap().members, vec![PathBuf::from("b"), PathBuf::from("d")]);
        assert!(select_and_ensemble(&[]).is_err());
    }

    #[test]
    fn noise_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sd.txt");
        let v: Vec<f64> = (0..NUM_LANDMARKS).map(|i| i as f64 * 0.1).collect();
        write_noise_sds(&p, &v).unwrap();
        assert_eq!(read_noise_sds(&p).unwrap(), v);
        write_noise_sds(&p, &v[..3]).unwrap();
        assert!(matches!(read_noise_sds(&p), Err(Error::Config { .. })));
    }

    pub(crate) fn small_dataset(dir: &Path, n: usize) -> Dataset {
        let spec = SyntheticSpec::default();
        let cases: Vec<_> = (0..n).map(|i| generate_one(&spec, i, Some(i % 9)).unwrap()).collect();
        let splits = assign_splits(n, 0.6, 0.2, 1);
        let w = write_dataset(&cases, &splits, dir).unwrap();
        Dataset::from_manifest(w.manifest).unwrap()
    }

    pub(crate) fn quick_config(scheme: u8) -> TrainConfig {
        let mut c = TrainConfig {
            scheme,
            views: 1,
            pc_max_per_class: 40,
            ..TrainConfig::default()
        };
        c.pc.backbone = BackboneKind::SmallConv { dim: 8 };
        c.pc.input_size = 16;
        c.pc.epochs = 2;
        c.abmil.epochs = 3;
        c.abmil.batch_size = 4;
        c.abmil.hidden = 16;
        c.joints.patch_size = 16;
        c
    }

    #[test]
    fn tiling_run_writes_layout_and_scores() {
        let dir = tempfile::tempdir().unwrap();
        let data = small_dataset(&dir.path().join("data"), 20);
        let run = dir.path().join("run");
        let cfg = quick_config(1);
        let s = train_run(&data, &cfg, &run, &LandmarkSource::Reference, None).unwrap();
        for f in [CONFIG_SNAPSHOT, SEED_FILE, HISTORY, PC_HISTORY, RUN_SUMMARY] {
            assert!(run.join(f).exists(), "{f}");
        }
        for f in [PC_BEST, EXTRACTOR, ABMIL_BEST, ABMIL_FINAL, STANDARDIZER] {
            assert!(run.join(CHECKPOINTS).join(f).exists(), "{f}");
        }
        let hist = fs::read_to_string(run.join(HISTORY)).unwrap();
        assert_eq!(hist.lines().count(), 1 + cfg.abmil.epochs);
        assert!(s.test.is_some());

        let p = ScoringPipeline::load(&run, None).unwrap();
        let r = &data.items[data.indices(Split::Test)[0]];
        let bag = p.bag(r).unwrap();
        assert_eq!(bag.k(), 30);
        let y = p.score(r).unwrap();
        assert!(y.is_finite());
        // checkpoint round trip reproduces the in-run test prediction
        let rep = s.test.unwrap();
        let res = rep.residuals.iter().find(|q| q.id == r.id).unwrap();
        assert!((res.pred - y).abs() < 1e-6);
    }

    #[test]
    fn joint_run_bags_hold_fifty_patches() {
        let dir = tempfile::tempdir().unwrap();
        let data = small_dataset(&dir.path().join("data"), 30);
        let run = dir.path().join("run");
        let cfg = quick_config(2);
        train_run(&data, &cfg, &run, &LandmarkSource::Reference, None).unwrap();
        let p = ScoringPipeline::load(&run, None).unwrap();
        for r in &data.items {
            assert_eq!(p.bag(r).unwrap().k(), 50);
        }
        let mut stripped = data.items[0].clone();
        stripped.landmarks = None;
        assert!(matches!(p.bag(&stripped), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn fine_tuning_changes_extractor_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = small_dataset(&dir.path().join("data"), 16);
        let run = dir.path().join("run");
        let mut cfg = quick_config(1);
        cfg.fine_tune_extractor = true;
        cfg.fine_tune_lr = 0.01;
        let s = train_run(&data, &cfg, &run, &LandmarkSource::Reference, None).unwrap();
        let p = ScoringPipeline::load(&run, None).unwrap();
        assert!(p.builder.extractor.is_some());
        let rep = s.test.unwrap();
        for q in &rep.residuals {
            let r = data.items.iter().find(|r| r.id == q.id).unwrap();
            assert!((p.score(r).unwrap() - q.pred).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_seeds_give_identical_history() {
        let dir = tempfile::tempdir().unwrap();
        let data = small_dataset(&dir.path().join("data"), 14);
        let cfg = quick_config(1);
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        train_run(&data, &cfg, &a, &LandmarkSource::Reference, None).unwrap();
        train_run(&data, &cfg, &b, &LandmarkSource::Reference, None).unwrap();
        assert_eq!(fs::read(a.join(HISTORY)).unwrap(), fs::read(b.join(HISTORY)).unwrap());
        assert_eq!(fs::read(a.join(CONFIG_SNAPSHOT)).unwrap(), fs::read(b.join(CONFIG_SNAPSHOT)).unwrap());
    }
}
