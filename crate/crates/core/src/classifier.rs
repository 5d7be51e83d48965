//! Patch classifiers and the feature extractors obtained by dropping their
//! final linear layer.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_patch, AugmentationPolicy};
use crate::bag::{FeatureBag, PatchBag};
use crate::error::{Error, Result};
use crate::image::resample;
use crate::nn::{
    softmax, softmax_cross_entropy, BatchNorm2d, Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2d, Module, Optimizer, Relu, Residual,
    Sequential, Sgd, StateDict, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Three conv-BN-ReLU stages with `dim` output channels.
    SmallConv { dim: usize },
    MobileNetV2,
    ResNet34,
    ResNet50,
}

impl BackboneKind {
    pub fn feature_dim(self) -> usize {
        match self {
            BackboneKind::SmallConv { dim } => dim,
            BackboneKind::MobileNetV2 => 1280,
            BackboneKind::ResNet34 => 512,
            BackboneKind::ResNet50 => 2048,
        }
    }

    pub fn build<R: Rng + ?Sized>(self, rng: &mut R) -> Sequential {
        match self {
            BackboneKind::SmallConv { dim } => small_conv(dim, rng),
            BackboneKind::MobileNetV2 => mobilenet_v2(rng),
            BackboneKind::ResNet34 => resnet(&[3, 4, 6, 3], false, rng),
            BackboneKind::ResNet50 => resnet(&[3, 4, 6, 3], true, rng),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneKind::SmallConv { dim } => write!(f, "small-conv-{dim}"),
            BackboneKind::MobileNetV2 => f.write_str("mobilenet-v2"),
            BackboneKind::ResNet34 => f.write_str("resnet-34"),
            BackboneKind::ResNet50 => f.write_str("resnet-50"),
        }
    }
}

fn conv_bn<R: Rng + ?Sized>(s: Sequential, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, rng: &mut R) -> Sequential {
    s.with(Conv2d::new(cin, cout, k, stride, k / 2, groups, false, rng)).with(BatchNorm2d::new(cout))
}

fn small_conv<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Sequential {
    let mut s = conv_bn(Sequential::new(), 1, 16, 3, 1, 1, rng).with(Relu::new()).with(MaxPool2d::new());
    s = conv_bn(s, 16, 32, 3, 1, 1, rng).with(Relu::new()).with(MaxPool2d::new());
    conv_bn(s, 32, dim, 3, 1, 1, rng).with(Relu::new()).with(GlobalAvgPool::new())
}

fn resnet<R: Rng + ?Sized>(blocks: &[usize; 4], bottleneck: bool, rng: &mut R) -> Sequential {
    let expansion = if bottleneck { 4 } else { 1 };
    let mut s = conv_bn(Sequential::new(), 1, 64, 7, 2, 1, rng).with(Relu::new()).with(MaxPool2d::new());
    let mut cin = 64;
    for (stage, &n) in blocks.iter().enumerate() {
        let width = 64 << stage;
        let cout = width * expansion;
        for b in 0..n {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let body = if bottleneck {
                let t = conv_bn(Sequential::new(), cin, width, 1, 1, 1, rng).with(Relu::new());
                let t = conv_bn(t, width, width, 3, stride, 1, rng).with(Relu::new());
                conv_bn(t, width, cout, 1, 1, 1, rng)
            } else {
                let t = conv_bn(Sequential::new(), cin, width, 3, stride, 1, rng).with(Relu::new());
                conv_bn(t, width, cout, 3, 1, 1, rng)
            };
            let shortcut = (stride != 1 || cin != cout).then(|| {
                Sequential::new()
                    .with(Conv2d::new(cin, cout, 1, stride, 0, 1, false, rng))
                    .with(BatchNorm2d::new(cout))
            });
            s.push(Residual::new(body, shortcut, true));
            cin = cout;
        }
    }
    s.with(GlobalAvgPool::new())
}

fn mobilenet_v2<R: Rng + ?Sized>(rng: &mut R) -> Sequential {
    // (expansion, channels, repeats, first stride)
    const CFG: [(usize, usize, usize, usize); 7] =
        [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)];
    let mut s = conv_bn(Sequential::new(), 1, 32, 3, 2, 1, rng).with(Relu::six());
    let mut cin = 32;
    for (t, c, n, first) in CFG {
        for i in 0..n {
            let stride = if i == 0 { first } else { 1 };
            let hidden = cin * t;
            let mut body = Sequential::new();
            if t != 1 {
                body = conv_bn(body, cin, hidden, 1, 1, 1, rng).with(Relu::six());
            }
            body = conv_bn(body, hidden, hidden, 3, stride, hidden, rng).with(Relu::six());
            body = conv_bn(body, hidden, c, 1, 1, 1, rng);
            if stride == 1 && cin == c {
                s.push(Residual::new(body, None, false));
            } else {
                s.push(body);
            }
            cin = c;
        }
    }
    conv_bn(s, cin, 1280, 1, 1, 1, rng).with(Relu::six()).with(GlobalAvgPool::new())
}

/// Scalar intensity normalisation fitted on training patches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f32,
    pub sd: f32,
}

impl Normalization {
    pub fn identity() -> Self {
        Self { mean: 0.0, sd: 1.0 }
    }

    pub fn fit<'a>(patches: impl IntoIterator<Item = &'a Array2<f32>>) -> Result<Self> {
        let (mut n, mut s, mut s2) = (0f64, 0f64, 0f64);
        for p in patches {
            for &v in p {
                n += 1.0;
                s += v as f64;
                s2 += (v as f64) * (v as f64);
            }
        }
        if n == 0.0 {
            return Err(Error::Empty("training patches"));
        }
        let mean = s / n;
        let sd = (s2 / n - mean * mean).max(0.0).sqrt();
        Ok(Self {
            mean: mean as f32,
            sd: if sd > 1e-6 { sd as f32 } else { 1.0 },
        })
    }
}

/// Resizes each patch to `size × size`, normalises it and stacks the batch.
pub fn prepare_batch<'a>(patches: impl ExactSizeIterator<Item = &'a Array2<f32>>, size: usize, norm: Normalization) -> Tensor {
    let n = patches.len();
    let mut t = Tensor::zeros((n, 1, size, size));
    for (i, p) in patches.enumerate() {
        let sized = if p.dim() == (size, size) { p.clone() } else { resample(&p.view(), size, size) };
        let inv = 1.0 / norm.sd;
        t.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&sized.mapv(|v| (v - norm.mean) * inv));
    }
    t
}

fn flatten(t: Tensor) -> Array2<f32> {
    let (n, c, h, w) = t.dim();
    t.into_shape_with_order((n, c * h * w)).expect("contiguous activations")
}

fn unflatten(a: &Array2<f32>) -> Tensor {
    let (n, d) = a.dim();
    a.to_owned().into_shape_with_order((n, d, 1, 1)).unwrap()
}

const INFER_CHUNK: usize = 64;

fn embed(backbone: &Sequential, patches: &[&Array2<f32>], size: usize, norm: Normalization, dim: usize) -> Array2<f32> {
    let mut out = Array2::zeros((patches.len(), dim));
    for (ci, chunk) in patches.chunks(INFER_CHUNK).enumerate() {
        let x = prepare_batch(chunk.iter().copied(), size, norm);
        let f = flatten(backbone.infer(&x));
        out.slice_mut(ndarray::s![ci * INFER_CHUNK..ci * INFER_CHUNK + chunk.len(), ..]).assign(&f);
    }
    out
}

/// Backbone followed by the linear head, as one trainable module.
struct ClassifierNet {
    backbone: Sequential,
    head: Linear,
}

impl Layer for ClassifierNet {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let f = self.backbone.forward(x, train);
        self.head.forward(&f, train)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        self.head.infer(&self.backbone.infer(x))
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.head.backward(grad);
        self.backbone.backward(&g)
    }
}

impl Module for ClassifierNet {
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut crate::nn::Param)) {
        self.backbone.visit_params_mut(&crate::nn::join(prefix, "backbone"), f);
        self.head.visit_params_mut(&crate::nn::join(prefix, "head"), f);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &ndarray::ArrayD<f32>)) {
        self.backbone.visit_state(&crate::nn::join(prefix, "backbone"), f);
        self.head.visit_state(&crate::nn::join(prefix, "head"), f);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f32>)) {
        self.backbone.visit_state_mut(&crate::nn::join(prefix, "backbone"), f);
        self.head.visit_state_mut(&crate::nn::join(prefix, "head"), f);
    }
}

pub struct PatchClassifier {
    pub kind: BackboneKind,
    pub num_classes: usize,
    pub input_size: usize,
    pub norm: Normalization,
    net: ClassifierNet,
}

impl PatchClassifier {
    pub fn new<R: Rng + ?Sized>(kind: BackboneKind, num_classes: usize, input_size: usize, rng: &mut R) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        if input_size < 8 {
            return Err(Error::invalid("patch input size must be at least 8"));
        }
        let backbone = kind.build(rng);
        let head = Linear::new(kind.feature_dim(), num_classes, rng);
        Ok(Self {
            kind,
            num_classes,
            input_size,
            norm: Normalization::identity(),
            net: ClassifierNet { backbone, head },
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.kind.feature_dim()
    }

    /// Penultimate activations, one row per patch.
    pub fn features(&self, patches: &[&Array2<f32>]) -> Array2<f32> {
        embed(&self.net.backbone, patches, self.input_size, self.norm, self.feature_dim())
    }

    /// Applies the final linear layer to penultimate activations.
    pub fn head_logits(&self, features: &Array2<f32>) -> Array2<f32> {
        flatten(self.net.head.infer(&unflatten(features)))
    }

    pub fn logits(&self, patches: &[&Array2<f32>]) -> Array2<f32> {
        self.head_logits(&self.features(patches))
    }

    pub fn probs(&self, patches: &[&Array2<f32>]) -> Array2<f32> {
        softmax(&self.logits(patches))
    }

    pub fn predict(&self, patches: &[&Array2<f32>]) -> Vec<usize> {
        argmax_rows(&self.logits(patches))
    }

    /// Copies the backbone into a standalone extractor.
    pub fn truncate(&self) -> FeatureExtractor {
        let mut backbone = self.kind.build(&mut ChaCha8Rng::seed_from_u64(0));
        StateDict::from_layer(&self.net.backbone)
            .load_into(&mut backbone)
            .expect("identical architecture");
        FeatureExtractor {
            kind: self.kind,
            input_size: self.input_size,
            norm: self.norm,
            backbone,
        }
    }

    fn train_step(&mut self, x: &Tensor, labels: &[usize]) -> (f64, usize) {
        self.net.zero_grad();
        let logits = flatten(self.net.forward(x, true));
        let correct = argmax_rows(&logits).iter().zip(labels).filter(|(a, b)| a == b).count();
        let (loss, g) = softmax_cross_entropy(&logits, labels);
        if logits.iter().any(|v| !v.is_finite()) {
            return (f64::NAN, correct);
        }
        self.net.backward(&unflatten(&g));
        (loss, correct)
    }

    pub fn to_checkpoint(&self) -> ClassifierCheckpoint {
        ClassifierCheckpoint {
            kind: self.kind,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim(),
            input_size: self.input_size,
            norm: self.norm,
            backbone: StateDict::from_layer(&self.net.backbone),
            head: Some(StateDict::from_layer(&self.net.head)),
        }
    }

    pub fn from_checkpoint(c: &ClassifierCheckpoint) -> Result<Self> {
        let head_state = c.head.as_ref().ok_or_else(|| Error::Serde("checkpoint has no classifier head".into()))?;
        c.check_dim()?;
        let mut m = Self::new(c.kind, c.num_classes, c.input_size, &mut ChaCha8Rng::seed_from_u64(0))?;
        c.backbone.load_into(&mut m.net.backbone)?;
        head_state.load_into(&mut m.net.head)?;
        m.norm = c.norm;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&ClassifierCheckpoint::load(path)?)
    }
}

pub fn argmax_rows(a: &Array2<f32>) -> Vec<usize> {
    a.axis_iter(Axis(0))
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Serialized classifier or extractor; `head` is absent for extractors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierCheckpoint {
    pub kind: BackboneKind,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub input_size: usize,
    pub norm: Normalization,
    pub backbone: StateDict,
    pub head: Option<StateDict>,
}

impl ClassifierCheckpoint {
    fn check_dim(&self) -> Result<()> {
        if self.feature_dim != self.kind.feature_dim() {
            return Err(Error::shape(self.kind.feature_dim(), self.feature_dim));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }
}

/// A classifier backbone without its head. Inference is read-only, so one
/// extractor can serve concurrent callers.
pub struct FeatureExtractor {
    pub kind: BackboneKind,
    pub input_size: usize,
    pub norm: Normalization,
    backbone: Sequential,
}

impl FeatureExtractor {
    pub fn dim(&self) -> usize {
        self.kind.feature_dim()
    }

    /// Content hash of kind, normalisation and weights.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.to_string().as_bytes());
        h.update(self.input_size.to_le_bytes());
        h.update(self.norm.mean.to_le_bytes());
        h.update(self.norm.sd.to_le_bytes());
        self.backbone.visit_state("", &mut |name, t| {
            h.update(name.as_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        });
        let digest = h.finalize();
        format!("{}-{}", self.kind, digest.iter().take(8).map(|b| format!("{b:02x}")).collect::<String>())
    }

    pub fn embed(&self, patches: &[&Array2<f32>]) -> Array2<f32> {
        embed(&self.backbone, patches, self.input_size, self.norm, self.dim())
    }

    /// Features of every patch in bag order.
    pub fn extract_features(&self, bag: &PatchBag, score: Option<f64>) -> Result<FeatureBag> {
        if bag.is_empty() {
            return Err(Error::Empty("patch bag"));
        }
        let refs: Vec<&Array2<f32>> = bag.patches.iter().map(|p| &p.pixels).collect();
        let f = self.embed(&refs).mapv(|v| v as f64);
        FeatureBag::new(bag.source_id.clone(), f, score).with_provenance(bag.provenance())
    }

    /// Training-mode forward that caches activations for [`Self::backward`].
    pub fn forward_train(&mut self, patches: &[&Array2<f32>]) -> Array2<f32> {
        let x = prepare_batch(patches.iter().copied(), self.input_size, self.norm);
        flatten(self.backbone.forward(&x, true))
    }

    pub fn backward(&mut self, grad: &Array2<f32>) {
        self.backbone.backward(&unflatten(grad));
    }

    pub fn network_mut(&mut self) -> &mut Sequential {
        &mut self.backbone
    }

    pub fn to_checkpoint(&self) -> ClassifierCheckpoint {
        ClassifierCheckpoint {
            kind: self.kind,
            num_classes: 0,
            feature_dim: self.dim(),
            input_size: self.input_size,
            norm: self.norm,
            backbone: StateDict::from_layer(&self.backbone),
            head: None,
        }
    }

    /// Accepts classifier or extractor checkpoints.
    pub fn from_checkpoint(c: &ClassifierCheckpoint) -> Result<Self> {
        c.check_dim()?;
        let mut backbone = c.kind.build(&mut ChaCha8Rng::seed_from_u64(0));
        c.backbone.load_into(&mut backbone)?;
        Ok(Self {
            kind: c.kind,
            input_size: c.input_size,
            norm: c.norm,
            backbone,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&ClassifierCheckpoint::load(path)?)
    }
}

impl Clone for FeatureExtractor {
    fn clone(&self) -> Self {
        Self::from_checkpoint(&self.to_checkpoint()).expect("round trip of own checkpoint")
    }
}

#[derive(Clone, Debug)]
pub struct LabeledPatch {
    pub pixels: Array2<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcTrainConfig {
    pub backbone: BackboneKind,
    pub input_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub augment: bool,
}

impl Default for PcTrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::SmallConv { dim: 32 },
            input_size: 32,
            epochs: 30,
            batch_size: 16,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.001,
            seed: 0,
            augment: true,
        }
    }
}

impl PcTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Config { key: key.into(), message: message.into() });
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be nonnegative");
        }
        if self.input_size < 8 {
            return bad("input_size", "must be at least 8");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

pub struct PcTrainResult {
    pub best: PatchClassifier,
    pub last: PatchClassifier,
    pub best_epoch: usize,
    pub history: Vec<PcEpoch>,
    /// Monitored loss was still reaching new minima in the last tenth of
    /// the epochs.
    pub still_improving: bool,
}

/// Mean cross-entropy and accuracy in inference mode.
pub fn evaluate_classifier(clf: &PatchClassifier, data: &[LabeledPatch]) -> (f64, f64) {
    if data.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let refs: Vec<&Array2<f32>> = data.iter().map(|p| &p.pixels).collect();
    let labels: Vec<usize> = data.iter().map(|p| p.label).collect();
    let logits = clf.logits(&refs);
    let (loss, _) = softmax_cross_entropy(&logits, &labels);
    let acc = argmax_rows(&logits).iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / data.len() as f64;
    (loss, acc)
}

/// Flags continued improvement: the minimum over the last tenth of `losses`
/// is below every earlier value.
pub fn still_improving(losses: &[f64]) -> bool {
    let n = losses.len();
    if n < 2 {
        return true;
    }
    let tail = n.div_ceil(10).min(n - 1);
    let head_min = losses[..n - tail].iter().copied().fold(f64::INFINITY, f64::min);
    losses[n - tail..].iter().any(|&l| l < head_min)
}

/// Cross-entropy training with SGD. Patches are augmented after cropping
/// when `cfg.augment` is set. The best epoch is chosen by validation
/// accuracy (ties by lower validation loss), or by training loss when no
/// validation data is given. With `checkpoint_dir`, `pc_best.json` and
/// `pc_final.json` are written there.
pub fn train_patch_classifier(
    num_classes: usize,
    train: &[LabeledPatch],
    val: &[LabeledPatch],
    max_value: f32,
    cfg: &PcTrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<PcTrainResult> {
    cfg.validate()?;
    if let Some(p) = train.iter().chain(val).find(|p| p.label >= num_classes) {
        return Err(Error::invalid(format!("patch label {} outside 0..{num_classes}", p.label)));
    }
    let mut present = vec![false; num_classes];
    for p in train {
        present[p.label] = true;
    }
    if present.iter().filter(|&&b| b).count() < 2 {
        return Err(Error::invalid("patch classifier training data contains fewer than two classes"));
    }
    if let Some(i) = train.iter().chain(val).position(|p| p.pixels.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("patch {i} has non-finite pixels")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clf = PatchClassifier::new(cfg.backbone, num_classes, cfg.input_size, &mut rng)?;
    clf.norm = Normalization::fit(train.iter().map(|p| &p.pixels))?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let policy = if cfg.augment { AugmentationPolicy::shared() } else { AugmentationPolicy::identity() };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, f64, ClassifierCheckpoint)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let pix: Vec<Array2<f32>> = batch
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment_patch(&train[i].pixels, max_value, &policy, &mut rng)
                    } else {
                        train[i].pixels.clone()
                    }
                })
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let x = prepare_batch(pix.iter(), clf.input_size, clf.norm);
            let (loss, c) = clf.train_step(&x, &labels);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "patch classifier loss {loss} at epoch {epoch}, batch {bi}; last epoch mean {:?}",
                    history.last().map(|h: &PcEpoch| h.train_loss)
                )));
            }
            opt.step(&mut clf.net);
            loss_sum += loss * batch.len() as f64;
            correct += c;
        }
        let (val_loss, val_acc) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_classifier(&clf, val);
            (Some(l), Some(a))
        };
        let rec = PcEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
        };
        log::debug!("pc epoch {epoch}: {rec:?}");
        let (acc_key, loss_key) = match (val_acc, val_loss) {
            (Some(a), Some(l)) => (a, l),
            _ => (-rec.train_loss, rec.train_loss),
        };
        let better = match &best {
            None => true,
            Some((_, a, l, _)) => acc_key > *a || (acc_key == *a && loss_key < *l),
        };
        if better {
            best = Some((epoch, acc_key, loss_key, clf.to_checkpoint()));
        }
        history.push(rec);
    }
    let (best_epoch, _, _, best_ckpt) = best.expect("at least one epoch");
    let monitored: Vec<f64> = history.iter().map(|h| h.val_loss.unwrap_or(h.train_loss)).collect();
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        best_ckpt.save(&dir.join("pc_best.json"))?;
        clf.save(&dir.join("pc_final.json"))?;
    }
    Ok(PcTrainResult {
        best: PatchClassifier::from_checkpoint(&best_ckpt)?,
        last: clf,
        best_epoch,
        still_improving: still_improving(&monitored),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bag::{Patch, PatchTag, Provenance, Scheme};
    use crate::geometry::Rect;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_patches(n: usize, size: usize, seed: u64) -> Vec<Array2<f32>> {
        let mut r = rng(seed);
        (0..n).map(|_| Array2::from_shape_fn((size, size), |_| r.random_range(0.0..255.0))).collect()
    }

    #[test]
    fn backbone_feature_dimensions() {
        let mut r = rng(1);
        let x = Tensor::from_shape_fn((1, 1, 32, 32), |(_, _, i, j)| ((i * 3 + j) % 7) as f32);
        for (kind, d) in [(BackboneKind::ResNet34, 512), (BackboneKind::MobileNetV2, 1280), (BackboneKind::ResNet50, 2048)] {
            let b = kind.build(&mut r);
            let y = b.infer(&x);
            assert_eq!(y.dim(), (1, d, 1, 1), "{kind}");
            assert_eq!(kind.feature_dim(), d);
        }
    }

    #[test]
    fn decomposition_identity_all_backbones() {
        let mut r = rng(2);
        let patches = random_patches(10, 32, 3);
        let refs: Vec<&Array2<f32>> = patches.iter().collect();
        for kind in [BackboneKind::SmallConv { dim: 24 }, BackboneKind::ResNet34, BackboneKind::MobileNetV2, BackboneKind::ResNet50] {
            let mut clf = PatchClassifier::new(kind, 3, 32, &mut r).unwrap();
            clf.norm = Normalization { mean: 120.0, sd: 70.0 };
            let fe = clf.truncate();
            assert_eq!(fe.dim(), kind.feature_dim());
            let f = fe.embed(&refs);
            assert_eq!(f.dim(), (10, kind.feature_dim()));
            let direct = clf.logits(&refs);
            let via = clf.head_logits(&f);
            for (a, b) in direct.iter().zip(&via) {
                assert!((a - b).abs() <= 1e-5, "{kind}: {a} vs {b}");
            }
            assert_eq!(f, clf.features(&refs));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(4);
        let clf = PatchClassifier::new(BackboneKind::SmallConv { dim: 16 }, 3, 16, &mut r).unwrap();
        let patches = random_patches(6, 20, 5);
        let refs: Vec<&Array2<f32>> = patches.iter().collect();
        for row in clf.probs(&refs).axis_iter(Axis(0)) {
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    fn separable(n: usize, seed: u64) -> Vec<LabeledPatch> {
        let mut r = rng(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let base = if label == 0 { 70.0 } else { 170.0 };
                LabeledPatch {
                    pixels: Array2::from_shape_fn((24, 24), |_| base + r.random_range(-30.0..30.0)),
                    label,
                }
            })
            .collect()
    }

    fn small_cfg(epochs: usize, batch: usize) -> PcTrainConfig {
        PcTrainConfig {
            backbone: BackboneKind::SmallConv { dim: 16 },
            input_size: 16,
            epochs,
            batch_size: batch,
            seed: 11,
            ..PcTrainConfig::default()
        }
    }

    #[test]
    fn separable_patches_are_learned() {
        let data = separable(40, 6);
        let (train, val) = data.split_at(30);
        let res = train_patch_classifier(2, train, val, 255.0, &small_cfg(30, 4), None).unwrap();
        let (_, acc) = evaluate_classifier(&res.best, val);
        assert!(acc >= 0.95, "val accuracy {acc}");
        assert_eq!(res.history.len(), 30);
    }

    #[test]
    fn four_patches_overfit() {
        let data = separable(4, 7);
        let mut cfg = small_cfg(200, 4);
        cfg.augment = false;
        cfg.lr = 0.01;
        let res = train_patch_classifier(2, &data, &[], 255.0, &cfg, None).unwrap();
        let last = res.history.last().unwrap().train_loss;
        assert!(last < 0.01, "final training loss {last}");
    }

    #[test]
    fn permuted_labels_give_chance_accuracy() {
        // balanced labels assigned independently of content
        let data: Vec<LabeledPatch> = random_patches(200, 16, 9)
            .into_iter()
            .enumerate()
            .map(|(i, p)| LabeledPatch { pixels: p, label: i % 2 })
            .collect();
        let (train, val) = data.split_at(100);
        let res = train_patch_classifier(2, train, val, 255.0, &small_cfg(10, 8), None).unwrap();
        let (_, acc) = evaluate_classifier(&res.last, val);
        assert!((acc - 0.5).abs() <= 0.15, "accuracy {acc}");
    }

    #[test]
    fn single_class_rejected() {
        let data: Vec<LabeledPatch> = separable(6, 1).into_iter().map(|p| LabeledPatch { label: 0, ..p }).collect();
        assert!(matches!(
            train_patch_classifier(2, &data, &[], 255.0, &small_cfg(1, 2), None),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn non_finite_input_or_loss_aborts() {
        let mut data = separable(8, 2);
        data[0].pixels[[0, 0]] = f32::NAN;
        let r = train_patch_classifier(2, &data, &[], 255.0, &small_cfg(2, 4), None);
        assert!(matches!(r, Err(Error::NonFinite(_))), "{:?}", r.err());

        let mut cfg = small_cfg(5, 4);
        cfg.lr = 1e30;
        let r = train_patch_classifier(2, &separable(8, 2), &[], 255.0, &cfg, None);
        assert!(matches!(r, Err(Error::NonFinite(_))), "{:?}", r.err());
    }

    fn bag(patches: &[Array2<f32>]) -> PatchBag {
        PatchBag {
            source_id: "b".into(),
            scheme: Scheme::Tiling,
            patches: patches
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let rect = Rect { x: i as i64, y: 0, w: 4, h: 4 };
                    Patch {
                        pixels: p.clone(),
                        provenance: Provenance {
                            rect,
                            quad: rect.quad(),
                            tag: PatchTag::Tile { index: i, class: 0, p_abnormal: 0.0 },
                            padded: false,
                        },
                    }
                })
                .collect(),
            repeated: false,
        }
    }

    #[test]
    fn extract_features_contract() {
        let mut r = rng(12);
        let clf = PatchClassifier::new(BackboneKind::ResNet34, 3, 32, &mut r).unwrap();
        let fe = clf.truncate();
        let patches = random_patches(50, 27, 13);
        let b = bag(&patches);
        let f1 = fe.extract_features(&b, Some(3.0)).unwrap();
        assert_eq!(f1.features.dim(), (50, 512));
        assert_eq!(f1.provenance.len(), 50);
        let f2 = fe.extract_features(&b, Some(3.0)).unwrap();
        assert_eq!(f1, f2);

        let mut perm: Vec<usize> = (0..50).collect();
        perm.shuffle(&mut r);
        let pb = bag(&perm.iter().map(|&i| patches[i].clone()).collect::<Vec<_>>());
        let fp = fe.extract_features(&pb, None).unwrap();
        assert_eq!(fp.features, f1.features.select(Axis(0), &perm));

        let empty = PatchBag { patches: vec![], ..b };
        assert!(matches!(fe.extract_features(&empty, None), Err(Error::Empty(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = separable(12, 14);
        let res = train_patch_classifier(2, &data, &data[..4], 255.0, &small_cfg(2, 4), Some(dir.path())).unwrap();
        let loaded = PatchClassifier::load(&dir.path().join("pc_final.json")).unwrap();
        let refs: Vec<&Array2<f32>> = data.iter().map(|p| &p.pixels).collect();
        assert_eq!(loaded.logits(&refs), res.last.logits(&refs));
        assert_eq!(loaded.norm, res.last.norm);
        let fe = FeatureExtractor::load(&dir.path().join("pc_best.json")).unwrap();
        assert_eq!(fe.embed(&refs), res.best.features(&refs));
        let p = dir.path().join("fe.json");
        fe.save(&p).unwrap();
        let fe2 = FeatureExtractor::load(&p).unwrap();
        assert_eq!(fe2.id(), fe.id());
        assert!(matches!(PatchClassifier::load(&p), Err(Error::Serde(_))));
        assert!(matches!(FeatureExtractor::load(&dir.path().join("nope.json")), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn improvement_flag() {
        assert!(still_improving(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.4, 0.3, 0.2, 0.1]));
        assert!(!still_improving(&[5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
    }
}
