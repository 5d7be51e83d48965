//! Heatmap landmark model: a small U-Net with additive skips and coordinate
//! input channels, emitting one heatmap stack at the working resolution and
//! one at half of it.

use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::heatmap::{decode_heatmaps, render_target_heatmaps, HeatmapStack};
use super::{mre_sdr, LandmarkSet, LocalisationMetrics, NUM_LANDMARKS};
use crate::augment::{augment, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::image::{resample, GrayImage};
use crate::nn::{
    mse_loss, Adam, BatchNorm2d, Conv2d, Layer, MaxPool2d, Module, Optimizer, Param, Relu, Sequential, StateDict, Tensor,
    Upsample2,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandmarkModelConfig {
    /// Network input height; must be a multiple of 8.
    pub work_h: usize,
    pub work_w: usize,
    /// Channels of the first stage; later stages use 2× and 4×.
    pub width: usize,
    /// Target Gaussian SD in pixels of the full-resolution head.
    pub sigma_hi: f64,
    /// Target Gaussian SD in pixels of the half-resolution head.
    pub sigma_lo: f64,
    pub loss: HeatmapLoss,
    /// Weighted squared error only: pixel weight is `1 + peak_weight · target`.
    pub peak_weight: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatmapLoss {
    /// Cross-entropy between each channel's pixel softmax and its target
    /// Gaussian normalised to unit mass.
    SpatialSoftmax,
    /// Squared error against unit-peak Gaussians, up-weighted near peaks.
    WeightedMse,
}

impl Default for LandmarkModelConfig {
    fn default() -> Self {
        Self {
            work_h: 112,
            work_w: 136,
            width: 8,
            sigma_hi: 2.0,
            sigma_lo: 1.5,
            loss: HeatmapLoss::SpatialSoftmax,
            peak_weight: 10.0,
        }
    }
}

impl LandmarkModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Config { key: key.into(), message: message.into() });
        if self.work_h == 0 || self.work_h % 8 != 0 {
            return bad("work_h", "must be a positive multiple of 8");
        }
        if self.work_w == 0 || self.work_w % 8 != 0 {
            return bad("work_w", "must be a positive multiple of 8");
        }
        if self.width == 0 {
            return bad("width", "must be positive");
        }
        if !(self.sigma_hi > 0.0 && self.sigma_lo > 0.0) {
            return bad("sigma_hi", "target widths must be positive");
        }
        if !(self.peak_weight >= 0.0) {
            return bad("peak_weight", "must be nonnegative");
        }
        Ok(())
    }
}

fn cbr(s: Sequential, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Sequential {
    s.with(Conv2d::new(cin, cout, 3, 1, 1, 1, false, rng))
        .with(BatchNorm2d::new(cout))
        .with(Relu::new())
}

struct UNet {
    enc1: Sequential,
    enc2: Sequential,
    enc3: Sequential,
    bottom: Sequential,
    pools: [MaxPool2d; 3],
    ups: [Upsample2; 3],
    dec3: Sequential,
    proj2: Conv2d,
    dec2: Sequential,
    proj1: Conv2d,
    dec1: Sequential,
    head_lo: Conv2d,
    head_hi: Conv2d,
}

impl UNet {
    fn new(width: usize, rng: &mut ChaCha8Rng) -> Self {
        let (c1, c2, c3) = (width, 2 * width, 4 * width);
        Self {
            enc1: cbr(cbr(Sequential::new(), 3, c1, rng), c1, c1, rng),
            enc2: cbr(cbr(Sequential::new(), c1, c2, rng), c2, c2, rng),
            enc3: cbr(cbr(Sequential::new(), c2, c3, rng), c3, c3, rng),
            bottom: cbr(cbr(Sequential::new(), c3, c3, rng), c3, c3, rng),
            pools: [MaxPool2d::new(), MaxPool2d::new(), MaxPool2d::new()],
            ups: [Upsample2, Upsample2, Upsample2],
            dec3: cbr(Sequential::new(), c3, c3, rng),
            proj2: Conv2d::pointwise(c3, c2, false, rng),
            dec2: cbr(Sequential::new(), c2, c2, rng),
            proj1: Conv2d::pointwise(c2, c1, false, rng),
            dec1: cbr(Sequential::new(), c1, c1, rng),
            head_lo: Conv2d::pointwise(c2, NUM_LANDMARKS, true, rng),
            head_hi: Conv2d::pointwise(c1, NUM_LANDMARKS, true, rng),
        }
    }

    /// Returns `(hi, lo)` heatmaps.
    fn run(&mut self, x: &Tensor, train: bool) -> (Tensor, Tensor) {
        let e1 = self.enc1.forward(x, train);
        let p1 = self.pools[0].forward(&e1, train);
        let e2 = self.enc2.forward(&p1, train);
        let p2 = self.pools[1].forward(&e2, train);
        let e3 = self.enc3.forward(&p2, train);
        let p3 = self.pools[2].forward(&e3, train);
        let b = self.bottom.forward(&p3, train);
        let d3 = self.dec3.forward(&(self.ups[2].forward(&b, train) + &e3), train);
        let q2 = self.proj2.forward(&d3, train);
        let d2 = self.dec2.forward(&(self.ups[1].forward(&q2, train) + &e2), train);
        let lo = self.head_lo.forward(&d2, train);
        let q1 = self.proj1.forward(&d2, train);
        let d1 = self.dec1.forward(&(self.ups[0].forward(&q1, train) + &e1), train);
        let hi = self.head_hi.forward(&d1, train);
        (hi, lo)
    }

    fn infer(&self, x: &Tensor) -> (Tensor, Tensor) {
        let e1 = self.enc1.infer(x);
        let e2 = self.enc2.infer(&self.pools[0].infer(&e1));
        let e3 = self.enc3.infer(&self.pools[1].infer(&e2));
        let b = self.bottom.infer(&self.pools[2].infer(&e3));
        let d3 = self.dec3.infer(&(self.ups[2].infer(&b) + &e3));
        let d2 = self.dec2.infer(&(self.ups[1].infer(&self.proj2.infer(&d3)) + &e2));
        let lo = self.head_lo.infer(&d2);
        let d1 = self.dec1.infer(&(self.ups[0].infer(&self.proj1.infer(&d2)) + &e1));
        (self.head_hi.infer(&d1), lo)
    }

    fn backward(&mut self, d_hi: &Tensor, d_lo: &Tensor) {
        let g = self.head_hi.backward(d_hi);
        let g_s1 = self.dec1.backward(&g);
        let mut g_e1 = g_s1.clone();
        let mut g_d2 = self.proj1.backward(&self.ups[0].backward(&g_s1));
        g_d2 += &self.head_lo.backward(d_lo);
        let g_s2 = self.dec2.backward(&g_d2);
        let mut g_e2 = g_s2.clone();
        let g_d3 = self.proj2.backward(&self.ups[1].backward(&g_s2));
        let g_s3 = self.dec3.backward(&g_d3);
        let mut g_e3 = g_s3.clone();
        let g_b = self.ups[2].backward(&g_s3);
        g_e3 += &self.pools[2].backward(&self.bottom.backward(&g_b));
        g_e2 += &self.pools[1].backward(&self.enc3.backward(&g_e3));
        g_e1 += &self.pools[0].backward(&self.enc2.backward(&g_e2));
        self.enc1.backward(&g_e1);
    }
}

macro_rules! visit_all {
    ($self:ident, $method:ident, $prefix:ident, $f:ident) => {{
        $self.enc1.$method(&crate::nn::join($prefix, "enc1"), $f);
        $self.enc2.$method(&crate::nn::join($prefix, "enc2"), $f);
        $self.enc3.$method(&crate::nn::join($prefix, "enc3"), $f);
        $self.bottom.$method(&crate::nn::join($prefix, "bottom"), $f);
        $self.dec3.$method(&crate::nn::join($prefix, "dec3"), $f);
        $self.proj2.$method(&crate::nn::join($prefix, "proj2"), $f);
        $self.dec2.$method(&crate::nn::join($prefix, "dec2"), $f);
        $self.proj1.$method(&crate::nn::join($prefix, "proj1"), $f);
        $self.dec1.$method(&crate::nn::join($prefix, "dec1"), $f);
        $self.head_lo.$method(&crate::nn::join($prefix, "head_lo"), $f);
        $self.head_hi.$method(&crate::nn::join($prefix, "head_hi"), $f);
    }};
}

impl Module for UNet {
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_all!(self, visit_params_mut, prefix, f);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &ndarray::ArrayD<f32>)) {
        visit_all!(self, visit_state, prefix, f);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f32>)) {
        visit_all!(self, visit_state_mut, prefix, f);
    }
}

/// Softmax over the pixels of every `(sample, channel)` map.
pub fn spatial_softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut sample in out.outer_iter_mut() {
        for mut ch in sample.outer_iter_mut() {
            let m = ch.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = ch.iter().map(|&v| ((v - m) as f64).exp()).sum();
            ch.mapv_inplace(|v| (((v - m) as f64).exp() / z) as f32);
        }
    }
    out
}

/// Mean over maps of `-Σ t log p`, with `t` each target map scaled to unit
/// mass and `p` the pixel softmax of `logits`. Maps with no target mass (a
/// landmark pushed off the image) are skipped. Returns the loss and its
/// gradient with respect to `logits`.
pub fn spatial_softmax_ce(logits: &Tensor, target: &Tensor) -> (f64, Tensor) {
    assert_eq!(logits.dim(), target.dim(), "heatmap shapes");
    let p = spatial_softmax(logits);
    let (n, c, _, _) = logits.dim();
    let mut grad = Tensor::zeros(logits.dim());
    let mut loss = 0.0;
    let mut maps = 0usize;
    for i in 0..n {
        for k in 0..c {
            let t = target.slice(s![i, k, .., ..]);
            let mass: f64 = t.iter().map(|&v| v as f64).sum();
            if !(mass > 0.0) {
                continue;
            }
            maps += 1;
            let pk = p.slice(s![i, k, .., ..]);
            let lk = logits.slice(s![i, k, .., ..]);
            let lmax = lk.fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let log_z = lmax + lk.iter().map(|&v| (v as f64 - lmax).exp()).sum::<f64>().ln();
            for ((&tv, &lv), (&pv, g)) in t.iter().zip(lk.iter()).zip(pk.iter().zip(grad.slice_mut(s![i, k, .., ..]).iter_mut())) {
                let tn = tv as f64 / mass;
                if tn > 0.0 {
                    loss -= tn * (lv as f64 - log_z);
                }
                *g = (pv as f64 - tn) as f32;
            }
        }
    }
    if maps == 0 {
        return (0.0, grad);
    }
    grad.mapv_inplace(|g| g / maps as f32);
    (loss / maps as f64, grad)
}

pub struct LandmarkModel {
    pub config: LandmarkModelConfig,
    net: UNet,
}

#[derive(Serialize, Deserialize)]
struct LandmarkCheckpoint {
    config: LandmarkModelConfig,
    state: StateDict,
}

impl LandmarkModel {
    pub fn new(config: LandmarkModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let net = UNet::new(config.width, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { config, net })
    }

    /// Resampled, per-image standardized intensity plus x and y coordinate
    /// channels in `[-1, 1]`.
    pub fn input_planes(&self, img: &GrayImage) -> Array3<f32> {
        let (h, w) = (self.config.work_h, self.config.work_w);
        let small = resample(&img.view(), h, w);
        let n = small.len() as f32;
        let mean = small.sum() / n;
        let sd = (small.mapv(|v| (v - mean) * (v - mean)).sum() / n).sqrt().max(1e-3);
        let mut out = Array3::zeros((3, h, w));
        out.index_axis_mut(Axis(0), 0).assign(&small.mapv(|v| (v - mean) / sd));
        for r in 0..h {
            for c in 0..w {
                out[[1, r, c]] = 2.0 * c as f32 / (w - 1) as f32 - 1.0;
                out[[2, r, c]] = 2.0 * r as f32 / (h - 1) as f32 - 1.0;
            }
        }
        out
    }

    fn batch(&self, imgs: &[&GrayImage]) -> Tensor {
        let (h, w) = (self.config.work_h, self.config.work_w);
        let mut t = Tensor::zeros((imgs.len(), 3, h, w));
        for (i, img) in imgs.iter().enumerate() {
            t.index_axis_mut(Axis(0), i).assign(&self.input_planes(img));
        }
        t
    }

    /// Heatmap scales (hi, lo) for an `height × width` source image.
    fn scales(&self, height: usize, width: usize) -> ((f64, f64), (f64, f64)) {
        let sx = self.config.work_w as f64 / width as f64;
        let sy = self.config.work_h as f64 / height as f64;
        ((sx, sy), (sx / 2.0, sy / 2.0))
    }

    /// Predicted `(hi, lo)` heatmap stacks, negatives clipped to zero.
    pub fn predict_heatmaps(&self, img: &GrayImage) -> Result<(HeatmapStack, HeatmapStack)> {
        let (hi, lo) = self.net.infer(&self.batch(&[img]));
        let ((hx, hy), (lx, ly)) = self.scales(img.height(), img.width());
        let loss = self.config.loss;
        let take = |t: Tensor| match loss {
            HeatmapLoss::SpatialSoftmax => spatial_softmax(&t).index_axis_move(Axis(0), 0),
            HeatmapLoss::WeightedMse => t.index_axis_move(Axis(0), 0).mapv(|v| v.max(0.0)),
        };
        Ok((HeatmapStack::new(take(hi), hx, hy)?, HeatmapStack::new(take(lo), lx, ly)?))
    }

    pub fn predict(&self, img: &GrayImage) -> Result<LandmarkSet> {
        let (hi, lo) = self.predict_heatmaps(img)?;
        decode_heatmaps(&hi, &lo)
    }

    fn targets(&self, lms: &[&LandmarkSet], height: usize, width: usize) -> Result<(Tensor, Tensor)> {
        let ((hx, hy), (lx, ly)) = self.scales(height, width);
        let (h, w) = (self.config.work_h, self.config.work_w);
        let mut t_hi = Tensor::zeros((lms.len(), NUM_LANDMARKS, h, w));
        let mut t_lo = Tensor::zeros((lms.len(), NUM_LANDMARKS, h / 2, w / 2));
        for (i, l) in lms.iter().enumerate() {
            let a = render_target_heatmaps(l, h, w, hx, hy, self.config.sigma_hi)?;
            let b = render_target_heatmaps(l, h / 2, w / 2, lx, ly, self.config.sigma_lo)?;
            t_hi.index_axis_mut(Axis(0), i).assign(&a.data);
            t_lo.index_axis_mut(Axis(0), i).assign(&b.data);
        }
        Ok((t_hi, t_lo))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = LandmarkCheckpoint {
            config: self.config.clone(),
            state: StateDict::from_layer(&self.net),
        };
        std::fs::write(path, serde_json::to_string(&ck)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: LandmarkCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        let mut m = Self::new(ck.config, 0)?;
        ck.state.load_into(&mut m.net)?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandmarkTrainConfig {
    pub model: LandmarkModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub augment: bool,
}

impl Default for LandmarkTrainConfig {
    fn default() -> Self {
        Self {
            model: LandmarkModelConfig::default(),
            epochs: 20,
            batch_size: 4,
            lr: 0.002,
            weight_decay: 0.0,
            seed: 0,
            augment: true,
        }
    }
}

impl LandmarkTrainConfig {
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
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be nonnegative");
        }
        self.model.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::Config { key: format!("model.{key}"), message },
            other => other,
        })
    }
}

/// One training example with its pixel spacing in millimetres per pixel.
pub struct LandmarkSample<'a> {
    pub image: &'a GrayImage,
    pub landmarks: &'a LandmarkSet,
    pub spacing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mre_mm: Option<f64>,
}

/// Mean radial error and detection rates pooled over every landmark of
/// every sample.
pub fn evaluate_landmarks(model: &LandmarkModel, samples: &[LandmarkSample]) -> Result<(LocalisationMetrics, Vec<LandmarkSet>)> {
    let mut errors = Vec::with_capacity(samples.len() * NUM_LANDMARKS);
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let p = model.predict(s.image)?;
        errors.extend(super::radial_errors_mm(p.points(), s.landmarks.points(), s.spacing)?);
        preds.push(p);
    }
    Ok((super::metrics_from_errors(&errors)?, preds))
}

/// Adam on peak-weighted squared error over both heads. Images are
/// augmented with translation, scaling and intensity jitter only.
pub fn train_landmark_model(
    train: &[LandmarkSample],
    val: &[LandmarkSample],
    cfg: &LandmarkTrainConfig,
    on_epoch: &mut dyn FnMut(&LandmarkEpoch),
) -> Result<(LandmarkModel, Vec<LandmarkEpoch>)> {
    if train.is_empty() {
        return Err(Error::Empty("landmark training images"));
    }
    cfg.validate()?;
    let mut model = LandmarkModel::new(cfg.model.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let policy = AugmentationPolicy::landmark_training();
    let pw = cfg.model.peak_weight;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut imgs = Vec::with_capacity(batch.len());
            let mut lms = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train[i];
                if cfg.augment {
                    let a = augment(s.image, Some(s.landmarks), None, &policy, &mut rng)?;
                    imgs.push(a.image);
                    lms.push(a.landmarks.expect("landmarks were given"));
                } else {
                    imgs.push(s.image.clone());
                    lms.push(s.landmarks.clone());
                }
            }
            let (h, w) = (imgs[0].height(), imgs[0].width());
            if imgs.iter().any(|im| (im.height(), im.width()) != (h, w)) {
                return Err(Error::invalid("landmark training batch mixes image sizes"));
            }
            let x = model.batch(&imgs.iter().collect::<Vec<_>>());
            let (t_hi, t_lo) = model.targets(&lms.iter().collect::<Vec<_>>(), h, w)?;
            model.net.zero_grad();
            let (p_hi, p_lo) = model.net.run(&x, true);
            let ((l_hi, g_hi), (l_lo, g_lo)) = match cfg.model.loss {
                HeatmapLoss::SpatialSoftmax => (spatial_softmax_ce(&p_hi, &t_hi), spatial_softmax_ce(&p_lo, &t_lo)),
                HeatmapLoss::WeightedMse => {
                    let w_hi = t_hi.mapv(|t| 1.0 + pw * t);
                    let w_lo = t_lo.mapv(|t| 1.0 + pw * t);
                    (mse_loss(&p_hi, &t_hi, Some(&w_hi)), mse_loss(&p_lo, &t_lo, Some(&w_lo)))
                }
            };
            let loss = l_hi + l_lo;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("landmark loss {loss} at epoch {epoch}")));
            }
            model.net.backward(&g_hi, &g_lo);
            opt.step(&mut model.net);
            loss_sum += loss * batch.len() as f64;
        }
        let val_mre_mm = if val.is_empty() { None } else { Some(evaluate_landmarks(&model, val)?.0.mre_mm) };
        let rec = LandmarkEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_mre_mm,
        };
        log::info!("landmark epoch {epoch}: loss {:.5} val mre {:?}", rec.train_loss, rec.val_mre_mm);
        on_epoch(&rec);
        history.push(rec);
    }
    Ok((model, history))
}

/// Per-image metrics against ground truth.
pub fn image_metrics(model: &LandmarkModel, s: &LandmarkSample) -> Result<LocalisationMetrics> {
    mre_sdr(&model.predict(s.image)?, s.landmarks, s.spacing)
}

/// Stacks heatmap channels into a grid image for inspection.
pub fn heatmap_mosaic(stack: &HeatmapStack, cols: usize) -> Array2<f32> {
    let (c, h, w) = stack.data.dim();
    let rows = c.div_ceil(cols);
    let mut out = Array2::zeros((rows * h, cols * w));
    for k in 0..c {
        let (r, q) = (k / cols, k % cols);
        out.slice_mut(s![r * h..(r + 1) * h, q * w..(q + 1) * w])
            .assign(&stack.data.index_axis(Axis(0), k));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticSpec};

    fn tiny() -> LandmarkModelConfig {
        LandmarkModelConfig {
            work_h: 56,
            work_w: 64,
            width: 4,
            ..LandmarkModelConfig::default()
        }
    }

    #[test]
    fn output_shapes_and_scales() {
        let m = LandmarkModel::new(tiny(), 1).unwrap();
        let img = GrayImage::new(Array2::from_shape_fn((112, 128), |(r, c)| ((r + c) % 200) as f32), 255.0);
        let (hi, lo) = m.predict_heatmaps(&img).unwrap();
        assert_eq!(hi.data.dim(), (NUM_LANDMARKS, 56, 64));
        assert_eq!(lo.data.dim(), (NUM_LANDMARKS, 28, 32));
        assert_eq!((hi.scale_x, hi.scale_y), (0.5, 0.5));
        assert_eq!((lo.scale_x, lo.scale_y), (0.25, 0.25));
        assert!(hi.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.work_h = 50;
        assert!(matches!(LandmarkModel::new(c, 0), Err(Error::Config { key, .. }) if key == "work_h"));
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut m = LandmarkModel::new(tiny(), 2).unwrap();
        let img = GrayImage::new(Array2::from_shape_fn((56, 64), |(r, c)| ((r * 3 + c * 5) % 97) as f32), 255.0);
        let x = m.batch(&[&img, &img]);
        let t_hi = Tensor::from_shape_fn((2, NUM_LANDMARKS, 56, 64), |(_, c, r, q)| ((c + r + q) % 5) as f32 * 0.1);
        let t_lo = Tensor::from_shape_fn((2, NUM_LANDMARKS, 28, 32), |(_, c, r, q)| ((c * 2 + r + q) % 3) as f32 * 0.1);
        let loss = |m: &mut LandmarkModel| {
            let (a, b) = m.net.run(&x, true);
            mse_loss(&a, &t_hi, None).0 + mse_loss(&b, &t_lo, None).0
        };
        m.net.zero_grad();
        let (a, b) = m.net.run(&x, true);
        let (_, ga) = mse_loss(&a, &t_hi, None);
        let (_, gb) = mse_loss(&b, &t_lo, None);
        m.net.backward(&ga, &gb);
        // Directional derivatives along random sign vectors over every
        // parameter. ReLU and max-pool kinks make the central difference
        // jitter by a few percent; a dropped skip or head gradient does not.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let mut dirs = Vec::new();
            let mut analytic = 0.0f64;
            m.net.visit_params_mut("", &mut |_, p| {
                let d = p.value.mapv(|_| if rand::Rng::random_bool(&mut rng, 0.5) { 1.0f32 } else { -1.0 });
                analytic += (&d * &p.grad).sum() as f64;
                dirs.push(d);
            });
            let shift = |m: &mut LandmarkModel, step: f32| {
                let mut i = 0;
                m.net.visit_params_mut("", &mut |_, p| {
                    p.value.scaled_add(step, &dirs[i]);
                    i += 1;
                });
            };
            let eps = 1e-4f32;
            shift(&mut m, eps);
            let lp = loss(&mut m);
            shift(&mut m, -2.0 * eps);
            let lm = loss(&mut m);
            shift(&mut m, eps);
            let numeric = (lp - lm) / (2.0 * eps as f64);
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs());
            assert!(rel < 5e-2, "analytic {analytic} numeric {numeric}");
        }
    }

    #[test]
    fn spatial_softmax_ce_gradient() {
        let logits = Tensor::from_shape_fn((2, 2, 3, 4), |(a, b, c, d)| ((a * 7 + b * 5 + c * 3 + d) % 5) as f32 * 0.3 - 0.5);
        let mut target = Tensor::from_shape_fn((2, 2, 3, 4), |(_, _, c, d)| if c == 1 && d >= 1 { 1.0 + d as f32 } else { 0.0 });
        target.slice_mut(s![1, 1, .., ..]).fill(0.0);
        let (l0, g) = spatial_softmax_ce(&logits, &target);
        assert!(l0 > 0.0);
        assert!(g.slice(s![1, 1, .., ..]).iter().all(|&v| v == 0.0));
        for idx in [(0, 0, 1, 2), (1, 0, 2, 3), (0, 1, 0, 0)] {
            let eps = 1e-3;
            let mut a = logits.clone();
            a[idx] += eps;
            let mut b = logits.clone();
            b[idx] -= eps;
            let num = (spatial_softmax_ce(&a, &target).0 - spatial_softmax_ce(&b, &target).0) / (2.0 * eps as f64);
            assert!((num - g[idx] as f64).abs() < 1e-4, "{idx:?}: {num} vs {}", g[idx]);
        }
        let p = spatial_softmax(&logits);
        for i in 0..2 {
            for k in 0..2 {
                assert!((p.slice(s![i, k, .., ..]).sum() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn learns_and_round_trips() {
        let spec = SyntheticSpec::default();
        let cases = generate(&spec, 6).unwrap();
        let samples: Vec<LandmarkSample> = cases
            .iter()
            .map(|c| LandmarkSample {
                image: &c.radiograph.image,
                landmarks: &c.landmarks,
                spacing: c.spacing(),
            })
            .collect();
        let cfg = LandmarkTrainConfig {
            model: LandmarkModelConfig {
                work_h: 56,
                work_w: 64,
                width: 4,
                ..LandmarkModelConfig::default()
            },
            epochs: 3,
            batch_size: 3,
            ..LandmarkTrainConfig::default()
        };
        let (m, hist) = train_landmark_model(&samples, &samples[..2], &cfg, &mut |_| {}).unwrap();
        assert_eq!(hist.len(), 3);
        assert!(hist[2].train_loss < hist[0].train_loss);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.json");
        m.save(&p).unwrap();
        let back = LandmarkModel::load(&p).unwrap();
        let (a, _) = m.predict_heatmaps(samples[0].image).unwrap();
        let (b, _) = back.predict_heatmaps(samples[0].image).unwrap();
        assert_eq!(a, b);
    }
}
