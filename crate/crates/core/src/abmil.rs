//! Gated attention multiple-instance regression.
//!
//! For a bag `H` of `K` feature rows, attention logits are
//! `s_k = wᵀ(tanh(V h_k) ⊙ σ(U h_k))`, weights `a = softmax(s)`, the bag
//! embedding `z = Σ a_k h_k` and the prediction `r·z + b`. Everything runs
//! in `f64` with hand-derived gradients.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bag::{FeatureBag, PatchTag};
use crate::data::ScoreStandardizer;
use crate::error::{Error, Result};
use crate::geometry::{Point, Quad, Rect};
use crate::image::GrayImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedAttention {
    /// `L × d`, tanh branch.
    pub v: Array2<f64>,
    /// `L × d`, sigmoid gate.
    pub u: Array2<f64>,
    /// Length `L`.
    pub w: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub v: Array2<f64>,
    pub u: Array2<f64>,
    pub w: Array1<f64>,
}

struct AttentionCache {
    t: Array2<f64>,
    s: Array2<f64>,
    g: Array2<f64>,
    a: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(s: &Array1<f64>) -> Array1<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = s.mapv(|v| (v - m).exp());
    let z = e.sum();
    e / z
}

fn uniform2<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

impl GatedAttention {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bd = 1.0 / (dim as f64).sqrt();
        let bl = 1.0 / (hidden as f64).sqrt();
        Self {
            v: uniform2(hidden, dim, bd, rng),
            u: uniform2(hidden, dim, bd, rng),
            w: Array1::from_shape_fn(hidden, |_| rng.random_range(-bl..=bl)),
        }
    }

    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.v.nrows()
    }

    fn check(&self, h: &ArrayView2<f64>) -> Result<()> {
        if h.nrows() == 0 {
            return Err(Error::Empty("feature bag"));
        }
        if h.ncols() != self.dim() {
            return Err(Error::shape(format!("{} features", self.dim()), format!("{} features", h.ncols())));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bag features".into()));
        }
        Ok(())
    }

    fn forward_cached(&self, h: &ArrayView2<f64>) -> AttentionCache {
        let t = h.dot(&self.v.t()).mapv(f64::tanh);
        let s = h.dot(&self.u.t()).mapv(sigmoid);
        let g = &t * &s;
        let a = softmax(&g.dot(&self.w));
        AttentionCache { t, s, g, a }
    }

    /// Attention weights for each row of `h`.
    pub fn weights(&self, h: &ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check(h)?;
        Ok(self.forward_cached(h).a)
    }

    /// Given d loss / d weights, returns parameter gradients and
    /// d loss / d `h`.
    fn backward(&self, h: &ArrayView2<f64>, c: &AttentionCache, da: &Array1<f64>) -> (AttentionGrads, Array2<f64>) {
        let dot = c.a.dot(da);
        let ds = &c.a * &(da - dot);
        let w = self.w.view().insert_axis(Axis(0));
        let dg = ds.view().insert_axis(Axis(1)).dot(&w);
        let dpre_t = &dg * &c.s * &c.t.mapv(|t| 1.0 - t * t);
        let dpre_s = &dg * &c.t * &c.s.mapv(|s| s * (1.0 - s));
        let grads = AttentionGrads {
            v: dpre_t.t().dot(h),
            u: dpre_s.t().dot(h),
            w: c.g.t().dot(&ds),
        };
        let dh = dpre_t.dot(&self.v) + dpre_s.dot(&self.u);
        (grads, dh)
    }

    /// Gradients of `Σ_k c_k a_k` for fixed coefficients `c`.
    pub fn weights_vjp(&self, h: &ArrayView2<f64>, c: &Array1<f64>) -> Result<AttentionGrads> {
        self.check(h)?;
        let cache = self.forward_cached(h);
        Ok(self.backward(h, &cache, c).0)
    }
}

pub fn gated_attention(h: &ArrayView2<f64>, p: &GatedAttention) -> Result<Array1<f64>> {
    p.weights(h)
}

/// `z = Σ_k a_k h_k`.
pub fn aggregate(h: &ArrayView2<f64>, a: &Array1<f64>) -> Result<Array1<f64>> {
    if a.len() != h.nrows() {
        return Err(Error::shape(format!("{} weights", h.nrows()), format!("{} weights", a.len())));
    }
    Ok(a.dot(h))
}

/// Per-dimension affine normalisation of features, fitted on training bags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub mean: Array1<f64>,
    pub inv_sd: Array1<f64>,
}

impl FeatureScaling {
    pub fn fit<'a>(bags: impl IntoIterator<Item = &'a FeatureBag>) -> Result<Self> {
        let mut sum: Option<(Array1<f64>, Array1<f64>, f64)> = None;
        for b in bags {
            let (s, s2, n) = sum.get_or_insert_with(|| (Array1::zeros(b.dim()), Array1::zeros(b.dim()), 0.0));
            if b.dim() != s.len() {
                return Err(Error::shape(s.len(), b.dim()));
            }
            *s += &b.features.sum_axis(Axis(0));
            *s2 += &b.features.mapv(|v| v * v).sum_axis(Axis(0));
            *n += b.k() as f64;
        }
        let (s, s2, n) = sum.ok_or(Error::Empty("training bags"))?;
        let mean = &s / n;
        let var = &s2 / n - &mean * &mean;
        let inv_sd = var.mapv(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 });
        Ok(Self { mean, inv_sd })
    }

    fn apply(&self, h: &ArrayView2<f64>) -> Array2<f64> {
        (h - &self.mean) * &self.inv_sd
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbmilModel {
    pub attention: GatedAttention,
    pub regressor_w: Array1<f64>,
    pub regressor_b: f64,
    pub dropout: f64,
    pub scaling: Option<FeatureScaling>,
    pub extractor_id: String,
    pub standardizer: Option<ScoreStandardizer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbmilGrads {
    pub attention: AttentionGrads,
    pub regressor_w: Array1<f64>,
    pub regressor_b: f64,
}

impl AbmilGrads {
    pub fn zeros(m: &AbmilModel) -> Self {
        Self {
            attention: AttentionGrads {
                v: Array2::zeros(m.attention.v.raw_dim()),
                u: Array2::zeros(m.attention.u.raw_dim()),
                w: Array1::zeros(m.attention.w.len()),
            },
            regressor_w: Array1::zeros(m.regressor_w.len()),
            regressor_b: 0.0,
        }
    }

    pub fn add_assign(&mut self, o: &AbmilGrads) {
        self.attention.v += &o.attention.v;
        self.attention.u += &o.attention.u;
        self.attention.w += &o.attention.w;
        self.regressor_w += &o.regressor_w;
        self.regressor_b += o.regressor_b;
    }

    fn slices(&self) -> [&[f64]; 5] {
        [
            self.attention.v.as_slice().unwrap(),
            self.attention.u.as_slice().unwrap(),
            self.attention.w.as_slice().unwrap(),
            self.regressor_w.as_slice().unwrap(),
            std::slice::from_ref(&self.regressor_b),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.attention.v.as_slice_mut().unwrap(),
            self.attention.u.as_slice_mut().unwrap(),
            self.attention.w.as_slice_mut().unwrap(),
            self.regressor_w.as_slice_mut().unwrap(),
            std::slice::from_mut(&mut self.regressor_b),
        ]
    }
}

/// Cached forward state for one bag.
pub struct BagTrace {
    h: Array2<f64>,
    attn: AttentionCache,
    z: Array1<f64>,
    mask: Option<Array1<f64>>,
    pub prediction: f64,
}

impl BagTrace {
    pub fn weights(&self) -> &Array1<f64> {
        &self.attn.a
    }
}

impl AbmilModel {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, dropout: f64, rng: &mut R) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::invalid("feature and attention dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        let attention = GatedAttention::new(dim, hidden, rng);
        let b = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            attention,
            regressor_w: Array1::from_shape_fn(dim, |_| rng.random_range(-b..=b)),
            regressor_b: 0.0,
            dropout,
            scaling: None,
            extractor_id: String::new(),
            standardizer: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.attention.dim()
    }

    fn check(&self, h: &ArrayView2<f64>) -> Result<()> {
        self.attention.check(h)
    }

    /// Forward pass keeping what [`Self::backward`] needs. `mask` holds the
    /// inverted-dropout multipliers applied to `z` (absent in inference).
    pub fn trace(&self, features: &ArrayView2<f64>, mask: Option<Array1<f64>>) -> Result<BagTrace> {
        self.check(features)?;
        let h = match &self.scaling {
            Some(s) => s.apply(features),
            None => features.to_owned(),
        };
        let attn = self.attention.forward_cached(&h.view());
        let z = attn.a.dot(&h);
        let zd = match &mask {
            Some(m) => &z * m,
            None => z.clone(),
        };
        let prediction = self.regressor_w.dot(&zd) + self.regressor_b;
        Ok(BagTrace {
            h,
            attn,
            z,
            mask,
            prediction,
        })
    }

    /// Gradients for d loss / d prediction = `dy`, and d loss / d features.
    pub fn backward(&self, tr: &BagTrace, dy: f64) -> (AbmilGrads, Array2<f64>) {
        let zd = match &tr.mask {
            Some(m) => &tr.z * m,
            None => tr.z.clone(),
        };
        let mut dz = &self.regressor_w * dy;
        if let Some(m) = &tr.mask {
            dz *= m;
        }
        let da = tr.h.dot(&dz);
        let (attention, mut dh) = self.attention.backward(&tr.h.view(), &tr.attn, &da);
        dh += &tr.attn.a.view().insert_axis(Axis(1)).dot(&dz.view().insert_axis(Axis(0)));
        if let Some(s) = &self.scaling {
            dh *= &s.inv_sd;
        }
        let grads = AbmilGrads {
            attention,
            regressor_w: zd * dy,
            regressor_b: dy,
        };
        (grads, dh)
    }

    /// Inference: standardized prediction and attention weights.
    pub fn forward(&self, bag: &FeatureBag) -> Result<(f64, Array1<f64>)> {
        let tr = self.trace(&bag.features.view(), None)?;
        Ok((tr.prediction, tr.attn.a))
    }

    /// Prediction in SvdH units through the attached standardizer.
    pub fn predict_score(&self, bag: &FeatureBag) -> Result<f64> {
        let s = self
            .standardizer
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no attached standardizer"))?;
        s.invert(self.forward(bag)?.0)
    }

    pub fn dropout_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Array1<f64>> {
        (self.dropout > 0.0).then(|| {
            let keep = 1.0 - self.dropout;
            Array1::from_shape_fn(self.dim(), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        })
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.attention.v.as_slice_mut().unwrap(),
            self.attention.u.as_slice_mut().unwrap(),
            self.attention.w.as_slice_mut().unwrap(),
            self.regressor_w.as_slice_mut().unwrap(),
            std::slice::from_mut(&mut self.regressor_b),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.attention.v.iter().chain(&self.attention.u).chain(&self.attention.w).chain(&self.regressor_w).all(|v| v.is_finite())
            && self.regressor_b.is_finite()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
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

/// SGD with momentum and L2 decay over the ABMIL parameters, matching
/// [`crate::nn::Sgd`].
pub struct AbmilSgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<AbmilGrads>,
}

impl AbmilSgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut AbmilModel, grads: &AbmilGrads) {
        let fresh = self.velocity.is_none();
        let vel = self.velocity.get_or_insert_with(|| AbmilGrads::zeros(model));
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        for ((p, g), v) in model.slices_mut().into_iter().zip(grads.slices()).zip(vel.slices_mut()) {
            for i in 0..p.len() {
                let d = g[i] + wd * p[i];
                v[i] = if fresh || mu == 0.0 { d } else { mu * v[i] + d };
                p[i] -= lr * v[i];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbmilConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub normalize_features: bool,
}

impl Default for AbmilConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            dropout: 0.1,
            epochs: 100,
            batch_size: 16,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.001,
            seed: 0,
            normalize_features: true,
        }
    }
}

impl AbmilConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Config { key: key.into(), message: message.into() });
        if self.hidden == 0 {
            return bad("hidden", "must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
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
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbmilEpoch {
    pub epoch: usize,
    /// Mean squared error in standardized units.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Root mean squared error in SvdH units.
    pub val_rmse: Option<f64>,
}

pub struct AbmilTrainResult {
    pub best: AbmilModel,
    pub last: AbmilModel,
    pub best_epoch: usize,
    pub history: Vec<AbmilEpoch>,
}

/// Mean squared error (standardized) and RMSE (SvdH units) over scored bags.
pub fn evaluate_bags(model: &AbmilModel, bags: &[FeatureBag], standardizer: &ScoreStandardizer) -> Result<(f64, f64)> {
    if bags.is_empty() {
        return Err(Error::Empty("evaluation bags"));
    }
    let (mut se_z, mut se_y) = (0.0, 0.0);
    for b in bags {
        let y = b.score.ok_or_else(|| Error::invalid(format!("bag {} has no score", b.source_id)))?;
        let z = model.forward(b)?.0;
        se_z += (z - standardizer.apply(y)?).powi(2);
        se_y += (standardizer.invert(z)? - y).powi(2);
    }
    let n = bags.len() as f64;
    Ok((se_z / n, (se_y / n).sqrt()))
}

/// Trains on frozen features. Each training item is a list of augmented
/// views of one image; every epoch visits each item once through a view
/// drawn at random. The best epoch minimises validation loss (the last
/// epoch when there is no validation data). `on_epoch` sees every record as
/// it is produced. On a non-finite loss the last finite model is written to
/// `last_good` (if given) and an error returned.
pub fn train_abmil(
    train: &[Vec<FeatureBag>],
    val: &[FeatureBag],
    standardizer: &ScoreStandardizer,
    extractor_id: &str,
    cfg: &AbmilConfig,
    last_good: Option<&Path>,
    on_epoch: &mut dyn FnMut(&AbmilEpoch),
) -> Result<AbmilTrainResult> {
    cfg.validate()?;
    if train.is_empty() || train.iter().any(|v| v.is_empty()) {
        return Err(Error::Empty("training bags"));
    }
    let dim = train[0][0].dim();
    let targets: Vec<f64> = train
        .iter()
        .map(|views| {
            let y = views[0].score.ok_or_else(|| Error::invalid(format!("bag {} has no score", views[0].source_id)))?;
            standardizer.apply(y)
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = AbmilModel::new(dim, cfg.hidden, cfg.dropout, &mut rng)?;
    if cfg.normalize_features {
        model.scaling = Some(FeatureScaling::fit(train.iter().flatten())?);
    }
    model.extractor_id = extractor_id.to_string();
    model.standardizer = Some(standardizer.clone());
    let mut opt = AbmilSgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, AbmilModel)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let good = model.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = AbmilGrads::zeros(&model);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let views = &train[i];
                let bag = &views[rng.random_range(0..views.len())];
                let mask = model.dropout_mask(&mut rng);
                let tr = model.trace(&bag.features.view(), mask)?;
                let err = tr.prediction - targets[i];
                loss_sum += err * err;
                let (g, _) = model.backward(&tr, 2.0 * err * scale);
                acc.add_assign(&g);
            }
            opt.step(&mut model, &acc);
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() || !model.is_finite() {
            if let Some(p) = last_good {
                good.save(p)?;
            }
            return Err(Error::NonFinite(format!(
                "attention MIL loss {train_loss} at epoch {epoch}; last finite model from epoch {}",
                epoch as i64 - 1
            )));
        }
        let (val_loss, val_rmse) = if val.is_empty() {
            (None, None)
        } else {
            let (l, r) = evaluate_bags(&model, val, standardizer)?;
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
        if best.as_ref().is_none_or(|(_, k, _)| key < *k) {
            best = Some((epoch, key, model.clone()));
        }
        history.push(rec);
    }
    let (best_epoch, _, best) = best.expect("at least one epoch");
    Ok(AbmilTrainResult {
        best,
        last: model,
        best_epoch,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub rect: Rect,
    pub quad: Quad,
    pub tag: PatchTag,
    pub weight: f64,
    /// Weight divided by the bag's largest weight.
    pub opacity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub source_id: String,
    /// SvdH units.
    pub prediction: f64,
    pub standardized: f64,
    pub entries: Vec<AttentionEntry>,
}

impl AttentionReport {
    pub fn weight_sum(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }

    /// Entry indices by decreasing weight; ties keep bag order.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        idx.sort_by(|&a, &b| self.entries[b].weight.total_cmp(&self.entries[a].weight));
        idx
    }

    /// Tab-separated text: a header comment, then `x y w h weight` per patch.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# source={} prediction={:.6} standardized={:.6}\nx\ty\tw\th\tweight\n",
            self.source_id, self.prediction, self.standardized
        );
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\t{}\t{:.17e}\n", e.rect.x, e.rect.y, e.rect.w, e.rect.h, e.weight));
        }
        s
    }

    /// Reads back `(rect, weight)` records written by [`Self::to_text`].
    pub fn parse_weights(text: &str) -> Result<Vec<(Rect, f64)>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.starts_with("x\t") || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::invalid(format!("attention report line {}: `{line}`", i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            let rect = Rect {
                x: f[0].parse().map_err(|_| bad())?,
                y: f[1].parse().map_err(|_| bad())?,
                w: f[2].parse().map_err(|_| bad())?,
                h: f[3].parse().map_err(|_| bad())?,
            };
            out.push((rect, f[4].parse().map_err(|_| bad())?));
        }
        Ok(out)
    }
}

/// Attention weights and the de-standardized prediction for one bag.
pub fn explain(model: &AbmilModel, bag: &FeatureBag, standardizer: &ScoreStandardizer) -> Result<AttentionReport> {
    if bag.provenance.len() != bag.k() {
        return Err(Error::invalid(format!("bag {} carries no patch provenance", bag.source_id)));
    }
    let (z, a) = model.forward(bag)?;
    let max = a.iter().copied().fold(0.0, f64::max);
    let entries = bag
        .provenance
        .iter()
        .zip(&a)
        .map(|(p, &w)| AttentionEntry {
            rect: p.rect,
            quad: p.quad,
            tag: p.tag.clone(),
            weight: w,
            opacity: if max > 0.0 { w / max } else { 0.0 },
        })
        .collect();
    Ok(AttentionReport {
        source_id: bag.source_id.clone(),
        prediction: standardizer.invert(z)?,
        standardized: z,
        entries,
    })
}

/// Blends red over each patch footprint with alpha proportional to its
/// opacity; overlapping patches take the larger alpha.
pub fn render_overlay(img: &GrayImage, report: &AttentionReport) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let mut alpha = Array2::<f64>::zeros((h, w));
    for e in &report.entries {
        let Some(r) = e.rect.clip(w, h) else { continue };
        for y in r.y..r.bottom() {
            for x in r.x..r.right() {
                if e.quad.contains(Point::new(x as f64, y as f64)) {
                    let a = &mut alpha[[y as usize, x as usize]];
                    *a = a.max(0.6 * e.opacity);
                }
            }
        }
    }
    let scale = 255.0 / img.max_value() as f64;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = img.get(x as usize, y as usize) as f64 * scale;
        let a = alpha[[y as usize, x as usize]];
        let r = g * (1.0 - a) + 255.0 * a;
        let o = g * (1.0 - a);
        Rgb([r.round() as u8, o.round() as u8, o.round() as u8])
    })
}

/// Arithmetic mean of member predictions.
pub fn ensemble_predict(predictions: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("ensemble predictions"));
    }
    Ok(predictions.iter().sum::<f64>() / predictions.len() as f64)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::bag::Provenance;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn random_bag(rng: &mut ChaCha8Rng, k: usize, d: usize) -> FeatureBag {
        FeatureBag::new("b", Array2::from_shape_fn((k, d), |_| rng.random_range(-1.0..1.0)), Some(10.0))
    }

    fn model(d: usize, seed: u64) -> AbmilModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = AbmilModel::new(d, 16, 0.1, &mut rng).unwrap();
        m.regressor_b = 0.3;
        m
    }

    #[test]
    fn identical_rows_get_uniform_weights() {
        let m = model(4, 1);
        let h = Array2::from_shape_fn((5, 4), |(_, j)| j as f64 * 0.3);
        let a = gated_attention(&h.view(), &m.attention).unwrap();
        for v in a.iter() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let one = gated_attention(&h.slice(ndarray::s![..1, ..]), &m.attention).unwrap();
        assert_eq!(one.to_vec(), vec![1.0]);
    }

    #[test]
    fn attention_errors() {
        let m = model(4, 1);
        assert!(matches!(gated_attention(&Array2::zeros((0, 4)).view(), &m.attention), Err(Error::Empty(_))));
        assert!(matches!(gated_attention(&Array2::zeros((2, 3)).view(), &m.attention), Err(Error::ShapeMismatch { .. })));
        let mut h = Array2::zeros((2, 4));
        h[[1, 1]] = f64::NAN;
        assert!(matches!(gated_attention(&h.view(), &m.attention), Err(Error::NonFinite(_))));
    }

    #[test]
    fn aggregate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_bag(&mut rng, 6, 5).features;
        let mut a = Array1::zeros(6);
        a[3] = 1.0;
        assert_eq!(aggregate(&h.view(), &a).unwrap(), h.row(3));
        let u = Array1::from_elem(6, 1.0 / 6.0);
        let z = aggregate(&h.view(), &u).unwrap();
        for (x, y) in z.iter().zip(h.mean_axis(Axis(0)).unwrap().iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        let r = Array1::from_shape_fn(6, |_| rng.random::<f64>());
        let r = &r / r.sum();
        let z = aggregate(&h.view(), &r).unwrap();
        for j in 0..5 {
            let mut s = 0.0;
            for k in 0..6 {
                s += r[k] * h[[k, j]];
            }
            assert!((z[j] - s).abs() < 1e-9);
        }
        assert!(aggregate(&h.view(), &Array1::zeros(5)).is_err());
    }

    /// Central differences of `f` at every element of the selected slot.
    fn numeric(m: &AbmilModel, f: &dyn Fn(&AbmilModel) -> f64, slot: usize) -> Vec<f64> {
        let eps = 1e-6;
        let n = {
            let mut c = m.clone();
            c.slices_mut()[slot].len()
        };
        (0..n)
            .map(|i| {
                let mut p = m.clone();
                p.slices_mut()[slot][i] += eps;
                let mut q = m.clone();
                q.slices_mut()[slot][i] -= eps;
                (f(&p) - f(&q)) / (2.0 * eps)
            })
            .collect()
    }

    pub(crate) fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            0.0
        } else {
            diff / norm
        }
    }

    #[test]
    fn attention_weight_gradients_match_finite_differences() {
        for k in [1usize, 3, 8] {
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let m = model(8, 10 + k as u64);
            let h = random_bag(&mut rng, k, 8).features;
            let c = Array1::from_shape_fn(k, |_| rng.random_range(-1.0..1.0));
            let g = m.attention.weights_vjp(&h.view(), &c).unwrap();
            let f = |mm: &AbmilModel| mm.attention.weights(&h.view()).unwrap().dot(&c);
            let analytic = [g.v.as_slice().unwrap(), g.u.as_slice().unwrap(), g.w.as_slice().unwrap()];
            for (slot, an) in analytic.iter().enumerate() {
                let e = rel_err(an, &numeric(&m, &f, slot));
                assert!(e < 1e-4, "K={k} slot {slot}: {e}");
            }
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for k in [1usize, 3, 8] {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
            let mut m = model(8, 20 + k as u64);
            m.scaling = Some(FeatureScaling {
                mean: Array1::from_shape_fn(8, |_| rng.random_range(-0.2..0.2)),
                inv_sd: Array1::from_shape_fn(8, |_| rng.random_range(0.5..2.0)),
            });
            let h = random_bag(&mut rng, k, 8).features;
            let mask = m.dropout_mask(&mut rng);
            let target = 0.7;
            let loss = |mm: &AbmilModel| {
                let tr = mm.trace(&h.view(), mask.clone()).unwrap();
                (tr.prediction - target).powi(2)
            };
            let tr = m.trace(&h.view(), mask.clone()).unwrap();
            let (g, dh) = m.backward(&tr, 2.0 * (tr.prediction - target));
            for (slot, an) in g.slices().iter().enumerate() {
                let e = rel_err(an, &numeric(&m, &loss, slot));
                assert!(e < 1e-4, "K={k} slot {slot}: {e}");
            }
            let eps = 1e-6;
            let num_h: Vec<f64> = (0..h.len())
                .map(|i| {
                    let (r, c) = (i / 8, i % 8);
                    let mut p = h.clone();
                    p[[r, c]] += eps;
                    let mut q = h.clone();
                    q[[r, c]] -= eps;
                    let lp = (m.trace(&p.view(), mask.clone()).unwrap().prediction - target).powi(2);
                    let lq = (m.trace(&q.view(), mask.clone()).unwrap().prediction - target).powi(2);
                    (lp - lq) / (2.0 * eps)
                })
                .collect();
            assert!(rel_err(dh.as_slice().unwrap(), &num_h) < 1e-4);
        }
    }

    #[test]
    fn zero_regressor_predicts_bias() {
        let mut m = model(5, 3);
        m.regressor_w.fill(0.0);
        m.regressor_b = -1.25;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in [1, 4, 9] {
            assert_eq!(m.forward(&random_bag(&mut rng, k, 5)).unwrap().0, -1.25);
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let m = model(6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = random_bag(&mut rng, 7, 6);
        assert_eq!(m.forward(&b).unwrap(), m.forward(&b).unwrap());
        assert!(m.forward(&FeatureBag::new("x", Array2::zeros((3, 5)), None)).is_err());
    }

    proptest! {
        #[test]
        fn permutation_and_duplication_invariance(seed in 0u64..1000, k in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = model(6, seed + 1);
            let b = random_bag(&mut rng, k, 6);
            let (y, a) = m.forward(&b).unwrap();
            prop_assert!((a.sum() - 1.0).abs() < 1e-6);
            prop_assert!(a.iter().all(|&v| v >= 0.0));
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            let (yp, ap) = m.forward(&b.permuted(&perm)).unwrap();
            prop_assert!((y - yp).abs() < 1e-6);
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((ap[i] - a[p]).abs() < 1e-12);
            }
            let dup: Vec<usize> = (0..2 * k).map(|i| i % k).collect();
            let (yd, ad) = m.forward(&b.permuted(&dup)).unwrap();
            prop_assert!((y - yd).abs() < 1e-6);
            prop_assert!((ad[0] - a[0] / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_examples() {
        assert_eq!(ensemble_predict(&[10.0, 20.0]).unwrap(), 15.0);
        assert_eq!(ensemble_predict(&[7.3]).unwrap(), 7.3);
        assert!(matches!(ensemble_predict(&[]), Err(Error::Empty(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..101).map(|_| rng.random_range(-50.0..50.0)).collect();
        let mut s = 0.0;
        for x in &v {
            s += x;
        }
        assert!((ensemble_predict(&v).unwrap() - s / 101.0).abs() < 1e-12);
    }

    fn with_rects(b: FeatureBag) -> FeatureBag {
        let prov = (0..b.k())
            .map(|i| {
                let rect = Rect { x: 10 * i as i64, y: 5, w: 10, h: 10 };
                Provenance {
                    rect,
                    quad: rect.quad(),
                    tag: PatchTag::Tile { index: i, class: 1, p_abnormal: 0.5 },
                    padded: false,
                }
            })
            .collect();
        b.with_provenance(prov).unwrap()
    }

    #[test]
    fn explain_reports() {
        let m = model(4, 8);
        let std = ScoreStandardizer { mean: 40.0, sd: 20.0, provenance: None };
        let uniform = with_rects(FeatureBag::new("u", Array2::from_elem((5, 4), 0.3), None));
        let r = explain(&m, &uniform, &std).unwrap();
        assert!(r.entries.iter().all(|e| e.opacity == 1.0));
        assert!((r.weight_sum() - 1.0).abs() < 1e-6);
        assert!((r.prediction - (40.0 + 20.0 * r.standardized)).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = with_rects(random_bag(&mut rng, 6, 4));
        let r = explain(&m, &b, &std).unwrap();
        let parsed = AttentionReport::parse_weights(&r.to_text()).unwrap();
        assert_eq!(parsed.len(), 6);
        assert!((parsed.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(parsed[2].0, b.provenance[2].rect);
        let top = r.ranked()[0];
        assert_eq!(r.entries[top].opacity, 1.0);

        let img = GrayImage::new(Array2::from_elem((30, 70), 100.0), 255.0);
        let ov = render_overlay(&img, &r);
        assert_eq!(ov.dimensions(), (70, 30));
        let x = 10 * top as u32 + 5;
        assert!(ov.get_pixel(x, 10)[0] > ov.get_pixel(x, 10)[1]);
        assert_eq!(ov.get_pixel(5, 0).0, [100, 100, 100]);

        assert!(explain(&m, &random_bag(&mut rng, 3, 4), &std).is_err());
    }

    #[test]
    fn training_fits_a_learnable_target_and_round_trips() {
        // score proportional to the number of "hot" rows in the bag
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let make = |rng: &mut ChaCha8Rng, n: usize| -> Vec<FeatureBag> {
            (0..n)
                .map(|i| {
                    let hot = rng.random_range(0..5usize);
                    let f = Array2::from_shape_fn((10, 4), |(r, c)| {
                        let base = if r < hot && c == 0 { 2.0 } else { 0.0 };
                        base + rng.random_range(-0.1..0.1)
                    });
                    FeatureBag::new(format!("s{i}"), f, Some(10.0 * hot as f64))
                })
                .collect()
        };
        let train: Vec<Vec<FeatureBag>> = make(&mut rng, 80).into_iter().map(|b| vec![b]).collect();
        let val = make(&mut rng, 20);
        let scores: Vec<f64> = train.iter().map(|v| v[0].score.unwrap()).collect();
        let std = crate::data::fit_standardizer(&scores).unwrap();
        let cfg = AbmilConfig {
            hidden: 16,
            epochs: 60,
            batch_size: 4,
            seed: 3,
            ..AbmilConfig::default()
        };
        let mut seen = 0;
        let res = train_abmil(&train, &val, &std, "fe", &cfg, None, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 60);
        let (_, rmse) = evaluate_bags(&res.best, &val, &std).unwrap();
        assert!(rmse < 6.0, "val rmse {rmse}");

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        res.best.save(&p).unwrap();
        let back = AbmilModel::load(&p).unwrap();
        for b in &val {
            assert!((back.forward(b).unwrap().0 - res.best.forward(b).unwrap().0).abs() < 1e-6);
        }
        assert_eq!(back.extractor_id, "fe");
    }

    #[test]
    fn four_bag_overfit() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let train: Vec<Vec<FeatureBag>> = (0..4)
            .map(|i| {
                let mut b = random_bag(&mut rng, 5, 8);
                b.score = Some(10.0 * i as f64);
                vec![b]
            })
            .collect();
        let scores: Vec<f64> = (0..4).map(|i| 10.0 * i as f64).collect();
        let std = crate::data::fit_standardizer(&scores).unwrap();
        let cfg = AbmilConfig {
            hidden: 16,
            epochs: 1000,
            batch_size: 4,
            dropout: 0.0,
            ..AbmilConfig::default()
        };
        let res = train_abmil(&train, &[], &std, "", &cfg, None, &mut |_| {}).unwrap();
        let flat: Vec<FeatureBag> = train.into_iter().flatten().collect();
        let (mse, _) = evaluate_bags(&res.last, &flat, &std).unwrap();
        assert!(mse < 0.01, "train mse {mse}");
    }

    #[test]
    fn same_seed_same_first_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let train: Vec<Vec<FeatureBag>> = (0..12)
            .map(|i| {
                let mut b = random_bag(&mut rng, 6, 4);
                b.score = Some(i as f64);
                vec![b.clone(), b]
            })
            .collect();
        let std = crate::data::fit_standardizer(&(0..12).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        let cfg = AbmilConfig { epochs: 2, ..AbmilConfig::default() };
        let a = train_abmil(&train, &[], &std, "", &cfg, None, &mut |_| {}).unwrap();
        let b = train_abmil(&train, &[], &std, "", &cfg, None, &mut |_| {}).unwrap();
        assert!((a.history[0].train_loss - b.history[0].train_loss).abs() < 1e-6);
    }

    #[test]
    fn divergence_aborts_with_last_good_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let train: Vec<Vec<FeatureBag>> = (0..8)
            .map(|i| {
                let mut b = random_bag(&mut rng, 4, 4);
                b.score = Some(100.0 * i as f64);
                vec![b]
            })
            .collect();
        let std = ScoreStandardizer { mean: 0.0, sd: 1e-3, provenance: None };
        let cfg = AbmilConfig { lr: 1e3, epochs: 50, ..AbmilConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("good.json");
        let r = train_abmil(&train, &[], &std, "", &cfg, Some(&p), &mut |_| {});
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(AbmilModel::load(&p).unwrap().is_finite());
    }
}
