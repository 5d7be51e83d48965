//! Regression, segmentation and classification metrics plus report output.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} values", b.len()), format!("{} values", a.len())));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation, computed from centred sums.
pub fn pcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::invalid("correlation needs at least two pairs"));
    }
    let (mp, mt) = (mean(pred), mean(truth));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("predictions are constant".into()));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("reference values are constant".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

/// `2|a ∩ b| / (|a| + |b|)` over nonzero pixels; two empty masks score 1.
pub fn dice(a: &ArrayView2<u8>, b: &ArrayView2<u8>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

pub fn classification_report(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<ClassificationReport> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} labels", truth.len()), format!("{} labels", pred.len())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::invalid(format!("label outside 0..{num_classes}")));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    Ok(ClassificationReport {
        accuracy: correct as f64 / pred.len() as f64,
        confusion,
        n: pred.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResidual {
    pub id: String,
    pub pred: f64,
    pub truth: f64,
    pub residual: f64,
}

/// Image-level regression quality in SvdH units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub pcc: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
    pub residuals: Vec<ScoreResidual>,
    pub scatter: Option<PathBuf>,
}

impl RegressionReport {
    pub fn new(ids: &[String], pred: &[f64], truth: &[f64]) -> Result<Self> {
        same_len(pred, truth)?;
        if ids.len() != pred.len() {
            return Err(Error::shape(format!("{} ids", pred.len()), format!("{} ids", ids.len())));
        }
        let residuals = ids
            .iter()
            .zip(pred.iter().zip(truth))
            .map(|(id, (&p, &t))| ScoreResidual {
                id: id.clone(),
                pred: p,
                truth: t,
                residual: p - t,
            })
            .collect();
        Ok(Self {
            pcc: pcc(pred, truth)?,
            mae: mae(pred, truth)?,
            rmse: rmse(pred, truth)?,
            n: pred.len(),
            residuals,
            scatter: None,
        })
    }

    pub fn summary(&self) -> String {
        format!("pcc={:.4},mae={:.3},rmse={:.3},n={}", self.pcc, self.mae, self.rmse, self.n)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Writes a predicted-versus-true scatter plot and records its path.
    pub fn write_scatter(&mut self, path: &Path) -> Result<()> {
        let pred: Vec<f64> = self.residuals.iter().map(|r| r.pred).collect();
        let truth: Vec<f64> = self.residuals.iter().map(|r| r.truth).collect();
        scatter_plot(&pred, &truth, 320).save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        self.scatter = Some(path.to_path_buf());
        Ok(())
    }
}

/// Square raster with truth on x, prediction on y, the identity line in grey
/// and points in blue.
pub fn scatter_plot(pred: &[f64], truth: &[f64], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let lo = pred.iter().chain(truth).copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = pred.iter().chain(truth).copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 1.0);
    let margin = 16.0;
    let span = size as f64 - 2.0 * margin;
    let to_px = |v: f64| margin + (v - lo) / (hi - lo) * span;
    for i in 0..size {
        for m in [margin as u32, size - margin as u32] {
            img.put_pixel(i, m, Rgb([0, 0, 0]));
            img.put_pixel(m, i, Rgb([0, 0, 0]));
        }
    }
    for i in margin as u32..size - margin as u32 {
        img.put_pixel(i, size - 1 - i, Rgb([180, 180, 180]));
    }
    for (&p, &t) in pred.iter().zip(truth) {
        let (cx, cy) = (to_px(t), size as f64 - 1.0 - to_px(p));
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                let (x, y) = (cx as i64 + dx, cy as i64 + dy);
                if dx * dx + dy * dy <= 5 && (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, Rgb([30, 80, 200]));
                }
            }
        }
    }
    img
}
