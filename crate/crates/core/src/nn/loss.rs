use ndarray::{Array2, Axis};

use super::Tensor;

/// Row-wise softmax of `(N, C)` logits.
pub fn softmax(logits: &Array2<f32>) -> Array2<f32> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        row.mapv_inplace(|v| {
            let e = (v - m).exp();
            z += e as f64;
            e
        });
        row.mapv_inplace(|v| (v as f64 / z) as f32);
    }
    p
}

/// Mean cross-entropy of `(N, C)` logits against class indices.
/// Returns the loss and d loss / d logits.
pub fn softmax_cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> (f64, Array2<f32>) {
    let n = logits.nrows();
    assert_eq!(n, labels.len(), "one label per row");
    let p = softmax(logits);
    let mut loss = 0.0f64;
    let mut grad = p.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= (p[[i, y]].max(1e-12) as f64).ln();
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n as f32);
    (loss / n as f64, grad)
}

/// Mean squared error, optionally weighted per element. The mean is taken
/// over all elements regardless of weights.
pub fn mse_loss(pred: &Tensor, target: &Tensor, weight: Option<&Tensor>) -> (f64, Tensor) {
    assert_eq!(pred.dim(), target.dim(), "mse shapes");
    let count = pred.len() as f64;
    let mut grad = pred - target;
    let mut loss = 0.0f64;
    match weight {
        Some(w) => {
            ndarray::Zip::from(&mut grad).and(w).for_each(|g, &wv| {
                loss += (wv * *g * *g) as f64;
                *g *= 2.0 * wv / count as f32;
            });
        }
        None => {
            grad.mapv_inplace(|g| {
                loss += (g * g) as f64;
                2.0 * g / count as f32
            });
        }
    }
    (loss / count, grad)
}
