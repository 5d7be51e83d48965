use ndarray::{Array2, Array4, ArrayD, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, uniform, Layer, Module, Param, Tensor};

pub struct BatchNorm2d {
    channels: usize,
    eps: f32,
    momentum: f32,
    gamma: Param,
    beta: Param,
    running_mean: ArrayD<f32>,
    running_var: ArrayD<f32>,
    cache: Option<BnCache>,
}

struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Param::new(ArrayD::ones(vec![channels])),
            beta: Param::new(ArrayD::zeros(vec![channels])),
            running_mean: ArrayD::zeros(vec![channels]),
            running_var: ArrayD::ones(vec![channels]),
            cache: None,
        }
    }

    fn normalize(&self, x: &Tensor, mean: &[f32], inv_std: &[f32]) -> (Tensor, Tensor) {
        let mut x_hat = x.to_owned();
        for (c, mut plane) in x_hat.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (mean[c], inv_std[c]);
            plane.mapv_inplace(|v| (v - m) * s);
        }
        let mut y = x_hat.clone();
        let g = self.gamma.value.as_slice().unwrap();
        let b = self.beta.value.as_slice().unwrap();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (gc, bc) = (g[c], b[c]);
            plane.mapv_inplace(|v| v * gc + bc);
        }
        (x_hat, y)
    }

    fn running_inv_std(&self) -> Vec<f32> {
        self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect()
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        assert_eq!(x.dim().1, self.channels, "batchnorm channels");
        let (n, _, h, w) = x.dim();
        let count = n * h * w;
        if train && count > 1 {
            let mut mean = vec![0.0f32; self.channels];
            let mut var = vec![0.0f32; self.channels];
            for (c, plane) in x.axis_iter(Axis(1)).enumerate() {
                let m = plane.iter().map(|&v| v as f64).sum::<f64>() / count as f64;
                let v = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / count as f64;
                mean[c] = m as f32;
                var[c] = v as f32;
            }
            let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
            let unbias = count as f32 / (count as f32 - 1.0);
            for c in 0..self.channels {
                self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
                self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c] * unbias;
            }
            let (x_hat, y) = self.normalize(x, &mean, &inv_std);
            self.cache = Some(BnCache {
                x_hat,
                inv_std,
                batch_stats: true,
            });
            y
        } else {
            let mean: Vec<f32> = self.running_mean.iter().copied().collect();
            let inv_std = self.running_inv_std();
            let (x_hat, y) = self.normalize(x, &mean, &inv_std);
            if train {
                self.cache = Some(BnCache {
                    x_hat,
                    inv_std,
                    batch_stats: false,
                });
            }
            y
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mean: Vec<f32> = self.running_mean.iter().copied().collect();
        self.normalize(x, &mean, &self.running_inv_std()).1
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("batchnorm backward without forward");
        let (n, _, h, w) = grad.dim();
        let count = (n * h * w) as f32;
        let mut dx = Tensor::zeros(grad.raw_dim());
        for c in 0..self.channels {
            let g = grad.index_axis(Axis(1), c);
            let xh = cache.x_hat.index_axis(Axis(1), c);
            let dbeta: f32 = g.sum();
            let dgamma: f32 = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            self.beta.grad[c] += dbeta;
            self.gamma.grad[c] += dgamma;
            let gamma = self.gamma.value[c];
            let inv = cache.inv_std[c];
            let mut dxc = dx.index_axis_mut(Axis(1), c);
            if cache.batch_stats {
                let k = gamma * inv / count;
                ndarray::Zip::from(&mut dxc)
                    .and(&g)
                    .and(&xh)
                    .for_each(|d, &gv, &xv| *d = k * (count * gv - dbeta - xv * dgamma));
            } else {
                let k = gamma * inv;
                ndarray::Zip::from(&mut dxc).and(&g).for_each(|d, &gv| *d = k * gv);
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f32>)) {
        f(&join(prefix, "gamma"), &self.gamma.value);
        f(&join(prefix, "beta"), &self.beta.value);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f32>)) {
        f(&join(prefix, "gamma"), &mut self.gamma.value);
        f(&join(prefix, "beta"), &mut self.beta.value);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// ReLU, optionally clipped at an upper bound (ReLU6).
pub struct Relu {
    cap: Option<f32>,
    cache: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Self { cap: None, cache: None }
    }

    /// ReLU6, as used by inverted-residual backbones.
    pub fn six() -> Self {
        Self {
            cap: Some(6.0),
            cache: None,
        }
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = self.infer(x);
        if train {
            self.cache = Some(x.clone());
        }
        y
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        match self.cap {
            None => x.mapv(|v| v.max(0.0)),
            Some(c) => x.mapv(|v| v.clamp(0.0, c)),
        }
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.take().expect("relu backward without forward");
        let cap = self.cap.unwrap_or(f32::INFINITY);
        let mut dx = grad.clone();
        ndarray::Zip::from(&mut dx).and(&x).for_each(|d, &v| {
            if v <= 0.0 || v >= cap {
                *d = 0.0;
            }
        });
        dx
    }
}

impl Module for Relu {}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub struct MaxPool2d {
    cache: Option<(Vec<u32>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self { cache: None }
    }

    fn pool(x: &Tensor, want_idx: bool) -> (Tensor, Vec<u32>) {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Tensor::zeros((n, c, ho, wo));
        let mut idx = if want_idx { vec![0u32; n * c * ho * wo] } else { Vec::new() };
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for p in 0..n * c {
            let plane = &xs[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (2 * oy + dy) * w + 2 * ox + dx;
                            if plane[i] > best {
                                best = plane[i];
                                bi = i;
                            }
                        }
                    }
                    let o = p * ho * wo + oy * wo + ox;
                    ys[o] = best;
                    if want_idx {
                        idx[o] = bi as u32;
                    }
                }
            }
        }
        (y, idx)
    }
}

impl Default for MaxPool2d {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (y, idx) = Self::pool(x, train);
        if train {
            self.cache = Some((idx, x.dim()));
        }
        y
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        Self::pool(x, false).0
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (idx, (n, c, h, w)) = self.cache.take().expect("maxpool backward without forward");
        let mut dx = Tensor::zeros((n, c, h, w));
        let (ho, wo) = (h / 2, w / 2);
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().unwrap();
        let ds = dx.as_slice_mut().unwrap();
        for p in 0..n * c {
            for o in 0..ho * wo {
                let k = p * ho * wo + o;
                ds[p * h * w + idx[k] as usize] += gs[k];
            }
        }
        dx
    }
}

impl Module for MaxPool2d {}

/// Nearest-neighbour 2× upsampling.
pub struct Upsample2;

impl Layer for Upsample2 {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Tensor {
        self.infer(x)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        Tensor::from_shape_fn((n, c, 2 * h, 2 * w), |(a, b, y, xx)| x[[a, b, y / 2, xx / 2]])
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (n, c, h2, w2) = grad.dim();
        let mut dx = Tensor::zeros((n, c, h2 / 2, w2 / 2));
        for ((a, b, y, xx), &g) in grad.indexed_iter() {
            dx[[a, b, y / 2, xx / 2]] += g;
        }
        dx
    }
}

impl Module for Upsample2 {}

/// Spatial mean over each channel: `(N, C, H, W) -> (N, C, 1, 1)`.
pub struct GlobalAvgPool {
    shape: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self { shape: None }
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        if train {
            self.shape = Some(x.dim());
        }
        self.infer(x)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        let area = (h * w) as f32;
        let mut y = Tensor::zeros((n, c, 1, 1));
        for a in 0..n {
            for b in 0..c {
                y[[a, b, 0, 0]] = x.slice(ndarray::s![a, b, .., ..]).sum() / area;
            }
        }
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (n, c, h, w) = self.shape.take().expect("pool backward without forward");
        let area = (h * w) as f32;
        Tensor::from_shape_fn((n, c, h, w), |(a, b, _, _)| grad[[a, b, 0, 0]] / area)
    }
}

impl Module for GlobalAvgPool {}

/// Fully connected layer. Input is flattened to `(N, C·H·W)`; output is
/// `(N, out, 1, 1)`.
pub struct Linear {
    in_features: usize,
    out_features: usize,
    weight: Param,
    bias: Param,
    cache: Option<(Array2<f32>, (usize, usize, usize, usize))>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            in_features,
            out_features,
            weight: Param::new(uniform(&[out_features, in_features], bound, rng)),
            bias: Param::new(uniform(&[out_features], bound, rng)),
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    fn flatten(&self, x: &Tensor) -> Array2<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c * h * w, self.in_features, "linear input features");
        x.as_standard_layout().to_owned().into_shape_with_order((n, c * h * w)).unwrap()
    }

    fn compute(&self, x2: &Array2<f32>) -> Tensor {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let y = x2.dot(&w.t()) + &b;
        let n = y.nrows();
        y.into_shape_with_order((n, self.out_features, 1, 1)).unwrap()
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let x2 = self.flatten(x);
        let y = self.compute(&x2);
        if train {
            self.cache = Some((x2, x.dim()));
        }
        y
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        self.compute(&self.flatten(x))
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (x2, shape) = self.cache.take().expect("linear backward without forward");
        let n = grad.dim().0;
        let g2 = grad.as_standard_layout().to_owned().into_shape_with_order((n, self.out_features)).unwrap();
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            gw += &g2.t().dot(&x2);
            let mut gb = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            gb += &g2.sum_axis(Axis(0));
        }
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let dx = g2.dot(&w);
        dx.into_shape_with_order(shape).unwrap()
    }
}

impl Module for Linear {
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f32>)) {
        f(&join(prefix, "weight"), &self.weight.value);
        f(&join(prefix, "bias"), &self.bias.value);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f32>)) {
        f(&join(prefix, "weight"), &mut self.weight.value);
        f(&join(prefix, "bias"), &mut self.bias.value);
    }
}

#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn with(mut self, layer: impl Layer + 'static) -> Self {
        self.push(layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, train);
        }
        h
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }
}

impl Module for Sequential {
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f32>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_state(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f32>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_state_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// `act(body(x) + shortcut(x))`, where the shortcut is the identity when
/// absent and `act` is an optional ReLU.
pub struct Residual {
    body: Sequential,
    shortcut: Option<Sequential>,
    post_relu: bool,
    mask: Option<Array4<bool>>,
}

impl Residual {
    pub fn new(body: Sequential, shortcut: Option<Sequential>, post_relu: bool) -> Self {
        Self {
            body,
            shortcut,
            post_relu,
            mask: None,
        }
    }
}

impl Layer for Residual {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut y = self.body.forward(x, train);
        match &mut self.shortcut {
            Some(s) => y += &s.forward(x, train),
            None => y += x,
        }
        if self.post_relu {
            if train {
                self.mask = Some(y.mapv(|v| v > 0.0));
            }
            y.mapv_inplace(|v| v.max(0.0));
        }
        y
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = self.body.infer(x);
        match &self.shortcut {
            Some(s) => y += &s.infer(x),
            None => y += x,
        }
        if self.post_relu {
            y.mapv_inplace(|v| v.max(0.0));
        }
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        if self.post_relu {
            let mask = self.mask.take().expect("residual backward without forward");
            ndarray::Zip::from(&mut g).and(&mask).for_each(|d, &m| {
                if !m {
                    *d = 0.0
                }
            });
        }
        let mut dx = self.body.backward(&g);
        match &mut self.shortcut {
            Some(s) => dx += &s.backward(&g),
            None => dx += &g,
        }
        dx
    }
}

impl Module for Residual {
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.body.visit_params_mut(&join(prefix, "body"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params_mut(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f32>)) {
        self.body.visit_state(&join(prefix, "body"), f);
        if let Some(s) = &self.shortcut {
            s.visit_state(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f32>)) {
        self.body.visit_state_mut(&join(prefix, "body"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_state_mut(&join(prefix, "shortcut"), f);
        }
    }
}
