use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::{join, kaiming_normal, Layer, Module, Param, Tensor};

/// 2-D convolution with square kernels, zero padding and channel groups.
/// Implemented as im2col followed by a GEMM per sample and group.
pub struct Conv2d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    weight: Param,
    bias: Option<Param>,
    cache: Option<Tensor>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(groups >= 1 && in_ch % groups == 0 && out_ch % groups == 0);
        assert!(stride >= 1 && kernel >= 1);
        let cin_g = in_ch / groups;
        let weight = kaiming_normal(&[out_ch, cin_g, kernel, kernel], cin_g * kernel * kernel, rng);
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            groups,
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(ArrayD::zeros(vec![out_ch]))),
            cache: None,
        }
    }

    /// 3×3, stride 1, "same" padding.
    pub fn same3<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self::new(in_ch, out_ch, 3, 1, 1, 1, true, rng)
    }

    pub fn pointwise<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, bias: bool, rng: &mut R) -> Self {
        Self::new(in_ch, out_ch, 1, 1, 0, 1, bias, rng)
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn weight_group(&self, g: usize) -> ArrayView2<'_, f32> {
        let cout_g = self.out_ch / self.groups;
        let cols = self.in_ch / self.groups * self.kernel * self.kernel;
        let w = self.weight.value.as_slice().expect("contiguous weight");
        ArrayView2::from_shape((cout_g, cols), &w[g * cout_g * cols..(g + 1) * cout_g * cols]).unwrap()
    }

    fn compute(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_size(h, w);
        let cin_g = self.in_ch / self.groups;
        let cout_g = self.out_ch / self.groups;
        let rows = cin_g * self.kernel * self.kernel;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = Tensor::zeros((n, self.out_ch, ho, wo));
        let mut cols = vec![0.0f32; rows * ho * wo];
        {
            let os = out.as_slice_mut().unwrap();
            for s in 0..n {
                let xn = &xs[s * c * h * w..(s + 1) * c * h * w];
                for g in 0..self.groups {
                    let colv = if self.is_pointwise() {
                        ArrayView2::from_shape((rows, h * w), &xn[g * cin_g * h * w..(g + 1) * cin_g * h * w])
                            .unwrap()
                    } else {
                        im2col(xn, h, w, g * cin_g, cin_g, self.kernel, self.stride, self.padding, ho, wo, &mut cols);
                        ArrayView2::from_shape((rows, ho * wo), &cols[..]).unwrap()
                    };
                    let base = (s * self.out_ch + g * cout_g) * ho * wo;
                    let mut ov =
                        ArrayViewMut2::from_shape((cout_g, ho * wo), &mut os[base..base + cout_g * ho * wo]).unwrap();
                    general_mat_mul(1.0, &self.weight_group(g), &colv, 0.0, &mut ov);
                }
            }
        }
        if let Some(b) = &self.bias {
            let bs = b.value.as_slice().unwrap();
            for s in 0..n {
                for (o, &bv) in bs.iter().enumerate() {
                    out.slice_mut(ndarray::s![s, o, .., ..]).mapv_inplace(|v| v + bv);
                }
            }
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    h: usize,
    w: usize,
    c0: usize,
    nc: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [f32],
) {
    let hw = ho * wo;
    for c in 0..nc {
        let plane = &x[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut out[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // valid ox range: 0 <= ox + kx - pad < w
                        let lo = pad.saturating_sub(kx).min(wo);
                        let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
                        drow[..lo].fill(0.0);
                        drow[hi..].fill(0.0);
                        if hi > lo {
                            let s0 = lo + kx - pad;
                            drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    h: usize,
    w: usize,
    c0: usize,
    nc: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f32],
) {
    let hw = ho * wo;
    for c in 0..nc {
        let plane = &mut dx[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &g) in srow.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = self.compute(x);
        if train {
            self.cache = Some(x.as_standard_layout().to_owned());
        }
        y
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        self.compute(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.take().expect("conv backward without forward");
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.out_size(h, w);
        let cin_g = self.in_ch / self.groups;
        let cout_g = self.out_ch / self.groups;
        let rows = cin_g * self.kernel * self.kernel;
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().unwrap();
        let xs = x.as_slice().unwrap();
        let mut dx = Tensor::zeros((n, c, h, w));
        let mut cols = vec![0.0f32; rows * ho * wo];
        let mut dcols = vec![0.0f32; rows * ho * wo];

        if let Some(b) = &mut self.bias {
            let bg = b.grad.as_slice_mut().unwrap();
            for s in 0..n {
                for (o, bgo) in bg.iter_mut().enumerate() {
                    let base = (s * self.out_ch + o) * ho * wo;
                    *bgo += gs[base..base + ho * wo].iter().sum::<f32>();
                }
            }
        }

        let pointwise = self.is_pointwise();
        let dxs = dx.as_slice_mut().unwrap();
        for s in 0..n {
            let xn = &xs[s * c * h * w..(s + 1) * c * h * w];
            for g in 0..self.groups {
                let base = (s * self.out_ch + g * cout_g) * ho * wo;
                let gv = ArrayView2::from_shape((cout_g, ho * wo), &gs[base..base + cout_g * ho * wo]).unwrap();
                let colv = if pointwise {
                    ArrayView2::from_shape((rows, h * w), &xn[g * cin_g * h * w..(g + 1) * cin_g * h * w]).unwrap()
                } else {
                    im2col(xn, h, w, g * cin_g, cin_g, self.kernel, self.stride, self.padding, ho, wo, &mut cols);
                    ArrayView2::from_shape((rows, ho * wo), &cols[..]).unwrap()
                };
                {
                    let wg = self.weight.grad.as_slice_mut().unwrap();
                    let mut dw = ArrayViewMut2::from_shape(
                        (cout_g, rows),
                        &mut wg[g * cout_g * rows..(g + 1) * cout_g * rows],
                    )
                    .unwrap();
                    general_mat_mul(1.0, &gv, &colv.t(), 1.0, &mut dw);
                }
                let wv = self.weight_group(g);
                if pointwise {
                    let dxn = &mut dxs[s * c * h * w..(s + 1) * c * h * w];
                    let mut dv = ArrayViewMut2::from_shape(
                        (rows, h * w),
                        &mut dxn[g * cin_g * h * w..(g + 1) * cin_g * h * w],
                    )
                    .unwrap();
                    general_mat_mul(1.0, &wv.t(), &gv, 1.0, &mut dv);
                } else {
                    let mut dv = ArrayViewMut2::from_shape((rows, ho * wo), &mut dcols[..]).unwrap();
                    general_mat_mul(1.0, &wv.t(), &gv, 0.0, &mut dv);
                    let dxn = &mut dxs[s * c * h * w..(s + 1) * c * h * w];
                    col2im(&dcols, h, w, g * cin_g, cin_g, self.kernel, self.stride, self.padding, ho, wo, dxn);
                }
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f32>)) {
        f(&join(prefix, "weight"), &self.weight.value);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), &b.value);
        }
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f32>)) {
        f(&join(prefix, "weight"), &mut self.weight.value);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), &mut b.value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Ix4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Direct seven-loop convolution, independent of im2col/GEMM.
    fn naive(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (n, _, h, w) = x.dim();
        let (ho, wo) = conv.out_size(h, w);
        let cin_g = conv.in_ch / conv.groups;
        let cout_g = conv.out_ch / conv.groups;
        let wt = conv.weight.value.view().into_dimensionality::<Ix4>().unwrap();
        let mut y = Array4::zeros((n, conv.out_ch, ho, wo));
        for s in 0..n {
            for o in 0..conv.out_ch {
                let g = o / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().map(|b| b.value[[o]]).unwrap_or(0.0) as f64;
                        for ci in 0..cin_g {
                            for ky in 0..conv.kernel {
                                for kx in 0..conv.kernel {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[[o, ci, ky, kx]] as f64
                                            * x[[s, g * cin_g + ci, iy as usize, ix as usize]] as f64;
                                    }
                                }
                            }
                        }
                        y[[s, o, oy, ox]] = acc as f32;
                    }
                }
            }
        }
        y
    }

    fn rand_tensor(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, k, s, p, g) in &[
            (3, 4, 3, 1, 1, 1),
            (4, 6, 3, 2, 1, 2),
            (4, 4, 3, 1, 1, 4),
            (5, 3, 1, 1, 0, 1),
            (2, 3, 5, 2, 2, 1),
        ] {
            let conv = Conv2d::new(cin, cout, k, s, p, g, true, &mut rng);
            let x = rand_tensor((2, cin, 7, 9), &mut rng);
            let a = conv.infer(&x);
            let b = naive(&conv, &x);
            assert_eq!(a.dim(), b.dim());
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-4, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(k, s, p, g) in &[(3, 1, 1, 1), (3, 2, 1, 2), (1, 1, 0, 1)] {
            let mut conv = Conv2d::new(4, 4, k, s, p, g, true, &mut rng);
            let x = rand_tensor((2, 4, 5, 6), &mut rng);
            let probe = rand_tensor(conv.infer(&x).dim(), &mut rng);
            let loss = |c: &Conv2d, x: &Tensor| -> f64 {
                c.infer(x).iter().zip(probe.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            };
            conv.zero_grad();
            conv.forward(&x, true);
            let dx = conv.backward(&probe);
            let eps = 1e-2f32;
            for idx in [[0usize, 1, 2, 3], [1, 3, 4, 5], [0, 0, 0, 0]] {
                let mut xp = x.clone();
                xp[idx] += eps;
                let mut xm = x.clone();
                xm[idx] -= eps;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps as f64);
                assert!((fd - dx[idx] as f64).abs() < 1e-2, "dx {fd} vs {}", dx[idx]);
            }
            let wlen = conv.weight.value.len();
            for i in [0, wlen / 2, wlen - 1] {
                let analytic = conv.weight.grad.as_slice().unwrap()[i] as f64;
                let mut c2 = Conv2d::new(4, 4, k, s, p, g, true, &mut rng);
                c2.weight = conv.weight.clone();
                c2.bias = conv.bias.clone();
                c2.weight.value.as_slice_mut().unwrap()[i] += eps;
                let lp = loss(&c2, &x);
                c2.weight.value.as_slice_mut().unwrap()[i] -= 2.0 * eps;
                let lm = loss(&c2, &x);
                let fd = (lp - lm) / (2.0 * eps as f64);
                assert!((fd - analytic).abs() < 1e-2, "dw {fd} vs {analytic}");
            }
        }
    }
}
