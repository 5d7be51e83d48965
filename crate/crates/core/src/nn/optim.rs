use ndarray::ArrayD;

use super::Module;

pub trait Optimizer {
    /// Applies one update from the gradients accumulated in `model`.
    fn step(&mut self, model: &mut dyn Module);
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay,
/// in the usual deep-learning-framework formulation:
/// `d = g + λp; v = μv + d; p -= η v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<ArrayD<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, model: &mut dyn Module) {
        let mut i = 0;
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_params_mut("", &mut |_, p| {
            let fresh = velocity.len() <= i;
            if fresh {
                velocity.push(ArrayD::zeros(p.value.raw_dim()));
            }
            let v = &mut velocity[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(v)
                .for_each(|w, &g, v| {
                    let d = g + wd * *w;
                    *v = if fresh || mu == 0.0 { d } else { mu * *v + d };
                    *w -= lr * *v;
                });
            i += 1;
        });
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: i32,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, model: &mut dyn Module) {
        self.t += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.lr;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit_params_mut("", &mut |_, p| {
            if ms.len() <= i {
                ms.push(ArrayD::zeros(p.value.raw_dim()));
                vs.push(ArrayD::zeros(p.value.raw_dim()));
            }
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut ms[i])
                .and(&mut vs[i])
                .for_each(|w, &g, m, v| {
                    let g = g + wd * *w;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            i += 1;
        });
    }
}
