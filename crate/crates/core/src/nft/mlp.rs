//! Small velocity-field regressor `v(x_t, c, t)` with hand-written backprop.
//!
//! Input is `[x_1, x_2, onehot(c)..., t]`; two SiLU hidden layers; linear
//! output in R^2. Parameters live in one flat vector, laid out as
//! `W1 b1 W2 b2 W3 b3` with row-major weight matrices.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const DATA_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub n_conditions: usize,
    pub hidden: usize,
}

impl Default for MlpLayout {
    fn default() -> Self {
        MlpLayout {
            n_conditions: 2,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

impl MlpLayout {
    pub fn input_dim(&self) -> usize {
        DATA_DIM + self.n_conditions + 1
    }

    fn offsets(&self) -> Offsets {
        let (i, h) = (self.input_dim(), self.hidden);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + DATA_DIM * h;
        Offsets {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            end: b3 + DATA_DIM,
        }
    }

    pub fn param_count(&self) -> usize {
        self.offsets().end
    }

    /// Scaled-normal weights (`1/sqrt(fan_in)`), zero biases, and a damped
    /// output layer so the initial field is small.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let o = self.offsets();
        let mut p = vec![0.0; o.end];
        let mut fill = |range: std::ops::Range<usize>, scale: f64| {
            for w in &mut p[range] {
                *w = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(o.w1..o.b1, 1.0 / (self.input_dim() as f64).sqrt());
        fill(o.w2..o.b2, 1.0 / (self.hidden as f64).sqrt());
        fill(o.w3..o.b3, 0.1 / (self.hidden as f64).sqrt());
        p
    }

    pub fn input(&self, x: [f64; 2], cond: usize, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.input_dim()];
        v[0] = x[0];
        v[1] = x[1];
        v[DATA_DIM + cond] = 1.0;
        v[DATA_DIM + self.n_conditions] = t;
        v
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * n..(j + 1) * n];
        *o = b[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub fn forward_cached(layout: &MlpLayout, params: &[f64], x: [f64; 2], cond: usize, t: f64) -> ([f64; 2], Cache) {
    let o = layout.offsets();
    let h = layout.hidden;
    let input = layout.input(x, cond, t);
    let mut z1 = vec![0.0; h];
    affine(&params[o.w1..o.b1], &params[o.b1..o.w2], &input, &mut z1);
    let a1: Vec<f64> = z1.iter().map(|&z| silu(z)).collect();
    let mut z2 = vec![0.0; h];
    affine(&params[o.w2..o.b2], &params[o.b2..o.w3], &a1, &mut z2);
    let a2: Vec<f64> = z2.iter().map(|&z| silu(z)).collect();
    let mut out = [0.0; 2];
    affine(&params[o.w3..o.b3], &params[o.b3..o.end], &a2, &mut out);
    (
        out,
        Cache {
            input,
            z1,
            a1,
            z2,
            a2,
        },
    )
}

pub fn forward(layout: &MlpLayout, params: &[f64], x: [f64; 2], cond: usize, t: f64) -> [f64; 2] {
    forward_cached(layout, params, x, cond, t).0
}

/// Accumulates `d(out · grad_out)/d(params)` into `grad`.
pub fn backward(layout: &MlpLayout, params: &[f64], cache: &Cache, grad_out: [f64; 2], grad: &mut [f64]) {
    let o = layout.offsets();
    let h = layout.hidden;
    let ni = layout.input_dim();

    let mut da2 = vec![0.0; h];
    for (j, g) in grad_out.iter().enumerate() {
        grad[o.b3 + j] += g;
        for k in 0..h {
            grad[o.w3 + j * h + k] += g * cache.a2[k];
            da2[k] += g * params[o.w3 + j * h + k];
        }
    }
    let dz2: Vec<f64> = da2.iter().zip(&cache.z2).map(|(d, &z)| d * silu_grad(z)).collect();
    let mut da1 = vec![0.0; h];
    for (j, &g) in dz2.iter().enumerate() {
        grad[o.b2 + j] += g;
        let row = o.w2 + j * h;
        for k in 0..h {
            grad[row + k] += g * cache.a1[k];
            da1[k] += g * params[row + k];
        }
    }
    for (j, (d, &z)) in da1.iter().zip(&cache.z1).enumerate() {
        let g = d * silu_grad(z);
        grad[o.b1 + j] += g;
        let row = o.w1 + j * ni;
        for k in 0..ni {
            grad[row + k] += g * cache.input[k];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_matches_layout() {
        let l = MlpLayout::default();
        assert_eq!(l.input_dim(), 5);
        assert_eq!(l.param_count(), 64 * 5 + 64 + 64 * 64 + 64 + 2 * 64 + 2);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let l = MlpLayout {
            n_conditions: 3,
            hidden: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = l.init(&mut rng);
        let (x, c, t, g) = ([0.3, -1.2], 1, 0.4, [0.7, -0.2]);
        let (_, cache) = forward_cached(&l, &p, x, c, t);
        let mut grad = vec![0.0; p.len()];
        backward(&l, &p, &cache, g, &mut grad);
        let f = |p: &[f64]| {
            let o = forward(&l, p, x, c, t);
            o[0] * g[0] + o[1] * g[1]
        };
        let h = 1e-6;
        for i in 0..p.len() {
            let mut up = p.clone();
            up[i] += h;
            let mut dn = p.clone();
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn adam_ignores_zero_gradient() {
        let mut a = Adam::new(3, 1e-3);
        let mut p = vec![1.0, 2.0, 3.0];
        a.step(&mut p, &[0.0; 3]);
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }
}
