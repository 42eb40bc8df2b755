//! Minimal dense numerics: row-major matrices, an LSTM cell with manual
//! backpropagation, and ADAM.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE)).collect();
        Tensor { rows, cols, data }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self · x`
    pub fn matvec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · y`
    pub fn matvec_t_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yi != 0.0 {
                axpy(yi, row, out);
            }
        }
    }

    /// `self += y · xᵀ`
    pub fn outer_add(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols;
        for (&yi, row) in y.iter().zip(self.data.chunks_exact_mut(cols)) {
            if yi != 0.0 {
                axpy(yi, x, row);
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        axpy(1.0, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    // four partial sums so the loop vectorizes
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a · x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Euclidean distance.
pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Anything exposing named parameter tensors.
pub trait Params {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over tensor names and raw bits.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for v in &t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// LSTM cell weights. Gates are stacked `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `4H × (I + H)` acting on `[x; h_prev]`.
    pub w: Tensor,
    pub b: Tensor,
}

impl LstmParams {
    pub fn new(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        LstmParams {
            input_dim,
            hidden_dim,
            w: Tensor::uniform(4 * hidden_dim, input_dim + hidden_dim, rng),
            b: Tensor::uniform(4 * hidden_dim, 1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LstmParams {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w: self.w.zeros_like(),
            b: self.b.zeros_like(),
        }
    }

    pub fn named<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Tensor)> {
        vec![(format!("{prefix}.w"), &self.w), (format!("{prefix}.b"), &self.b)]
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Tensor)> {
        vec![(format!("{prefix}.w"), &mut self.w), (format!("{prefix}.b"), &mut self.b)]
    }

    /// One forward step, retaining what the backward pass needs.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmStep {
        let hd = self.hidden_dim;
        let mut z = self.b.data.clone();
        let cols = self.w.cols;
        for (zr, row) in z.iter_mut().zip(self.w.data.chunks_exact(cols)) {
            *zr += dot(&row[..self.input_dim], x) + dot(&row[self.input_dim..], h_prev);
        }
        let mut gates = z;
        for v in &mut gates[..2 * hd] {
            *v = sigmoid(*v);
        }
        for v in &mut gates[2 * hd..3 * hd] {
            *v = v.tanh();
        }
        for v in &mut gates[3 * hd..] {
            *v = sigmoid(*v);
        }
        let mut c = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for k in 0..hd {
            c[k] = gates[hd + k] * c_prev[k] + gates[k] * gates[2 * hd + k];
            tanh_c[k] = c[k].tanh();
            h[k] = gates[3 * hd + k] * tanh_c[k];
        }
        LstmStep {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates,
            tanh_c,
            c,
            h,
        }
    }

    /// Backpropagates `dh`, `dc` through `step`, accumulating weight gradients
    /// into `grads` and returning `(dx, dh_prev, dc_prev)`.
    pub fn backward(&self, step: &LstmStep, dh: &[f64], dc: &[f64], grads: &mut LstmParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden_dim;
        let g = &step.gates;
        let mut da = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, cell, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
            let tc = step.tanh_c[k];
            let d_o = dh[k] * tc;
            let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
            let d_i = dct * cell;
            let d_g = dct * i;
            let d_f = dct * step.c_prev[k];
            dc_prev[k] = dct * f;
            da[k] = d_i * i * (1.0 - i);
            da[hd + k] = d_f * f * (1.0 - f);
            da[2 * hd + k] = d_g * (1.0 - cell * cell);
            da[3 * hd + k] = d_o * o * (1.0 - o);
        }
        axpy(1.0, &da, &mut grads.b.data);
        let cols = self.w.cols;
        let mut dx = vec![0.0; self.input_dim];
        let mut dh_prev = vec![0.0; hd];
        for (r, &a) in da.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &self.w.data[r * cols..(r + 1) * cols];
            axpy(a, &row[..self.input_dim], &mut dx);
            axpy(a, &row[self.input_dim..], &mut dh_prev);
            let grow = &mut grads.w.data[r * cols..(r + 1) * cols];
            axpy(a, &step.x, &mut grow[..self.input_dim]);
            axpy(a, &step.h_prev, &mut grow[self.input_dim..]);
        }
        (dx, dh_prev, dc_prev)
    }
}

/// Cached activations of one LSTM step.
#[derive(Debug, Clone)]
pub struct LstmStep {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub gates: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

/// ADAM with one learning rate per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. `params`, `grads` and `lrs` are aligned by position.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lrs: &[f64]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            let lr = lrs[k];
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k].data);
            for j in 0..p.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                if lr != 0.0 {
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    p.data[j] -= lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }
}
