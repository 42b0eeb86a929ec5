use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{matmul, matmul_at, matmul_bt, Matrix, Rng};

/// Affine map `y = x W + b` on row batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Matrix,
    pub b: Matrix,
}

impl Linear {
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let sigma = (2.0 / inputs.max(1) as f64).sqrt();
        Linear {
            w: Matrix::from_vec(inputs, outputs, rng.normal_vec(inputs * outputs, sigma).into_inner())
                .expect("sized above"),
            b: Matrix::zeros(1, outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            w: Matrix::zeros(inputs, outputs),
            b: Matrix::zeros(1, outputs),
        }
    }

    pub fn identity(n: usize) -> Self {
        Linear {
            w: Matrix::identity(n),
            b: Matrix::zeros(1, n),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.rows()
    }

    pub fn outputs(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul(x, &self.w)?;
        for r in 0..y.rows() {
            y.row_mut(r).iter_mut().zip(self.b.row(0)).for_each(|(v, b)| *v += b);
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Result<Matrix> {
        let dw = matmul_at(x, dy)?;
        add_into(&mut grad.w, &dw);
        for r in 0..dy.rows() {
            grad.b.row_mut(0).iter_mut().zip(dy.row(r)).for_each(|(g, d)| *g += d);
        }
        matmul_bt(dy, &self.w)
    }

    pub fn tensors(&self) -> [&Matrix; 2] {
        [&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 2] {
        [&mut self.w, &mut self.b]
    }
}

pub(crate) fn add_into(acc: &mut Matrix, x: &Matrix) {
    acc.as_mut_slice()
        .iter_mut()
        .zip(x.as_slice())
        .for_each(|(a, b)| *a += b);
}

pub fn relu(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient through a ReLU given its pre-activation input.
pub fn relu_backward(pre: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    dx.as_mut_slice()
        .iter_mut()
        .zip(pre.as_slice())
        .for_each(|(d, p)| {
            if *p <= 0.0 {
                *d = 0.0
            }
        });
    dx
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(dim: usize) -> Self {
        BnStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// Exponential moving average toward a batch's statistics.
    pub fn update(&mut self, batch: &BnStats) {
        for (m, b) in self.mean.iter_mut().zip(&batch.mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
        }
        for (v, b) in self.var.iter_mut().zip(&batch.var) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        let mut gamma = Matrix::zeros(1, dim);
        gamma.as_mut_slice().fill(1.0);
        BatchNorm {
            gamma,
            beta: Matrix::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.cols()
    }

    fn affine(&self, xhat: &Matrix) -> Matrix {
        let mut y = xhat.clone();
        for r in 0..y.rows() {
            for (c, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.gamma[(0, c)] + self.beta[(0, c)];
            }
        }
        y
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::shape(format!(
                "batch norm over {} features got {} columns",
                self.dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Normalizes with batch statistics. Also returns the statistics to fold
    /// into the running estimate (variance unbiased).
    pub fn forward_train(&self, x: &Matrix) -> Result<(Matrix, BnCache, BnStats)> {
        self.check(x)?;
        let (n, d) = (x.rows(), x.cols());
        if n == 0 {
            return Err(Error::argument("batch norm needs a non-empty batch"));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                let e = x[(r, c)] - mean[c];
                var[c] += e * e;
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / n as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| v / (n.max(2) - 1) as f64).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.clone();
        for r in 0..n {
            for c in 0..d {
                xhat[(r, c)] = (x[(r, c)] - mean[c]) * inv_std[c];
            }
        }
        let y = self.affine(&xhat);
        Ok((y, BnCache { xhat, inv_std }, BnStats { mean, var: unbiased }))
    }

    pub fn forward_eval(&self, x: &Matrix, stats: &BnStats) -> Result<Matrix> {
        self.check(x)?;
        let mut xhat = x.clone();
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                xhat[(r, c)] = (x[(r, c)] - stats.mean[c]) / (stats.var[c] + BN_EPS).sqrt();
            }
        }
        Ok(self.affine(&xhat))
    }

    pub fn backward(&self, cache: &BnCache, dy: &Matrix, grad: &mut BatchNorm) -> Matrix {
        let (n, d) = (dy.rows(), dy.cols());
        let mut dx = Matrix::zeros(n, d);
        for c in 0..d {
            let g = self.gamma[(0, c)];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for r in 0..n {
                let dxhat = dy[(r, c)] * g;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * cache.xhat[(r, c)];
                grad.gamma[(0, c)] += dy[(r, c)] * cache.xhat[(r, c)];
                grad.beta[(0, c)] += dy[(r, c)];
            }
            let k = cache.inv_std[c] / n as f64;
            for r in 0..n {
                let dxhat = dy[(r, c)] * g;
                dx[(r, c)] = k * (n as f64 * dxhat - sum_dxhat - cache.xhat[(r, c)] * sum_dxhat_xhat);
            }
        }
        dx
    }

    pub fn tensors(&self) -> [&Matrix; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}
