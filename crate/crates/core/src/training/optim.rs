//! Adam with per-tensor freezing.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    /// One update. Tensors flagged in `frozen` are skipped entirely: their
    /// values and moments stay untouched.
    pub fn update(&mut self, params: Vec<&mut Matrix<T>>, grads: Vec<&Matrix<T>>, frozen: &[bool]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || frozen.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 / (1.0 - BETA1.powi(t));
        let c2 = 1.0 / (1.0 - BETA2.powi(t));
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let (ob1, ob2) = (T::of(1.0 - BETA1), T::of(1.0 - BETA2));
        let (c1, c2, lr, eps) = (T::of(c1), T::of(c2), T::of(self.lr), T::of(EPSILON));
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if frozen[i] {
                continue;
            }
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!("tensor {i}: parameter/gradient/moment shapes differ")));
            }
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (((w, &gk), mk), vk) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *mk = b1 * *mk + ob1 * gk;
                *vk = b2 * *vk + ob2 * gk * gk;
                *w -= lr * (*mk * c1) / ((*vk * c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
