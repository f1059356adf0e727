//! SGD with classic momentum.

use super::EncoderError;
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    /// Creates velocity buffers shaped like `params`.
    pub fn new(lr: T, momentum: T, params: &[&Tensor<T>]) -> Self {
        Self {
            lr,
            momentum,
            velocity: params.iter().map(|p| p.zeros_like()).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// `v ← μv + g; p ← p − lr·v`.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[&Tensor<T>]) -> Result<(), EncoderError> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(EncoderError::Shape(format!(
                "{} params and {} grads for {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(EncoderError::Shape(format!(
                    "param {:?}, grad {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                )));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}
