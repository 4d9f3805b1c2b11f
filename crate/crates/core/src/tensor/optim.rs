//! Adam and Adamax with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Adam,
    Adamax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for every parameter, in parameter order.
///
/// For Adamax the second accumulator holds the exponentially weighted
/// infinity norm instead of the squared-gradient average.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub kind: OptimKind,
    pub step: u64,
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
}

impl OptimState {
    pub fn new(kind: OptimKind, params: &[Tensor<f32>]) -> Self {
        Self {
            kind,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One update of `params` in place. Parameters without an entry in
    /// `grads` are treated as having zero gradient.
    pub fn step<'g>(
        &mut self,
        params: &mut [Tensor<f32>],
        grads: impl IntoIterator<Item = (usize, &'g Tensor<f32>)>,
        lr: f64,
        weight_decay: f64,
        hyper: &AdamConfig,
    ) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(Error::Model(format!("learning rate must be >= 0, got {lr}")));
        }
        let mut by_id: Vec<Option<&Tensor<f32>>> = vec![None; params.len()];
        for (id, g) in grads {
            let Some(p) = params.get(id) else {
                return Err(Error::Shape(format!("gradient for unknown parameter {id}")));
            };
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            by_id[id] = Some(g);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (hyper.beta1, hyper.beta2, hyper.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (idx, p) in params.iter_mut().enumerate() {
            let m = self.first[idx].data_mut();
            let v = self.second[idx].data_mut();
            let g = by_id[idx].map(|g| g.data());
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.map_or(0.0, |g| g[j] as f64);
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                m[j] = mj as f32;
                let update = match self.kind {
                    OptimKind::Adam => {
                        let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                        v[j] = vj as f32;
                        (mj / bc1) / ((vj / bc2).sqrt() + eps)
                    }
                    OptimKind::Adamax => {
                        let vj = (b2 * v[j] as f64).max(gj.abs());
                        v[j] = vj as f32;
                        (mj / bc1) / (vj + eps)
                    }
                };
                pd[j] = (pd[j] as f64 * decay - lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor<f32>>) -> f64 {
    grads
        .into_iter()
        .map(|g| g.data().iter().map(|&x| x as f64 * x as f64).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}
