use super::Tensor;
use crate::error::{Error, Result};

/// Step-decayed learning rate: `lr0 · decay_factor^floor(step / decay_step)`.
pub fn lr_schedule(step: usize, lr0: f64, decay_factor: f64, decay_step: usize) -> f64 {
    if decay_step == 0 {
        return lr0;
    }
    lr0 * decay_factor.powi((step / decay_step) as i32)
}

/// One momentum-SGD update: `v ← momentum·v + g`, then `p ← p − lr·v`.
pub fn sgd_momentum_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    velocity: &mut [Tensor],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!(
                "{} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                velocity.len()
            ),
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!("param {:?}, grad {:?}, velocity {:?}", p.shape(), g.shape(), v.shape()),
            ));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Momentum SGD with owned velocity state, one buffer per parameter.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(params: &[Tensor], momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        sgd_momentum_step(params, grads, lr, self.momentum, &mut self.velocity)
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}
