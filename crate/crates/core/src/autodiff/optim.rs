use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Classic momentum SGD: `v <- momentum * v + grad; p <- p - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
    momentum: f64,
    learning_rate: f64,
}

impl OptimizerState {
    /// Zero velocity for each parameter.
    pub fn new(params: &[Tensor], learning_rate: f64, momentum: f64) -> Result<Self> {
        let mut problems = Vec::new();
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            problems.push(format!("learning rate must be positive, got {learning_rate}"));
        }
        if !(0.0..1.0).contains(&momentum) {
            problems.push(format!("momentum must lie in [0,1), got {momentum}"));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(OptimizerState {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            momentum,
            learning_rate,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Replace the velocity buffers, e.g. when resuming from a checkpoint.
    pub fn set_velocity(&mut self, velocity: Vec<Tensor>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::dim("velocity buffers do not match parameter shapes"));
        }
        self.velocity = velocity;
        Ok(())
    }

    /// Apply one update using the gradient slot of every parameter.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::usage(format!(
                "optimizer tracks {} parameters, step got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::usage(format!("parameter {i} has no gradient")));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if p.shape() != v.shape() {
                return Err(Error::dim(format!(
                    "velocity shape {:?} does not match parameter shape {:?}",
                    v.shape(),
                    p.shape()
                )));
            }
            let grad = p.take_grad().unwrap_or_default();
            for ((w, vel), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(grad) {
                *vel = self.momentum * *vel + g;
                *w -= self.learning_rate * *vel;
            }
        }
        Ok(())
    }
}
