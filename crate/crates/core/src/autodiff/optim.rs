use crate::error::{Error, Result};

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
///
/// Per parameter: `v <- momentum * v + grad + weight_decay * param`, then
/// `param <- param - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::config("optimizer.weight_decay", "must be nonnegative"));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Changes the step size for subsequent updates; velocity is kept.
    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        self.lr = lr;
        Ok(())
    }

    /// Updates every parameter block in place; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Length {
                what: "sgd_step blocks",
                left: params.len(),
                right: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    lhs: vec![p.len()],
                    rhs: vec![g.len()],
                });
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}
