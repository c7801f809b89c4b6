use super::{Parameter, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[&Parameter]) -> Self {
        Self {
            cfg,
            step: 0,
            names: params.iter().map(|p| p.name().to_string()).collect(),
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// One update from the gradients currently stored in `params`.
    ///
    /// The global gradient norm is clipped to `max_grad_norm` first (the
    /// stored gradients themselves are left as they are; zeroing them is the
    /// caller's job). Returns the pre-clip global norm.
    pub fn step(&mut self, params: &mut [&mut Parameter], max_grad_norm: f64) -> Result<f64> {
        if params.len() != self.names.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.names.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.name() != self.names[i] || p.value.shape() != self.m[i].shape() {
                return Err(Error::contract(format!(
                    "optimizer slot {i} is `{}`, got `{}` {:?}",
                    self.names[i],
                    p.name(),
                    p.value.shape()
                )));
            }
            if let Some(bad) = p.grad.data().iter().find(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient of `{}` contains {bad}",
                    p.name()
                )));
            }
        }
        let grads: Vec<&Tensor> = params.iter().map(|p| &p.grad).collect();
        let norm = global_grad_norm(&grads);
        let scale = clip_scale(norm, max_grad_norm);

        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Parameter { value, grad, .. } = &mut **p;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

pub fn global_grad_norm(grads: &[&Tensor]) -> f64 {
    grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt()
}

/// Multiplier that brings a gradient of norm `norm` down to `max_norm`;
/// exactly 1 when it is already within bounds.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm && norm > 0.0 {
        max_norm / norm
    } else {
        1.0
    }
}

/// `target <- (1 - tau) * target + tau * online`, elementwise.
pub fn polyak_update(target: &mut [&mut Parameter], online: &[&Parameter], tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::contract(format!(
            "polyak over {} target vs {} online parameters",
            target.len(),
            online.len()
        )));
    }
    for (t, o) in target.iter().zip(online) {
        if t.name() != o.name() || t.value.shape() != o.value.shape() {
            return Err(Error::contract(format!(
                "polyak pairs `{}` {:?} with `{}` {:?}",
                t.name(),
                t.value.shape(),
                o.name(),
                o.value.shape()
            )));
        }
    }
    for (t, o) in target.iter_mut().zip(online) {
        if tau == 1.0 {
            t.value.data_mut().copy_from_slice(o.value.data());
            continue;
        }
        // Written as x + tau (y - x) so that equal inputs are a fixed point
        // bit for bit.
        for (x, &y) in t.value.data_mut().iter_mut().zip(o.value.data()) {
            *x += tau * (y - *x);
        }
    }
    Ok(())
}
