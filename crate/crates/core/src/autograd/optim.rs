use super::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor. Names are dotted paths such as
/// `block.0.attn.wq`.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter { name: name.into(), value }
    }
}

/// L2 norm of all gradients taken together, in parameter order.
pub fn global_grad_norm(params: &[Parameter]) -> Result<f64> {
    let mut total = 0.0;
    for p in params {
        let grad = p.value.grad_ref();
        let grad = grad
            .as_ref()
            .ok_or_else(|| Error::contract("sgd_step", format!("parameter {} has no gradient", p.name)))?;
        total += grad.iter().map(|g| g * g).sum::<f64>();
    }
    Ok(total.sqrt())
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(params: &[Parameter], max_norm: f64) -> Result<f64> {
    let norm = global_grad_norm(params)?;
    if norm > max_norm {
        let factor = max_norm / norm;
        for p in params {
            let scaled = p.value.grad().map(|g| g.into_iter().map(|v| v * factor).collect());
            p.value.set_grad(scaled);
        }
    }
    Ok(norm)
}

/// `value ← value − lr · grad`, after optional global-norm clipping, then
/// clears every gradient. Fails before touching anything if a parameter has
/// no gradient.
pub fn sgd_step(params: &[Parameter], lr: f64, clip_norm: Option<f64>) -> Result<()> {
    match clip_norm {
        Some(max_norm) => {
            clip_grad_norm(params, max_norm)?;
        }
        None => {
            global_grad_norm(params)?;
        }
    }
    for p in params {
        if let Some(grad) = p.value.grad() {
            let mut data = p.value.data_mut()?;
            for (v, g) in data.iter_mut().zip(&grad) {
                *v -= lr * g;
            }
        }
        p.value.zero_grad();
    }
    Ok(())
}
