use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one module, kept in the module's
/// parameter visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<M: Module + ?Sized>(config: AdamConfig, module: &M) -> Result<Self> {
        let params = module.named_params();
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Ok(AdamState {
            config,
            step: 0,
            m: params.iter().map(|(_, t)| zeros(t)).collect::<Result<_>>()?,
            v: params.iter().map(|(_, t)| zeros(t)).collect::<Result<_>>()?,
            names: params.into_iter().map(|(n, _)| n).collect(),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Applies one update to every parameter of `module` from its stored
    /// gradient. Fails without touching anything if a gradient is missing.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M) -> Result<()> {
        let mut params = module.named_params_mut();
        if params.len() != self.names.len() || params.iter().zip(&self.names).any(|((n, _), m)| n != m) {
            return Err(Error::invalid("optimizer state does not match the module's parameters"));
        }
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = (1.0 - (beta1 as f64).powi(t)) as f32;
        let bc2 = (1.0 - (beta2 as f64).powi(t)) as f32;
        for ((_, p), (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let grad = p.grad().expect("checked above").to_vec();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (w, g)) in p.data_mut().iter_mut().zip(&grad).enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * g;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
