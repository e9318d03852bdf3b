use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
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
            eps: 1e-9,
        }
    }
}

/// A trainable tensor with its Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Self { value, m, v }
    }
}

/// Named parameters plus optimizer state, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Parameter::new(value));
    }

    pub(crate) fn insert_parameter(&mut self, name: String, param: Parameter) -> Result<()> {
        if param.m.shape() != param.value.shape() || param.v.shape() != param.value.shape() {
            return Err(Error::shape(
                "parameter",
                format!("moments of '{name}' do not match its shape"),
            ));
        }
        self.params.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// One bias-corrected Adam update. Parameters without an entry in
    /// `grads` are treated as having zero gradient.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = self.params.get(name).ok_or_else(|| {
                Error::shape("adam_step", format!("gradient for unknown parameter '{name}'"))
            })?;
            if p.value.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "'{name}' is {:?} but its gradient is {:?}",
                        p.value.shape(),
                        g.shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (name, p) in self.params.iter_mut() {
            let g = grads.get(name);
            let n = p.value.len();
            let (value, m, v) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
            for idx in 0..n {
                let gi = g.map_or(0.0, |g| g.data()[idx]);
                m[idx] = cfg.beta1 * m[idx] + (1.0 - cfg.beta1) * gi;
                v[idx] = cfg.beta2 * v[idx] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[idx] / bc1;
                let v_hat = v[idx] / bc2;
                value[idx] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
