use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::{AutodiffError, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Named parameter tensors, ordered by name.
pub type ParamMap = BTreeMap<String, Tensor>;

/// First/second moment estimates for every parameter Adam has seen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: ParamMap,
    pub v: ParamMap,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn check_shapes(params: &ParamMap, grads: &ParamMap) -> Result<(), AutodiffError> {
    for (name, grad) in grads {
        let param = params
            .get(name)
            .ok_or_else(|| AutodiffError::ShapeMismatch(format!("gradient for unknown parameter `{name}`")))?;
        if param.shape() != grad.shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "parameter `{name}` is {:?}, gradient is {:?}",
                param.shape(),
                grad.shape()
            )));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left untouched (this is how frozen layers are expressed).
pub fn adam_step(params: &mut ParamMap, grads: &ParamMap, state: &mut AdamState, lr: f64) -> Result<(), AutodiffError> {
    check_shapes(params, grads)?;
    for (name, m) in &state.m {
        if let Some(grad) = grads.get(name) {
            if m.shape() != grad.shape() {
                return Err(AutodiffError::ShapeMismatch(format!("moment shape changed for `{name}`")));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, grad) in grads {
        let param = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (theta, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Plain gradient descent: `θ ← θ − lr·g`.
pub fn sgd_step(params: &mut ParamMap, grads: &ParamMap, lr: f64) -> Result<(), AutodiffError> {
    check_shapes(params, grads)?;
    for (name, grad) in grads {
        let param = params.get_mut(name).expect("checked above");
        for (theta, g) in param.data_mut().iter_mut().zip(grad.data()) {
            *theta -= lr * g;
        }
    }
    Ok(())
}

/// Half-cosine decay from `lr0` at step 0 to zero at `total_steps`.
pub fn cosine_decay(lr0: f64, step: u64, total_steps: u64) -> Result<f64, AutodiffError> {
    if total_steps == 0 || step > total_steps {
        return Err(AutodiffError::StepOutOfRange { step, total_steps });
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// Which update rule a training loop uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerConfig {
    /// Adam at a constant learning rate.
    Adam { lr: f64 },
    /// Plain SGD whose rate follows [`cosine_decay`] over the whole run.
    SgdCosine { lr0: f64 },
}

impl OptimizerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Adam { .. } => "adam",
            OptimizerConfig::SgdCosine { .. } => "sgd_cosine",
        }
    }

    pub fn base_lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr } => lr,
            OptimizerConfig::SgdCosine { lr0 } => lr0,
        }
    }

    /// Parses `adam` or `sgd_cosine` with the given rate.
    pub fn from_name(name: &str, lr: f64) -> Option<Self> {
        match name {
            "adam" => Some(OptimizerConfig::Adam { lr }),
            "sgd_cosine" => Some(OptimizerConfig::SgdCosine { lr0: lr }),
            _ => None,
        }
    }
}

/// An optimizer bound to a fixed schedule length.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    adam: AdamState,
    step: u64,
    total_steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, total_steps: u64) -> Self {
        Self { config, adam: AdamState::new(), step: 0, total_steps }
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> Result<f64, AutodiffError> {
        match self.config {
            OptimizerConfig::Adam { lr } => Ok(lr),
            OptimizerConfig::SgdCosine { lr0 } => cosine_decay(lr0, self.step, self.total_steps),
        }
    }

    /// Applies one update and returns the rate used.
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) -> Result<f64, AutodiffError> {
        let lr = self.current_lr()?;
        match self.config {
            OptimizerConfig::Adam { .. } => adam_step(params, grads, &mut self.adam, lr)?,
            OptimizerConfig::SgdCosine { .. } => sgd_step(params, grads, lr)?,
        }
        self.step += 1;
        Ok(lr)
    }
}
