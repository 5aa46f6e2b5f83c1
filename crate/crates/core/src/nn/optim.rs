use serde::{Deserialize, Serialize};

use super::layers::Parameter;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "SGD")]
    Sgd,
    #[serde(rename = "ADAM")]
    Adam,
    #[serde(rename = "RMSprop")]
    RmsProp,
}

/// Hyperparameters of one optimizer instance. The moment constants default
/// to the usual library values (Adam 0.9/0.999/1e-8, RMSprop 0.99/1e-8).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_rho")]
    pub rho: f32,
    #[serde(default = "default_eps")]
    pub eps: f32,
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_rho() -> f32 {
    0.99
}
fn default_eps() -> f32 {
    1e-8
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Self {
            kind,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            rho: default_rho(),
            eps: default_eps(),
        }
    }
}

/// Per-parameter moment buffers and the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    shapes: Option<Vec<Vec<usize>>>,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u64,
}

impl OptimizerState {
    /// Unattached state; `attach` must be called before `step`.
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            shapes: None,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    /// State with zeroed buffers matching `params`.
    pub fn for_params(config: OptimizerConfig, params: &[&Parameter]) -> Self {
        let mut s = Self::new(config);
        s.attach(params);
        s
    }

    pub fn attach(&mut self, params: &[&Parameter]) {
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.value.shape().to_vec()).collect();
        self.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        self.second = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        self.shapes = Some(shapes);
        self.steps = 0;
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn kind(&self) -> OptimizerKind {
        self.config.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// in place; the caller zeroes them.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        let shapes = self.shapes.as_ref().ok_or(Error::UninitializedOptimizer)?;
        if shapes.len() != params.len() {
            return Err(Error::shape("optimizer step", &[shapes.len()], &[params.len()]));
        }
        for (p, s) in params.iter().zip(shapes) {
            if p.value.shape() != s.as_slice() {
                return Err(Error::shape(format!("optimizer step {}", p.id), s, p.value.shape()));
            }
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.id)));
            }
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        for (i, p) in params.iter_mut().enumerate() {
            let Parameter { value, grad, .. } = &mut **p;
            let w = value.data_mut();
            let g = grad.data();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (wv, gv) in w.iter_mut().zip(g) {
                        *wv -= c.lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..w.len() {
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        w[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
                OptimizerKind::RmsProp => {
                    let v = &mut self.second[i];
                    for j in 0..w.len() {
                        v[j] = c.rho * v[j] + (1.0 - c.rho) * g[j] * g[j];
                        w[j] -= c.lr * g[j] / (v[j].sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar(w: f32, g: f32) -> Parameter {
        let mut p = Parameter::new("w", Tensor::full(&[1], w));
        p.grad = Tensor::full(&[1], g);
        p
    }

    fn one_step(kind: OptimizerKind, lr: f32, w: f32, g: f32) -> f32 {
        let mut p = scalar(w, g);
        let mut s = OptimizerState::for_params(OptimizerConfig::new(kind, lr), &[&p]);
        s.step(&mut [&mut p]).unwrap();
        assert_eq!(s.steps(), 1);
        p.value.data()[0]
    }

    #[test]
    fn sgd_single_step() {
        assert!((one_step(OptimizerKind::Sgd, 0.1, 1.0, 2.0) - 0.8).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g and v̂ = g², so the update is lr·g/|g|.
        let w = one_step(OptimizerKind::Adam, 0.001, 1.0, 2.0);
        assert!((w - 0.999).abs() < 1e-6, "{w}");
    }

    #[test]
    fn rmsprop_first_step() {
        // v = 0.01·4 = 0.04, update = 0.01·2/0.2 = 0.1
        let w = one_step(OptimizerKind::RmsProp, 0.01, 1.0, 2.0);
        assert!((w - 0.9).abs() < 1e-5, "{w}");
    }

    #[test]
    fn zero_gradient_sgd_is_a_no_op() {
        assert_eq!(one_step(OptimizerKind::Sgd, 0.5, 1.25, 0.0), 1.25);
    }

    #[test]
    fn unattached_state_errors() {
        let mut p = scalar(1.0, 1.0);
        let mut s = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Sgd, 0.1));
        assert!(matches!(s.step(&mut [&mut p]), Err(Error::UninitializedOptimizer)));
    }

    #[test]
    fn nan_gradient_errors() {
        let mut p = scalar(1.0, f32::NAN);
        let mut s = OptimizerState::for_params(OptimizerConfig::new(OptimizerKind::Adam, 0.1), &[&p]);
        assert!(matches!(s.step(&mut [&mut p]), Err(Error::NonFinite(_))));
        assert_eq!(s.steps(), 0);
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut p = scalar(1.0, 0.5);
        let mut s = OptimizerState::for_params(OptimizerConfig::new(OptimizerKind::RmsProp, 0.01), &[&p]);
        for expected in 1..=5 {
            s.step(&mut [&mut p]).unwrap();
            assert_eq!(s.steps(), expected);
        }
    }
}
