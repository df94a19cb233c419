//! SGD and Adam over lists of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state. Adam moments are allocated on the first step with the
/// parameters' shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Applies one update in place. The step is refused, leaving both the
    /// parameters and the state untouched, if any gradient is non-finite or
    /// mis-shaped.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameters vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient shape {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::numeric("optimizer_step"));
            }
        }

        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.learning_rate * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                    self.v = self.m.clone();
                } else if self.m.len() != params.len()
                    || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
                {
                    return Err(Error::State("adam moments do not match parameters".into()));
                }
                let t = (self.step + 1) as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
                    for ((pv, &gv), (mv, vv)) in it {
                        *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_definition() {
        let mut opt = OptimizerState::sgd(0.1);
        let mut p = vec![Tensor::scalar(1.0)];
        opt.step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
        assert!((p[0].item().unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        for g in [-3.0, 1e-4, 250.0] {
            let mut opt = OptimizerState::adam(0.01);
            let mut p = vec![Tensor::scalar(0.5)];
            opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            let moved = 0.5 - p[0].item().unwrap();
            assert!((moved - 0.01 * f64::signum(g)).abs() < 1e-6, "g={g} moved={moved}");
        }
    }

    #[test]
    fn adam_on_quadratic() {
        // Scalar simulation of f(p) = p², gradient 2p.
        let mut opt = OptimizerState::adam(0.05);
        let mut p = vec![Tensor::scalar(1.0)];
        let mut prev = 1.0_f64;
        let mut reached = false;
        for step in 0..100 {
            let g = 2.0 * p[0].item().unwrap();
            opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            let cur = p[0].item().unwrap().abs();
            if !reached && step >= 1 {
                assert!(cur < prev, "not decreasing at step {step}");
            }
            if cur < 0.1 {
                reached = true;
            }
            prev = cur;
        }
        assert!(reached);
    }

    #[test]
    fn nan_gradient_refused() {
        let mut opt = OptimizerState::adam(0.1);
        let mut p = vec![Tensor::scalar(1.0)];
        let bad = Tensor::from_parts(vec![], vec![f64::NAN]);
        assert!(matches!(opt.step(&mut p, &[bad]), Err(Error::Numeric { .. })));
        assert_eq!(p[0].item().unwrap(), 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut opt = OptimizerState::adam(0.01);
            let mut p = vec![Tensor::from_vec(vec![0.3, -0.2])];
            for _ in 0..5 {
                opt.step(&mut p, &[Tensor::from_vec(vec![0.7, -1.1])]).unwrap();
            }
            (p, opt)
        };
        assert_eq!(run(), run());
    }
}
