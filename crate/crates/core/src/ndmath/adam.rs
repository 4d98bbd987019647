use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Gradients, Params, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for every parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
}

impl AdamState {
    pub fn new(params: &Params, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor2> = params
            .ids()
            .map(|id| {
                let p = params.get(id);
                Tensor2::zeros(p.rows(), p.cols())
            })
            .collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("adam_step", "parameter count mismatch"));
        }
        for id in params.ids() {
            if params.get(id).shape() != grads.get(id).shape()
                || self.m[id.0].shape() != params.get(id).shape()
            {
                return Err(Error::shape(
                    "adam_step",
                    format!("tensor `{}`", params.name(id)),
                ));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in params.ids() {
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(x: f64) -> Params {
        let mut p = Params::new();
        p.add("x", Tensor2::scalar(x));
        p
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = scalar_params(0.0);
        let mut state = AdamState::new(&p, AdamConfig::default());
        let mut tape_params = Gradients::zeros_like(&p);
        // g = 0.5 through a tape-free route: build the gradient buffer by hand
        {
            let mut tape = crate::ndmath::Tape::new(&p);
            let x = tape.param(crate::ndmath::ParamId(0));
            let y = tape.scale(x, 0.5);
            tape.backward(y, &mut tape_params).unwrap();
        }
        state.step(&mut p, &tape_params).unwrap();
        assert_eq!(state.t, 1);
        let expected = -0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p.get(crate::ndmath::ParamId(0)).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_params(1.25);
        let g = Gradients::zeros_like(&p);
        let mut state = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            state.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.get(crate::ndmath::ParamId(0)).item(), 1.25);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = scalar_params(0.3);
            let mut state = AdamState::new(&p, AdamConfig::default());
            for i in 0..10 {
                let mut g = Gradients::zeros_like(&p);
                let mut tape = crate::ndmath::Tape::new(&p);
                let x = tape.param(crate::ndmath::ParamId(0));
                let y = tape.scale(x, 0.1 * i as f64 - 0.4);
                tape.backward(y, &mut g).unwrap();
                drop(tape);
                state.step(&mut p, &g).unwrap();
            }
            (p, state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar_params(0.0);
        let mut other = Params::new();
        other.add("x", Tensor2::zeros(2, 2));
        let g = Gradients::zeros_like(&other);
        let mut state = AdamState::new(&p, AdamConfig::default());
        assert!(state.step(&mut p, &g).is_err());
    }
}
