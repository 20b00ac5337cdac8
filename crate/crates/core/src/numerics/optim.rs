//! Gradient clipping and Adam with a weight moving average.

use crate::{NumericArray, Params, Scalar};

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
///
/// Returns the norm measured before clipping.
pub fn clip_grad_norm<F: Scalar, P: Params<F> + ?Sized>(params: &mut P, max_norm: F) -> F {
    let mut sq = F::zero();
    params.visit_params("", &mut |_, p| sq += p.grad.sum_sq());
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        params.visit_params_mut("", &mut |_, p| {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        });
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: f64,
    pub ema_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: 1.0,
            ema_decay: 0.999,
        }
    }
}

/// Adam moments for one parameter set, matched to it by visit order.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<(NumericArray<F>, NumericArray<F>)>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(config: AdamConfig) -> Self {
        assert!(config.learning_rate > 0.0, "learning rate must be positive");
        assert!(config.max_grad_norm > 0.0, "max grad norm must be positive");
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One bias-corrected Adam update followed by the EMA update; zeroes all grads.
    pub fn step<P: Params<F> + ?Sized>(&mut self, params: &mut P) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let bc1 = F::one() - F::lit(c.beta1.powi(self.step as i32));
        let bc2 = F::one() - F::lit(c.beta2.powi(self.step as i32));
        let lr = F::lit(c.learning_rate);
        let eps = F::lit(c.eps);
        let decay = F::lit(c.ema_decay);
        let moments = &mut self.moments;
        let mut idx = 0;
        params.visit_params_mut("", &mut |_, p| {
            if moments.len() <= idx {
                moments.push((NumericArray::zeros(p.shape()), NumericArray::zeros(p.shape())));
            }
            let (m, v) = &mut moments[idx];
            debug_assert_eq!(m.shape(), p.shape(), "optimizer state out of sync with parameters");
            let md = m.data_mut();
            let vd = v.data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                md[i] = b1 * md[i] + (F::one() - b1) * g[i];
                vd[i] = b2 * vd[i] + (F::one() - b2) * g[i] * g[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            for (e, &w) in p.ema.data_mut().iter_mut().zip(p.value.data()) {
                *e = decay * *e + (F::one() - decay) * w;
            }
            p.zero_grad();
            idx += 1;
        });
    }

    /// Clips to `max_grad_norm`, then steps. Returns the pre-clip norm.
    pub fn clip_and_step<P: Params<F> + ?Sized>(&mut self, params: &mut P) -> F {
        let norm = clip_grad_norm(params, F::lit(self.config.max_grad_norm));
        self.step(params);
        norm
    }
}
