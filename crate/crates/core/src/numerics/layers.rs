//! Linear and PReLU layers and the multilayer perceptron built from them.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::numerics::ops::{matmul, matmul_nt, matmul_tn, prelu, prelu_backward};
use crate::numerics::param::join;
use crate::{NumericArray, Parameter, Params, Scalar};

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Parameter<F>,
    pub bias: Parameter<F>,
}

impl<F: Scalar> Linear<F> {
    /// He-normal initialization, zero bias.
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = F::lit((2.0 / d_in as f64).sqrt());
        Self::from_weights(NumericArray::randn(&[d_in, d_out], std, rng), NumericArray::zeros(&[d_out]))
    }

    pub fn from_weights(weight: NumericArray<F>, bias: NumericArray<F>) -> Self {
        Self { weight: Parameter::new(weight), bias: Parameter::new(bias) }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self::from_weights(NumericArray::zeros(&[d_in, d_out]), NumericArray::zeros(&[d_out]))
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &NumericArray<F>) -> Result<NumericArray<F>> {
        let (_, c) = x.dims2()?;
        if c != self.d_in() {
            return Err(dim_err(format!("linear layer expects width {}, got {}", self.d_in(), c)));
        }
        let mut y = matmul(x, &self.weight.value)?;
        let b = self.bias.value.data();
        for i in 0..y.rows() {
            for (v, &bj) in y.row_mut(i).iter_mut().zip(b) {
                *v += bj;
            }
        }
        Ok(y)
    }

    /// Accumulates weight and bias gradients; returns `∂L/∂x`.
    pub fn backward(&mut self, x: &NumericArray<F>, gy: &NumericArray<F>) -> Result<NumericArray<F>> {
        let gw = matmul_tn(x, gy)?;
        self.weight.grad.axpy(F::one(), &gw)?;
        let gb = self.bias.grad.data_mut();
        for i in 0..gy.rows() {
            for (b, &g) in gb.iter_mut().zip(gy.row(i)) {
                *b += g;
            }
        }
        matmul_nt(gy, &self.weight.value)
    }
}

impl<F: Scalar> Params<F> for Linear<F> {
    fn visit_params(&self, prefix: &str, visit: &mut dyn FnMut(&str, &Parameter<F>)) {
        visit(&join(prefix, "weight"), &self.weight);
        visit(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        visit(&join(prefix, "weight"), &mut self.weight);
        visit(&join(prefix, "bias"), &mut self.bias);
    }
}

/// PReLU with a single learned slope shared across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PRelu<F> {
    pub slope: Parameter<F>,
}

impl<F: Scalar> PRelu<F> {
    pub fn new(slope: F) -> Self {
        Self { slope: Parameter::new(NumericArray::scalar(slope)) }
    }

    pub fn slope(&self) -> F {
        self.slope.value.data()[0]
    }

    pub fn forward(&self, x: &NumericArray<F>) -> NumericArray<F> {
        prelu(x, self.slope())
    }

    pub fn backward(&mut self, x: &NumericArray<F>, gy: &NumericArray<F>) -> Result<NumericArray<F>> {
        let (gx, gs) = prelu_backward(x, self.slope(), gy)?;
        self.slope.grad.data_mut()[0] += gs;
        Ok(gx)
    }
}

impl<F: Scalar> Params<F> for PRelu<F> {
    fn visit_params(&self, prefix: &str, visit: &mut dyn FnMut(&str, &Parameter<F>)) {
        visit(&join(prefix, "slope"), &self.slope);
    }

    fn visit_params_mut(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        visit(&join(prefix, "slope"), &mut self.slope);
    }
}

/// A linear layer optionally followed by PReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub linear: Linear<F>,
    pub act: Option<PRelu<F>>,
}

/// Stack of [`Dense`] layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub layers: Vec<Dense<F>>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape<F> {
    inputs: Vec<NumericArray<F>>,
    pre_act: Vec<NumericArray<F>>,
}

pub const DEFAULT_PRELU_SLOPE: f64 = 0.25;

impl<F: Scalar> Mlp<F> {
    /// `dims = [d_in, h_1, ..., d_out]`. Hidden layers get PReLU; the last one
    /// gets it only when `act_on_output` is set.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], act_on_output: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| Dense {
                linear: Linear::new(dims[i], dims[i + 1], rng),
                act: (i + 1 < n || act_on_output).then(|| PRelu::new(F::lit(DEFAULT_PRELU_SLOPE))),
            })
            .collect();
        Self { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].linear.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].linear.d_out()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_in()];
        w.extend(self.layers.iter().map(|l| l.linear.d_out()));
        w
    }

    pub fn forward(&self, x: &NumericArray<F>) -> Result<NumericArray<F>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.linear.forward(&h)?;
            if let Some(act) = &layer.act {
                h = act.forward(&h);
            }
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: &NumericArray<F>) -> Result<(NumericArray<F>, MlpTape<F>)> {
        let mut tape = MlpTape { inputs: Vec::new(), pre_act: Vec::new() };
        let mut h = x.clone();
        for layer in &self.layers {
            let z = layer.linear.forward(&h)?;
            tape.inputs.push(h);
            h = match &layer.act {
                Some(act) => act.forward(&z),
                None => z.clone(),
            };
            tape.pre_act.push(z);
        }
        Ok((h, tape))
    }

    pub fn backward(&mut self, tape: &MlpTape<F>, gy: &NumericArray<F>) -> Result<NumericArray<F>> {
        let mut g = gy.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            if let Some(act) = &mut layer.act {
                g = act.backward(&tape.pre_act[i], &g)?;
            }
            g = layer.linear.backward(&tape.inputs[i], &g)?;
        }
        Ok(g)
    }

    /// Scales the final layer's weights and bias by `c`.
    pub fn scale_output(&mut self, c: F) {
        let last = self.layers.last_mut().expect("non-empty mlp");
        last.linear.weight.value = last.linear.weight.value.scale(c);
        last.linear.bias.value = last.linear.bias.value.scale(c);
    }
}

impl<F: Scalar> Params<F> for Mlp<F> {
    fn visit_params(&self, prefix: &str, visit: &mut dyn FnMut(&str, &Parameter<F>)) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("{}", i));
            l.linear.visit_params(&p, visit);
            if let Some(a) = &l.act {
                a.visit_params(&p, visit);
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("{}", i));
            l.linear.visit_params_mut(&p, visit);
            if let Some(a) = &mut l.act {
                a.visit_params_mut(&p, visit);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hidden_layers_get_prelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m: Mlp<f64> = Mlp::new(&[4, 8, 3], false, &mut rng);
        assert!(m.layers[0].act.is_some());
        assert!(m.layers[1].act.is_none());
        assert_eq!(m.widths(), vec![4, 8, 3]);
        let names = {
            let mut v = Vec::new();
            m.visit_params("net", &mut |n, _| v.push(n.to_string()));
            v
        };
        assert_eq!(names, ["net.0.weight", "net.0.bias", "net.0.slope", "net.1.weight", "net.1.bias"]);
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let l: Linear<f64> = Linear::zeros(3, 2);
        assert!(l.forward(&NumericArray::zeros(&[1, 4])).is_err());
    }
}
