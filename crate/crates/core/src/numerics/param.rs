use crate::{NumericArray, Scalar};

/// Trainable tensor with its accumulated gradient and an exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F> {
    pub value: NumericArray<F>,
    pub grad: NumericArray<F>,
    pub ema: NumericArray<F>,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(value: NumericArray<F>) -> Self {
        let grad = NumericArray::zeros(value.shape());
        let ema = value.clone();
        Self { value, grad, ema }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Anything that owns trainable parameters.
///
/// Visitors see parameters in a fixed order with stable dotted names; optimizer
/// state, checkpoints and fingerprints all rely on that order.
pub trait Params<F: Scalar> {
    fn visit_params(&self, prefix: &str, visit: &mut dyn FnMut(&str, &Parameter<F>));
    fn visit_params_mut(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Parameter<F>));

    fn zero_grads(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }

    /// Replaces every value with its moving average.
    fn load_ema(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.value = p.ema.clone());
    }

    fn grads_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params("", &mut |_, p| ok &= p.grad.is_finite());
        ok
    }

    fn values_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params("", &mut |_, p| ok &= p.value.is_finite());
        ok
    }

    /// FNV-1a hash over the bit patterns of every value, in visit order.
    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit_params("", &mut |name, p| {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in p.value.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        });
        h
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{}.{}", prefix, name)
    }
}
