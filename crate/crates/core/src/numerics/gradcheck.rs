//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::{Params, Scalar};

pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compares analytic gradients of `objective` with central differences.
///
/// `objective(model, true)` must zero and repopulate all grads and return the
/// loss; `objective(model, false)` only returns the loss. At most
/// `max_per_param` coordinates per parameter are probed (chosen by `rng`).
pub fn grad_check<M, O, R>(
    model: &mut M,
    mut objective: O,
    max_per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    M: Params<f64>,
    O: FnMut(&mut M, bool) -> Result<f64>,
    R: Rng + ?Sized,
{
    objective(model, true)?;
    let mut probes: Vec<(usize, usize, f64, String)> = Vec::new();
    let mut pidx = 0;
    model.visit_params("", &mut |name, p| {
        let n = p.value.len();
        let picks: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            sample(rng, n, max_per_param).into_vec()
        };
        for i in picks {
            probes.push((pidx, i, p.grad.data()[i], name.to_string()));
        }
        pidx += 1;
    });

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: String::new(), checked: 0 };
    for (pi, ei, analytic, name) in probes {
        let plus = perturbed_loss(model, &mut objective, pi, ei, FD_STEP)?;
        let minus = perturbed_loss(model, &mut objective, pi, ei, -FD_STEP)?;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_param = format!("{}[{}]", name, ei);
        }
        report.checked += 1;
    }
    Ok(report)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn perturbed_loss<M, O>(model: &mut M, objective: &mut O, pi: usize, ei: usize, h: f64) -> Result<f64>
where
    M: Params<f64>,
    O: FnMut(&mut M, bool) -> Result<f64>,
{
    let mut original = 0.0;
    nudge(model, pi, ei, |v| {
        original = *v;
        *v += h;
    });
    let loss = objective(model, false);
    nudge(model, pi, ei, |v| *v = original);
    loss
}

fn nudge<M: Params<f64>>(model: &mut M, pi: usize, ei: usize, mut f: impl FnMut(&mut f64)) {
    let mut idx = 0;
    model.visit_params_mut("", &mut |_, p| {
        if idx == pi {
            f(&mut p.value.data_mut()[ei]);
        }
        idx += 1;
    });
}

/// Central-difference gradient of a plain function of a vector.
pub fn numeric_gradient<F: Scalar>(x: &[F], mut f: impl FnMut(&[F]) -> F) -> Vec<F> {
    let h = F::lit(FD_STEP);
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + h;
            let fp = f(&buf);
            buf[i] = x[i] - h;
            let fm = f(&buf);
            buf[i] = x[i];
            (fp - fm) / (h + h)
        })
        .collect()
}
