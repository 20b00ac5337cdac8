//! Lightweight PReLU/linear network mapping sampled latents into the
//! recognition feature space.

use rand::Rng;

use crate::diffusion::Denoiser;
use crate::error::{config_err, dim_err, Error, Result};
use crate::numerics::ops::{cosine_grad_u, cosine_similarity};
use crate::numerics::optim::{AdamConfig, OptimizerState};
use crate::prompts::PromptVector;
use crate::schedule::{NoiseSchedule, Respacing, StepIndexPlan};
use crate::{seeding, EncoderParams, Mlp, NumericArray, Parameter, Params, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Refiner<F> {
    pub stack: Mlp<F>,
}

impl<F: Scalar> Refiner<F> {
    /// `d_z → hidden → d_f`, PReLU between the two linear layers.
    pub fn new<R: Rng + ?Sized>(d_z: usize, hidden: usize, d_f: usize, rng: &mut R) -> Self {
        Self { stack: Mlp::new(&[d_z, hidden, d_f], false, rng) }
    }

    pub fn d_in(&self) -> usize {
        self.stack.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.stack.d_out()
    }

    /// `f_p = R(ẑ_0)`.
    pub fn refine(&self, z_hat_0: &[F]) -> Result<NumericArray<F>> {
        if z_hat_0.len() != self.d_in() {
            return Err(dim_err(format!("refiner expects width {}, got {}", self.d_in(), z_hat_0.len())));
        }
        let x = NumericArray::from_vec(vec![1, z_hat_0.len()], z_hat_0.to_vec())?;
        self.stack.forward(&x)?.reshape(vec![self.d_out()])
    }

    pub fn refine_batch(&self, z: &NumericArray<F>) -> Result<NumericArray<F>> {
        self.stack.forward(z)
    }
}

impl<F: Scalar> Params<F> for Refiner<F> {
    fn visit_params(&self, prefix: &str, visit: &mut dyn FnMut(&str, &Parameter<F>)) {
        self.stack.visit_params(prefix, visit);
    }

    fn visit_params_mut(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        self.stack.visit_params_mut(prefix, visit);
    }
}

/// `mean_i (1 − cos(outputs_i, targets_i))` and its gradient w.r.t. `outputs`.
pub fn refine_loss<F: Scalar>(outputs: &NumericArray<F>, targets: &NumericArray<F>) -> Result<(F, NumericArray<F>)> {
    if outputs.shape() != targets.shape() {
        return Err(dim_err(format!("outputs {:?} and targets {:?} differ", outputs.shape(), targets.shape())));
    }
    let b = outputs.rows();
    if b == 0 {
        return Err(config_err("refine_loss needs a non-empty batch"));
    }
    let inv_b = F::one() / F::from_usize_lossy(b);
    let mut loss = F::zero();
    let mut grad = NumericArray::zeros(outputs.shape());
    for i in 0..b {
        let (u, v) = (outputs.row(i), targets.row(i));
        loss += (F::one() - cosine_similarity(u, v)?) * inv_b;
        cosine_grad_u(u, v, -inv_b, grad.row_mut(i))?;
    }
    Ok((loss, grad))
}

/// Loss through the refiner; accumulates parameter grads when `grads` is set.
pub fn refiner_loss_and_grad<F: Scalar>(
    refiner: &mut Refiner<F>,
    z_hat_0: &NumericArray<F>,
    targets: &NumericArray<F>,
    grad_scale: Option<F>,
) -> Result<F> {
    let (out, tape) = refiner.stack.forward_tape(z_hat_0)?;
    let (loss, g) = refine_loss(&out, targets)?;
    if let Some(s) = grad_scale {
        refiner.stack.backward(&tape, &g.scale(s))?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerTrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub max_steps: usize,
    pub max_grad_norm: f64,
    pub ema_decay: f64,
    pub respacing: Respacing,
    pub seed: u64,
}

impl Default for RefinerTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            learning_rate: 1e-4,
            batch_size: 4,
            grad_accum_steps: 4,
            max_steps: 2000,
            max_grad_norm: 1.0,
            ema_decay: 0.999,
            respacing: Respacing::Cumulative,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefinerRun<F> {
    pub refiner: Refiner<F>,
    pub losses: Vec<F>,
}

/// Trains `R` against frozen encoder features, sampling a fresh `ẑ_0` for
/// every item of every batch from the frozen denoiser.
#[allow(clippy::too_many_arguments)]
pub fn train_refiner<F: Scalar>(
    denoiser: &Denoiser<F>,
    encoder: &EncoderParams<F>,
    images: &NumericArray<F>,
    prompts: &[PromptVector],
    sched: &NoiseSchedule<F>,
    plan: &StepIndexPlan,
    cfg: &RefinerTrainConfig,
) -> Result<RefinerRun<F>> {
    let n = images.rows();
    if n == 0 || prompts.len() != n {
        return Err(config_err("refiner training needs one prompt per image and at least one image"));
    }
    if cfg.batch_size == 0 || cfg.grad_accum_steps == 0 || cfg.max_steps == 0 || cfg.hidden == 0 {
        return Err(config_err("refiner batch_size, grad_accum_steps, max_steps and hidden must be positive"));
    }
    if denoiser.d_z() != encoder.d_z() {
        return Err(dim_err("denoiser and encoder latent widths differ"));
    }
    let targets = encoder.encode_batch(images)?;
    let mut rng = seeding::rng(seeding::stage_seed(cfg.seed, "refiner"));
    let mut refiner = Refiner::new(encoder.d_z(), cfg.hidden, encoder.d_f(), &mut rng);
    let mut opt = OptimizerState::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        max_grad_norm: cfg.max_grad_norm,
        ema_decay: cfg.ema_decay,
        ..AdamConfig::default()
    });
    let accum = F::from_usize_lossy(cfg.grad_accum_steps);
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let micro = cfg.batch_size * cfg.grad_accum_steps;
    for step in 0..cfg.max_steps {
        let idx: Vec<usize> = (0..micro).map(|_| rng.gen_range(0..n)).collect();
        let batch_prompts: Vec<PromptVector> = idx.iter().map(|&i| prompts[i].clone()).collect();
        let mut item_rngs = seeding::item_rngs(rng.gen(), 0, micro);
        let z_hat = denoiser.sample_latents(&batch_prompts, sched, plan, cfg.respacing, &mut item_rngs)?;
        refiner.zero_grads();
        let mut total = F::zero();
        for chunk in 0..cfg.grad_accum_steps {
            let rows: Vec<usize> = (chunk * cfg.batch_size..(chunk + 1) * cfg.batch_size).collect();
            let z = NumericArray::stack_rows(&rows.iter().map(|&r| z_hat.row(r)).collect::<Vec<_>>())?;
            let t = NumericArray::stack_rows(&rows.iter().map(|&r| targets.row(idx[r])).collect::<Vec<_>>())?;
            total += refiner_loss_and_grad(&mut refiner, &z, &t, Some(F::one() / accum))?;
        }
        let loss = total / accum;
        if !loss.is_finite() || !refiner.grads_finite() {
            return Err(Error::Divergence(format!("refiner loss {} at step {}", loss, step)));
        }
        opt.clip_and_step(&mut refiner);
        losses.push(loss);
    }
    Ok(RefinerRun { refiner, losses })
}
