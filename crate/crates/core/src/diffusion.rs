//! Prompt-conditioned noise predictor, its training loop and the reverse sampler.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, dim_err, Error, Result};
use crate::numerics::optim::{AdamConfig, OptimizerState};
use crate::numerics::param::join;
use crate::prompts::{PromptEmbedder, PromptVector};
use crate::schedule::{NoiseSchedule, Respacing, StepCoefficients, StepIndexPlan};
use crate::{seeding, EncoderParams, Mlp, MlpTape, NumericArray, Parameter, Params, Scalar};

/// Sinusoidal embedding of `t` as interleaved `(sin(t/ω_k), cos(t/ω_k))`
/// pairs with `ω_k` geometric from 1 to 10⁴. Defined for any real `t`.
pub fn sinusoid<F: Scalar>(t: f64, d_t: usize) -> Vec<F> {
    let half = d_t / 2;
    let mut out = Vec::with_capacity(d_t);
    for k in 0..half {
        let omega = if half > 1 { 1e4f64.powf(k as f64 / (half - 1) as f64) } else { 1.0 };
        out.push(F::lit((t / omega).sin()));
        out.push(F::lit((t / omega).cos()));
    }
    if d_t % 2 == 1 {
        out.push(F::zero());
    }
    out
}

/// Time embedding for a valid step `1..=t_max`.
pub fn time_embed<F: Scalar>(t: usize, d_t: usize, t_max: usize) -> Result<NumericArray<F>> {
    if t == 0 || t > t_max {
        return Err(Error::Index { t, max: t_max });
    }
    Ok(NumericArray::vector(sinusoid(t as f64, d_t)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserArch {
    pub d_z: usize,
    pub d_t: usize,
    pub d_p: usize,
    pub d_c: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub attr_count: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self { d_z: 32, d_t: 32, d_p: 8, d_c: 64, hidden: 256, hidden_layers: 3, attr_count: 18 }
    }
}

/// Anything that predicts the noise in `z_t` given step and prompt.
pub trait NoisePredictor<F: Scalar> {
    fn latent_dim(&self) -> usize;

    /// `z_t: [B × d_z]`, one step index and prompt per row.
    fn predict(&self, z_t: &NumericArray<F>, ts: &[usize], prompts: &[PromptVector]) -> Result<NumericArray<F>>;
}

/// `D_θ(z_t, t, p) = trunk([z_t, time_embed(t), embed(p)])`.
///
/// Operates on standardized latents; `latent_mean`/`latent_std` map between
/// encoder latents and the unit-scale space the diffusion runs in.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<F> {
    /// `[T × d_t]`, row `t-1` holds the embedding of step `t`. Not trained.
    pub time_table: NumericArray<F>,
    pub trunk: Mlp<F>,
    pub embedder: PromptEmbedder<F>,
    pub latent_mean: NumericArray<F>,
    pub latent_std: NumericArray<F>,
}

struct DenoiserTape<F> {
    trunk: MlpTape<F>,
    gathered: NumericArray<F>,
}

impl<F: Scalar> Denoiser<F> {
    pub fn new<R: Rng + ?Sized>(arch: &DenoiserArch, t_max: usize, rng: &mut R) -> Self {
        let mut time_table = NumericArray::zeros(&[t_max, arch.d_t]);
        for t in 1..=t_max {
            time_table.row_mut(t - 1).copy_from_slice(&sinusoid::<F>(t as f64, arch.d_t));
        }
        let mut widths = vec![arch.d_z + arch.d_t + arch.d_c];
        widths.extend(std::iter::repeat(arch.hidden).take(arch.hidden_layers));
        widths.push(arch.d_z);
        let trunk = Mlp::new(&widths, false, rng);
        let embedder = PromptEmbedder::new(arch.attr_count, arch.d_p, arch.d_c, rng);
        Self {
            time_table,
            trunk,
            embedder,
            latent_mean: NumericArray::zeros(&[arch.d_z]),
            latent_std: NumericArray::full(&[arch.d_z], F::one()),
        }
    }

    pub fn t_max(&self) -> usize {
        self.time_table.rows()
    }

    pub fn d_z(&self) -> usize {
        self.trunk.d_out()
    }

    pub fn d_t(&self) -> usize {
        self.time_table.cols()
    }

    /// Sets the standardization from a `[N × d_z]` set of encoder latents.
    pub fn fit_latent_stats(&mut self, z0: &NumericArray<F>) -> Result<()> {
        let (n, d) = z0.dims2()?;
        if d != self.d_z() || n == 0 {
            return Err(dim_err("latent statistics need a non-empty [N × d_z] matrix"));
        }
        let nf = F::from_usize_lossy(n);
        let mut mean = vec![F::zero(); d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(z0.row(i)) {
                *m += v / nf;
            }
        }
        let mut var = vec![F::zero(); d];
        for i in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(z0.row(i)).zip(&mean) {
                *s += (v - m) * (v - m) / nf;
            }
        }
        let floor = F::lit(1e-6);
        self.latent_mean = NumericArray::vector(mean);
        self.latent_std = NumericArray::vector(var.into_iter().map(|v| v.sqrt().max(floor)).collect());
        Ok(())
    }

    pub fn standardize(&self, z: &NumericArray<F>) -> Result<NumericArray<F>> {
        self.affine_rows(z, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&self, z: &NumericArray<F>) -> Result<NumericArray<F>> {
        self.affine_rows(z, |v, m, s| v * s + m)
    }

    fn affine_rows(&self, z: &NumericArray<F>, f: impl Fn(F, F, F) -> F) -> Result<NumericArray<F>> {
        let (n, d) = z.dims2()?;
        if d != self.d_z() {
            return Err(dim_err(format!("latent width {} differs from {}", d, self.d_z())));
        }
        let mut out = z.clone();
        let (m, s) = (self.latent_mean.data(), self.latent_std.data());
        for i in 0..n {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = f(*v, m[j], s[j]);
            }
        }
        Ok(out)
    }

    fn inputs(&self, z_t: &NumericArray<F>, ts: &[usize], cond: &NumericArray<F>) -> Result<NumericArray<F>> {
        let (b, d) = z_t.dims2()?;
        if d != self.d_z() {
            return Err(dim_err(format!("z_t width {} differs from latent dimension {}", d, self.d_z())));
        }
        if ts.len() != b {
            return Err(dim_err(format!("{} time steps for {} rows", ts.len(), b)));
        }
        let mut temb = NumericArray::zeros(&[b, self.d_t()]);
        for (i, &t) in ts.iter().enumerate() {
            if t == 0 || t > self.t_max() {
                return Err(Error::Index { t, max: self.t_max() });
            }
            temb.row_mut(i).copy_from_slice(self.time_table.row(t - 1));
        }
        NumericArray::concat_cols(&[z_t, &temb, cond])
    }

    fn check_prompts(&self, b: usize, prompts: &[PromptVector]) -> Result<()> {
        if prompts.len() != b {
            return Err(dim_err(format!("{} prompts for {} rows", prompts.len(), b)));
        }
        Ok(())
    }

    fn forward_tape(
        &self,
        z_t: &NumericArray<F>,
        ts: &[usize],
        prompts: &[PromptVector],
    ) -> Result<(NumericArray<F>, DenoiserTape<F>)> {
        self.check_prompts(z_t.rows(), prompts)?;
        let (cond, gathered) = self.embedder.embed_tape(prompts)?;
        let x = self.inputs(z_t, ts, &cond)?;
        let (y, trunk) = self.trunk.forward_tape(&x)?;
        Ok((y, DenoiserTape { trunk, gathered }))
    }

    fn backward(&mut self, tape: &DenoiserTape<F>, prompts: &[PromptVector], gy: &NumericArray<F>) -> Result<()> {
        let gx = self.trunk.backward(&tape.trunk, gy)?;
        let parts = gx.split_cols(&[self.d_z(), self.d_t(), self.embedder.d_c()])?;
        self.embedder.backward(prompts, &tape.gathered, &parts[2])
    }

    /// Single-item prediction.
    pub fn denoise(&self, z_t: &[F], t: usize, p: &PromptVector) -> Result<NumericArray<F>> {
        let z = NumericArray::from_vec(vec![1, z_t.len()], z_t.to_vec())?;
        self.predict(&z, &[t], std::slice::from_ref(p))?.reshape(vec![self.d_z()])
    }

    /// Draws `ẑ_0` for each prompt and maps it back to encoder-latent scale.
    pub fn sample_latents<R: Rng>(
        &self,
        prompts: &[PromptVector],
        sched: &NoiseSchedule<F>,
        plan: &StepIndexPlan,
        respacing: Respacing,
        rngs: &mut [R],
    ) -> Result<NumericArray<F>> {
        let z = sample(self, prompts, sched, plan, respacing, rngs)?;
        self.destandardize(&z)
    }
}

impl<F: Scalar> NoisePredictor<F> for Denoiser<F> {
    fn latent_dim(&self) -> usize {
        self.d_z()
    }

    fn predict(&self, z_t: &NumericArray<F>, ts: &[usize], prompts: &[PromptVector]) -> Result<NumericArray<F>> {
        self.check_prompts(z_t.rows(), prompts)?;
        let cond = self.embedder.embed(prompts)?;
        self.trunk.forward(&self.inputs(z_t, ts, &cond)?)
    }
}

impl<F: Scalar> Params<F> for Denoiser<F> {
    fn visit_params(&self, prefix: &str, visit: &mut dyn FnMut(&str, &Parameter<F>)) {
        self.trunk.visit_params(&join(prefix, "trunk"), visit);
        self.embedder.visit_params(&join(prefix, "embedder"), visit);
    }

    fn visit_params_mut(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        self.trunk.visit_params_mut(&join(prefix, "trunk"), visit);
        self.embedder.visit_params_mut(&join(prefix, "embedder"), visit);
    }
}

/// `mean_i ‖pred_i − ε_i‖²` with `z_t` formed in closed form from the given
/// steps and noise. Works with any predictor; no gradients.
pub fn ldm_loss_with<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    predictor: &P,
    z0: &NumericArray<F>,
    prompts: &[PromptVector],
    ts: &[usize],
    eps: &NumericArray<F>,
    sched: &NoiseSchedule<F>,
) -> Result<F> {
    let z_t = noised(z0, ts, eps, sched)?;
    let pred = predictor.predict(&z_t, ts, prompts)?;
    Ok(pred.sub(eps)?.sum_sq() / F::from_usize_lossy(z0.rows()))
}

fn noised<F: Scalar>(z0: &NumericArray<F>, ts: &[usize], eps: &NumericArray<F>, sched: &NoiseSchedule<F>) -> Result<NumericArray<F>> {
    if z0.shape() != eps.shape() {
        return Err(dim_err("z0 and eps shapes differ"));
    }
    if ts.len() != z0.rows() {
        return Err(dim_err(format!("{} time steps for {} rows", ts.len(), z0.rows())));
    }
    let mut z_t = z0.clone();
    for (i, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t)?;
        let (ca, cn) = (ab.sqrt(), (F::one() - ab).sqrt());
        let e = eps.row(i);
        for (z, &ev) in z_t.row_mut(i).iter_mut().zip(e) {
            *z = ca * *z + cn * ev;
        }
    }
    Ok(z_t)
}

/// LDM loss on explicit `(t, ε)`; when `grad_scale` is set, accumulates
/// `grad_scale · ∂L/∂θ` into the denoiser's grads.
pub fn ldm_loss_and_grad<F: Scalar>(
    model: &mut Denoiser<F>,
    z0: &NumericArray<F>,
    prompts: &[PromptVector],
    ts: &[usize],
    eps: &NumericArray<F>,
    sched: &NoiseSchedule<F>,
    grad_scale: Option<F>,
) -> Result<F> {
    let z_t = noised(z0, ts, eps, sched)?;
    let (pred, tape) = model.forward_tape(&z_t, ts, prompts)?;
    let diff = pred.sub(eps)?;
    let inv_b = F::one() / F::from_usize_lossy(z0.rows());
    let loss = diff.sum_sq() * inv_b;
    if let Some(s) = grad_scale {
        let gy = diff.scale((F::one() + F::one()) * inv_b * s);
        model.backward(&tape, prompts, &gy)?;
    }
    Ok(loss)
}

/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` per row.
pub fn draw_noise<F: Scalar, R: Rng + ?Sized>(
    rows: usize,
    d_z: usize,
    t_max: usize,
    rng: &mut R,
) -> (Vec<usize>, NumericArray<F>) {
    let ts = (0..rows).map(|_| rng.gen_range(1..=t_max)).collect();
    let eps = NumericArray::randn(&[rows, d_z], F::one(), rng);
    (ts, eps)
}

/// Monte-Carlo LDM loss for a batch of standardized latents.
pub fn ldm_loss<F: Scalar, P: NoisePredictor<F> + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    z0: &NumericArray<F>,
    prompts: &[PromptVector],
    sched: &NoiseSchedule<F>,
    rng: &mut R,
) -> Result<F> {
    if z0.rows() == 0 {
        return Err(config_err("ldm_loss needs a non-empty batch"));
    }
    let (ts, eps) = draw_noise(z0.rows(), z0.cols(), sched.t_max(), rng);
    ldm_loss_with(predictor, z0, prompts, &ts, &eps, sched)
}

/// `z_{t−1} = (z_t − β/√(1−ᾱ) · ε̂) / √α + σ·η`, with `η` omitted when `None`.
pub fn reverse_update<F: Scalar>(z_t: &[F], eps_hat: &[F], c: &StepCoefficients<F>, eta: Option<&[F]>) -> Vec<F> {
    let k = c.beta / (F::one() - c.alpha_bar).sqrt();
    let inv = F::one() / c.alpha.sqrt();
    z_t.iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (&z, &e))| {
            let mean = (z - k * e) * inv;
            match eta {
                Some(n) => mean + c.sigma * n[i],
                None => mean,
            }
        })
        .collect()
}

/// One reverse step for a batch at step `t`. Noise is drawn from row `i`'s
/// generator only when `t > 1`.
pub fn sample_step<F: Scalar, P: NoisePredictor<F> + ?Sized, R: Rng>(
    predictor: &P,
    z_t: &NumericArray<F>,
    t: usize,
    prompts: &[PromptVector],
    coeffs: &StepCoefficients<F>,
    rngs: &mut [R],
) -> Result<NumericArray<F>> {
    let (b, d) = z_t.dims2()?;
    if rngs.len() != b {
        return Err(dim_err(format!("{} generators for {} rows", rngs.len(), b)));
    }
    let ts = vec![t; b];
    let eps_hat = predictor.predict(z_t, &ts, prompts)?;
    let mut out = Vec::with_capacity(b * d);
    for (i, rng) in rngs.iter_mut().enumerate() {
        let eta: Option<Vec<F>> = (t > 1).then(|| (0..d).map(|_| F::lit(rng.sample(StandardNormal))).collect());
        out.extend(reverse_update(z_t.row(i), eps_hat.row(i), coeffs, eta.as_deref()));
    }
    NumericArray::from_vec(vec![b, d], out)
}

/// Draws `ẑ_T ~ N(0, I)` per row and walks the plan down to `ẑ_0`.
pub fn sample<F: Scalar, P: NoisePredictor<F> + ?Sized, R: Rng>(
    predictor: &P,
    prompts: &[PromptVector],
    sched: &NoiseSchedule<F>,
    plan: &StepIndexPlan,
    respacing: Respacing,
    rngs: &mut [R],
) -> Result<NumericArray<F>> {
    let b = prompts.len();
    if rngs.len() != b {
        return Err(dim_err(format!("{} generators for {} prompts", rngs.len(), b)));
    }
    let d = predictor.latent_dim();
    let mut z = NumericArray::zeros(&[b, d]);
    for (i, rng) in rngs.iter_mut().enumerate() {
        for v in z.row_mut(i) {
            *v = F::lit(rng.sample(StandardNormal));
        }
    }
    for (t, c) in plan.coefficients(sched, respacing)? {
        z = sample_step(predictor, &z, t, prompts, &c, rngs)?;
    }
    Ok(z)
}

/// Encoder latents paired with their prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDataset<F> {
    /// `[N × d_z]` at encoder scale.
    pub z0: NumericArray<F>,
    pub prompts: Vec<PromptVector>,
}

impl<F: Scalar> LatentDataset<F> {
    /// `z0 = E_z(x)` for every image row.
    pub fn from_encoder(encoder: &EncoderParams<F>, images: &NumericArray<F>, prompts: Vec<PromptVector>) -> Result<Self> {
        if images.rows() != prompts.len() {
            return Err(dim_err(format!("{} images for {} prompts", images.rows(), prompts.len())));
        }
        Ok(Self { z0: encoder.encode_z_batch(images)?, prompts })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTrainConfig {
    pub arch: DenoiserArch,
    pub learning_rate: f64,
    pub finetune_rate: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    /// Optimizer steps; each consumes `batch_size × grad_accum_steps` items.
    pub max_steps: usize,
    pub finetune_steps: usize,
    pub ema_decay: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            arch: DenoiserArch::default(),
            learning_rate: 1e-4,
            finetune_rate: 5e-5,
            batch_size: 4,
            grad_accum_steps: 4,
            max_steps: 4000,
            finetune_steps: 0,
            ema_decay: 0.999,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.finetune_rate > 0.0 && self.max_grad_norm > 0.0) {
            return Err(config_err("diffusion rates and max_grad_norm must be positive"));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.max_steps == 0 {
            return Err(config_err("batch_size, grad_accum_steps and max_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err("ema_decay must lie in [0, 1)"));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { learning_rate: lr, max_grad_norm: self.max_grad_norm, ema_decay: self.ema_decay, ..AdamConfig::default() }
    }
}

/// State of a diffusion training run.
#[derive(Debug, Clone)]
pub struct DiffusionRun<F> {
    /// Live weights; each parameter's `ema` field holds the averaged copy.
    pub model: Denoiser<F>,
    pub optimizer: OptimizerState<F>,
    /// Mean loss of every optimizer step.
    pub losses: Vec<F>,
}

impl<F: Scalar> DiffusionRun<F> {
    /// Model with the averaged weights, used for sampling.
    pub fn served(&self) -> Denoiser<F> {
        let mut m = self.model.clone();
        m.load_ema();
        m
    }
}

/// Trains a fresh denoiser on latents of the frozen encoder.
pub fn train_diffusion<F: Scalar>(
    encoder: &EncoderParams<F>,
    images: &NumericArray<F>,
    prompts: Vec<PromptVector>,
    sched: &NoiseSchedule<F>,
    cfg: &DiffusionTrainConfig,
) -> Result<DiffusionRun<F>> {
    let data = LatentDataset::from_encoder(encoder, images, prompts)?;
    train_diffusion_on_latents(&data, sched, cfg)
}

pub fn train_diffusion_on_latents<F: Scalar>(
    data: &LatentDataset<F>,
    sched: &NoiseSchedule<F>,
    cfg: &DiffusionTrainConfig,
) -> Result<DiffusionRun<F>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(config_err("diffusion training set is empty"));
    }
    if data.z0.cols() != cfg.arch.d_z {
        return Err(dim_err(format!("latents have width {}, arch expects {}", data.z0.cols(), cfg.arch.d_z)));
    }
    let mut init_rng = seeding::rng(seeding::stage_seed(cfg.seed, "denoiser-init"));
    let mut model = Denoiser::new(&cfg.arch, sched.t_max(), &mut init_rng);
    model.fit_latent_stats(&data.z0)?;
    let mut run = DiffusionRun { model, optimizer: OptimizerState::new(cfg.adam(cfg.learning_rate)), losses: Vec::new() };
    run_steps(&mut run, data, sched, cfg, cfg.max_steps, seeding::stage_seed(cfg.seed, "denoiser-steps"))?;
    Ok(run)
}

/// Continues a run at `finetune_rate` for `finetune_steps`.
pub fn finetune_diffusion<F: Scalar>(
    run: &mut DiffusionRun<F>,
    data: &LatentDataset<F>,
    sched: &NoiseSchedule<F>,
    cfg: &DiffusionTrainConfig,
) -> Result<()> {
    cfg.validate()?;
    run.optimizer.set_learning_rate(cfg.finetune_rate);
    run_steps(run, data, sched, cfg, cfg.finetune_steps, seeding::stage_seed(cfg.seed, "denoiser-finetune"))
}

fn run_steps<F: Scalar>(
    run: &mut DiffusionRun<F>,
    data: &LatentDataset<F>,
    sched: &NoiseSchedule<F>,
    cfg: &DiffusionTrainConfig,
    steps: usize,
    seed: u64,
) -> Result<()> {
    let z0n = run.model.standardize(&data.z0)?;
    let mut rng = seeding::rng(seed);
    let accum = F::from_usize_lossy(cfg.grad_accum_steps);
    let scale = F::one() / accum;
    let d_z = run.model.d_z();
    for step in 0..steps {
        run.model.zero_grads();
        let mut total = F::zero();
        for _ in 0..cfg.grad_accum_steps {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..data.len())).collect();
            let rows: Vec<&[F]> = idx.iter().map(|&i| z0n.row(i)).collect();
            let z0 = NumericArray::stack_rows(&rows)?;
            let prompts: Vec<PromptVector> = idx.iter().map(|&i| data.prompts[i].clone()).collect();
            let (ts, eps) = draw_noise(cfg.batch_size, d_z, sched.t_max(), &mut rng);
            total += ldm_loss_and_grad(&mut run.model, &z0, &prompts, &ts, &eps, sched, Some(scale))?;
        }
        let loss = total / accum;
        if !loss.is_finite() || !run.model.grads_finite() {
            return Err(Error::Divergence(format!("denoiser loss {} at step {}", loss, step)));
        }
        run.optimizer.clip_and_step(&mut run.model);
        run.losses.push(loss);
    }
    if !run.model.values_finite() {
        return Err(Error::Divergence("denoiser weights became non-finite".into()));
    }
    Ok(())
}
