//! Noise schedules, the closed-form forward process and reverse-step coefficients.

use crate::error::{config_err, dim_err, Error, Result};
use crate::{NumericArray, Scalar};

/// Per-step tables `β_t`, `α_t = 1 − β_t`, `ᾱ_t = ∏ α_i` and `σ_t = √β_t`.
///
/// Time indices are 1-based: valid `t` runs over `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<F> {
    beta: Vec<F>,
    alpha: Vec<F>,
    alpha_bar: Vec<F>,
    sigma: Vec<F>,
}

/// Coefficients of one reverse update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients<F> {
    pub alpha: F,
    pub alpha_bar: F,
    pub beta: F,
    pub sigma: F,
}

impl<F: Scalar> NoiseSchedule<F> {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(config_err("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err(format!(
                "beta range must satisfy 0 < start <= end < 1, got {} .. {}",
                beta_start, beta_end
            )));
        }
        let betas = (0..t_max)
            .map(|i| {
                let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
                F::lit(beta_start + frac * (beta_end - beta_start))
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(beta: Vec<F>) -> Result<Self> {
        if beta.is_empty() {
            return Err(config_err("schedule needs at least one step"));
        }
        if beta.iter().any(|&b| !(b > F::zero() && b < F::one())) {
            return Err(config_err("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<F> = beta.iter().map(|&b| F::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = F::one();
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = beta.iter().map(|&b| b.sqrt()).collect();
        Ok(Self { beta, alpha, alpha_bar, sigma })
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_max() {
            return Err(Error::Index { t, max: self.t_max() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<F> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<F> {
        Ok(self.alpha[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<F> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<F> {
        Ok(self.sigma[self.check(t)?])
    }

    pub fn betas(&self) -> &[F] {
        &self.beta
    }

    pub fn alphas(&self) -> &[F] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[F] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[F] {
        &self.sigma
    }

    /// Coefficients of the single-step reverse update at `t`.
    pub fn coefficients(&self, t: usize) -> Result<StepCoefficients<F>> {
        let i = self.check(t)?;
        Ok(StepCoefficients {
            alpha: self.alpha[i],
            alpha_bar: self.alpha_bar[i],
            beta: self.beta[i],
            sigma: self.sigma[i],
        })
    }

    /// `√ᾱ_t · z0 + √(1 − ᾱ_t) · eps`.
    pub fn q_sample(&self, z0: &NumericArray<F>, t: usize, eps: &NumericArray<F>) -> Result<NumericArray<F>> {
        let ab = self.alpha_bar(t)?;
        q_sample_with(z0, ab, eps)
    }

    /// Applies `z_s = √α_s · z_{s−1} + √(1 − α_s) · ε` for `s = 1..=t`, drawing a
    /// fresh `ε` from `noise` at every step.
    pub fn q_sample_iterative(
        &self,
        z0: &NumericArray<F>,
        t: usize,
        mut noise: impl FnMut() -> NumericArray<F>,
    ) -> Result<NumericArray<F>> {
        self.check(t)?;
        let mut z = z0.clone();
        for s in 1..=t {
            let eps = noise();
            if eps.shape() != z.shape() {
                return Err(dim_err("noise shape differs from z0"));
            }
            let a = self.alpha[s - 1];
            let (ca, cn) = (a.sqrt(), (F::one() - a).sqrt());
            for (zi, &e) in z.data_mut().iter_mut().zip(eps.data()) {
                *zi = ca * *zi + cn * e;
            }
        }
        Ok(z)
    }
}

/// Forward-process draw at an explicit `ᾱ`.
pub fn q_sample_with<F: Scalar>(z0: &NumericArray<F>, alpha_bar: F, eps: &NumericArray<F>) -> Result<NumericArray<F>> {
    if z0.shape() != eps.shape() {
        return Err(dim_err(format!("z0 {:?} and eps {:?} differ", z0.shape(), eps.shape())));
    }
    let (ca, cn) = (alpha_bar.sqrt(), (F::one() - alpha_bar).sqrt());
    z0.zip_with(eps, |z, e| ca * z + cn * e)
}

/// How reverse-step coefficients are chosen when a plan skips time indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Respacing {
    /// `α = ᾱ_t / ᾱ_{t'}` where `t'` is the next planned index (0 after the last).
    /// Identical to the single-step tables when no index is skipped.
    #[default]
    Cumulative,
    /// Use the single-step `α_t, β_t` of each planned index unchanged.
    OriginalIndex,
}

impl std::str::FromStr for Respacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cumulative" => Ok(Self::Cumulative),
            "original" => Ok(Self::OriginalIndex),
            other => Err(config_err(format!("unknown respacing '{}'", other))),
        }
    }
}

/// Strictly decreasing list of time indices visited by the sampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepIndexPlan {
    indices: Vec<usize>,
}

impl StepIndexPlan {
    /// `steps` indices evenly spread over `T..1`, always including both ends
    /// when `steps > 1`.
    pub fn evenly_spaced<F: Scalar>(sched: &NoiseSchedule<F>, steps: usize) -> Result<Self> {
        let t_max = sched.t_max();
        if steps == 0 || steps > t_max {
            return Err(config_err(format!("inference steps must lie in 1..={}, got {}", t_max, steps)));
        }
        if steps == 1 {
            return Ok(Self { indices: vec![t_max] });
        }
        let span = (t_max - 1) as f64 / (steps - 1) as f64;
        let mut indices: Vec<usize> = (0..steps)
            .map(|i| (t_max as f64 - i as f64 * span).round() as usize)
            .collect();
        indices.dedup();
        Ok(Self { indices })
    }

    /// Explicit plan; indices must be strictly decreasing and within the schedule.
    pub fn from_indices<F: Scalar>(sched: &NoiseSchedule<F>, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(config_err("plan needs at least one index"));
        }
        if indices.windows(2).any(|w| w[0] <= w[1]) {
            return Err(config_err("plan indices must be strictly decreasing"));
        }
        for &t in &indices {
            sched.check(t)?;
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `(t, coefficients)` for every planned step, in sampling order.
    pub fn coefficients<F: Scalar>(
        &self,
        sched: &NoiseSchedule<F>,
        respacing: Respacing,
    ) -> Result<Vec<(usize, StepCoefficients<F>)>> {
        let mut out = Vec::with_capacity(self.indices.len());
        for (i, &t) in self.indices.iter().enumerate() {
            let next = self.indices.get(i + 1).copied().unwrap_or(0);
            let base = sched.coefficients(t)?;
            let c = if respacing == Respacing::OriginalIndex || next + 1 == t {
                base
            } else {
                let prev_bar = if next == 0 { F::one() } else { sched.alpha_bar(next)? };
                let alpha = base.alpha_bar / prev_bar;
                let beta = F::one() - alpha;
                StepCoefficients { alpha, alpha_bar: base.alpha_bar, beta, sigma: beta.sqrt() }
            };
            out.push((t, c));
        }
        Ok(out)
    }
}
