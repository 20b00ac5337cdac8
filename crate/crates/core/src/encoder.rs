//! Recognition encoder `E = E_f ∘ E_z` trained with an additive angular margin loss.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::numerics::ops::{matmul_nt, matmul_tn, normalize_rows, normalize_rows_backward};
use crate::numerics::optim::{AdamConfig, OptimizerState};
use crate::numerics::param::join;
use crate::{seeding, Mlp, NumericArray, Parameter, Params, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig {
    /// Logit multiplier `s`.
    pub scale: f64,
    /// Additive angle `m` in radians, `0 <= m < π/2`.
    pub margin: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { scale: 16.0, margin: 0.3 }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(config_err("margin scale must be positive"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(config_err("margin must lie in [0, π/2)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderArch {
    pub image_dim: usize,
    pub ez_hidden: usize,
    pub d_z: usize,
    pub ef_hidden: usize,
    pub d_f: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self { image_dim: 128, ez_hidden: 128, d_z: 32, ef_hidden: 256, d_f: 512 }
    }
}

/// The encoder's two branches and its class-centre matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    /// Image vector to latent `z0`; PReLU after every layer.
    pub ez: Mlp<F>,
    /// Latent to recognition feature; linear output.
    pub ef: Mlp<F>,
    /// `[n_classes × d_f]`, unit-norm rows.
    pub class_weights: Parameter<F>,
}

impl<F: Scalar> EncoderParams<F> {
    pub fn new<R: Rng + ?Sized>(arch: &EncoderArch, n_classes: usize, rng: &mut R) -> Self {
        let ez = Mlp::new(&[arch.image_dim, arch.ez_hidden, arch.d_z], true, rng);
        let ef = Mlp::new(&[arch.d_z, arch.ef_hidden, arch.d_f], false, rng);
        let w = NumericArray::randn(&[n_classes.max(1), arch.d_f], F::one(), rng);
        let (w, _) = normalize_rows(&w).expect("gaussian rows are non-zero");
        Self { ez, ef, class_weights: Parameter::new(w) }
    }

    pub fn image_dim(&self) -> usize {
        self.ez.d_in()
    }

    pub fn d_z(&self) -> usize {
        self.ez.d_out()
    }

    pub fn d_f(&self) -> usize {
        self.ef.d_out()
    }

    fn as_row(&self, x: &[F], width: usize, what: &str) -> Result<NumericArray<F>> {
        if x.len() != width {
            return Err(dim_err(format!("{} has dimension {}, expected {}", what, x.len(), width)));
        }
        NumericArray::from_vec(vec![1, width], x.to_vec())
    }

    /// `z0 = E_z(x)`.
    pub fn encode_z(&self, x: &[F]) -> Result<NumericArray<F>> {
        let z = self.ez.forward(&self.as_row(x, self.image_dim(), "image")?)?;
        z.reshape(vec![self.d_z()])
    }

    /// `E_f(z)`.
    pub fn encode_f(&self, z: &[F]) -> Result<NumericArray<F>> {
        let f = self.ef.forward(&self.as_row(z, self.d_z(), "latent")?)?;
        f.reshape(vec![self.d_f()])
    }

    /// `f_x = E(x)`.
    pub fn encode(&self, x: &[F]) -> Result<NumericArray<F>> {
        let z = self.ez.forward(&self.as_row(x, self.image_dim(), "image")?)?;
        self.ef.forward(&z)?.reshape(vec![self.d_f()])
    }

    /// Row-wise `E_z` over `[B × image_dim]`.
    pub fn encode_z_batch(&self, x: &NumericArray<F>) -> Result<NumericArray<F>> {
        self.ez.forward(x)
    }

    pub fn encode_batch(&self, x: &NumericArray<F>) -> Result<NumericArray<F>> {
        self.ef.forward(&self.ez.forward(x)?)
    }

    fn renormalize_classes(&mut self) -> Result<()> {
        let (w, _) = normalize_rows(&self.class_weights.value)?;
        self.class_weights.value = w;
        Ok(())
    }
}

impl<F: Scalar> Params<F> for EncoderParams<F> {
    fn visit_params(&self, prefix: &str, visit: &mut dyn FnMut(&str, &Parameter<F>)) {
        self.ez.visit_params(&join(prefix, "ez"), visit);
        self.ef.visit_params(&join(prefix, "ef"), visit);
        visit(&join(prefix, "class_weights"), &self.class_weights);
    }

    fn visit_params_mut(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        self.ez.visit_params_mut(&join(prefix, "ez"), visit);
        self.ef.visit_params_mut(&join(prefix, "ef"), visit);
        visit(&join(prefix, "class_weights"), &mut self.class_weights);
    }
}

#[derive(Debug, Clone)]
pub struct MarginLoss<F> {
    pub loss: F,
    pub grad_features: NumericArray<F>,
    pub grad_weights: NumericArray<F>,
    /// Cosine between every feature and every class centre, `[B × C]`.
    pub cosines: NumericArray<F>,
}

/// Mean cross-entropy over logits `s·cos θ_j`, with the true class using
/// `s·cos(θ_y + m)`. Features and class rows are normalized inside.
pub fn margin_loss<F: Scalar>(
    features: &NumericArray<F>,
    labels: &[usize],
    cfg: &MarginConfig,
    class_weights: &NumericArray<F>,
) -> Result<MarginLoss<F>> {
    let (b, d) = features.dims2()?;
    let (c, d2) = class_weights.dims2()?;
    if d != d2 {
        return Err(dim_err(format!("feature width {} differs from class width {}", d, d2)));
    }
    if labels.len() != b {
        return Err(dim_err(format!("{} labels for {} features", labels.len(), b)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(config_err(format!("label {} outside {} classes", bad, c)));
    }
    let (fhat, fnorm) = normalize_rows(features).map_err(|_| Error::Degenerate("zero-norm feature".into()))?;
    let (what, wnorm) = normalize_rows(class_weights).map_err(|_| Error::Degenerate("zero-norm class weight".into()))?;
    let cosines = matmul_nt(&fhat, &what)?;

    let s = F::lit(cfg.scale);
    let (cm, sm) = (F::lit(cfg.margin.cos()), F::lit(cfg.margin.sin()));
    let inv_b = F::one() / F::from_usize_lossy(b);
    let tiny = F::lit(1e-12);
    let mut loss = F::zero();
    let mut g_cos = NumericArray::zeros(&[b, c]);
    let mut logits = vec![F::zero(); c];
    for i in 0..b {
        let row = cosines.row(i);
        let y = labels[i];
        let cy = row[y].max(-F::one()).min(F::one());
        let sin_y = (F::one() - cy * cy).max(F::zero()).sqrt();
        for (j, l) in logits.iter_mut().enumerate() {
            *l = s * row[j];
        }
        logits[y] = s * (cy * cm - sin_y * sm);
        let mx = logits.iter().copied().fold(F::neg_infinity(), F::max);
        let z: F = logits.iter().map(|&l| (l - mx).exp()).sum();
        loss += (mx + z.ln() - logits[y]) * inv_b;
        let gi = g_cos.row_mut(i);
        for j in 0..c {
            let p = (logits[j] - mx).exp() / z;
            let gl = (p - if j == y { F::one() } else { F::zero() }) * inv_b;
            gi[j] = if j == y { gl * s * (cm + cy * sm / sin_y.max(tiny)) } else { gl * s };
        }
    }
    let g_fhat = crate::numerics::ops::matmul(&g_cos, &what)?;
    let g_what = matmul_tn(&g_cos, &fhat)?;
    Ok(MarginLoss {
        loss,
        grad_features: normalize_rows_backward(&fhat, &fnorm, &g_fhat)?,
        grad_weights: normalize_rows_backward(&what, &wnorm, &g_what)?,
        cosines,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrainConfig {
    pub arch: EncoderArch,
    pub margin: MarginConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            arch: EncoderArch::default(),
            margin: MarginConfig::default(),
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderRun<F> {
    pub params: EncoderParams<F>,
    /// Loss of every minibatch, in order.
    pub losses: Vec<F>,
    pub batches_per_epoch: usize,
}

/// One forward/backward pass of the margin loss through both branches.
pub fn encoder_loss_and_grad<F: Scalar>(
    enc: &mut EncoderParams<F>,
    x: &NumericArray<F>,
    labels: &[usize],
    margin: &MarginConfig,
    grads: bool,
) -> Result<F> {
    let (z, tz) = enc.ez.forward_tape(x)?;
    let (f, tf) = enc.ef.forward_tape(&z)?;
    let out = margin_loss(&f, labels, margin, &enc.class_weights.value)?;
    if grads {
        enc.class_weights.grad.axpy(F::one(), &out.grad_weights)?;
        let gz = enc.ef.backward(&tf, &out.grad_features)?;
        enc.ez.backward(&tz, &gz)?;
    }
    Ok(out.loss)
}

/// Trains a fresh encoder on `[N × image_dim]` images with class labels.
pub fn train_encoder<F: Scalar>(images: &NumericArray<F>, labels: &[usize], cfg: &EncoderTrainConfig) -> Result<EncoderRun<F>> {
    let n = images.rows();
    if n == 0 {
        return Err(config_err("encoder training set is empty"));
    }
    if labels.len() != n {
        return Err(dim_err("one label per image required"));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    if n_classes < 2 {
        return Err(config_err("encoder training needs at least two identities"));
    }
    if images.cols() != cfg.arch.image_dim {
        return Err(dim_err(format!("images have dimension {}, arch expects {}", images.cols(), cfg.arch.image_dim)));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(config_err("epochs and batch_size must be positive"));
    }
    cfg.margin.validate()?;

    let mut rng = seeding::rng(cfg.seed);
    let mut enc = EncoderParams::new(&cfg.arch, n_classes, &mut rng);
    let mut opt = OptimizerState::new(cfg.adam);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::new();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<&[F]> = chunk.iter().map(|&i| images.row(i)).collect();
            let x = NumericArray::stack_rows(&rows)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            enc.zero_grads();
            let loss = encoder_loss_and_grad(&mut enc, &x, &y, &cfg.margin, true)?;
            if !loss.is_finite() || !enc.grads_finite() {
                return Err(Error::Divergence(format!("encoder loss became {}", loss)));
            }
            opt.clip_and_step(&mut enc);
            enc.renormalize_classes()?;
            losses.push(loss);
        }
    }
    Ok(EncoderRun { params: enc, losses, batches_per_epoch })
}

/// Fraction of samples whose nearest class centre (by cosine) is their label.
pub fn class_accuracy<F: Scalar>(enc: &EncoderParams<F>, images: &NumericArray<F>, labels: &[usize]) -> Result<f64> {
    let f = enc.encode_batch(images)?;
    let (fhat, _) = normalize_rows(&f)?;
    let cos = matmul_nt(&fhat, &enc.class_weights.value)?;
    let hits = (0..labels.len())
        .filter(|&i| {
            let row = cos.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == labels[i]
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean same-identity and different-identity cosine between encoded features.
pub fn cosine_separation<F: Scalar>(enc: &EncoderParams<F>, images: &NumericArray<F>, labels: &[usize]) -> Result<(f64, f64)> {
    let f = enc.encode_batch(images)?;
    let (fhat, _) = normalize_rows(&f)?;
    let cos = matmul_nt(&fhat, &fhat)?;
    let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let c = cos.row(i)[j].as_f64();
            if labels[i] == labels[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                ne += 1;
            }
        }
    }
    Ok((intra / ni.max(1) as f64, inter / ne.max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> EncoderArch {
        EncoderArch { image_dim: 6, ez_hidden: 5, d_z: 4, ef_hidden: 7, d_f: 8 }
    }

    #[test]
    fn branch_composition_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc: EncoderParams<f64> = EncoderParams::new(&small_arch(), 3, &mut rng);
        for _ in 0..10 {
            let x = NumericArray::randn(&[6], 1.0, &mut rng);
            let z = enc.encode_z(x.data()).unwrap();
            assert_eq!(enc.encode_f(z.data()).unwrap(), enc.encode(x.data()).unwrap());
        }
    }

    #[test]
    fn dimension_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc: EncoderParams<f64> = EncoderParams::new(&small_arch(), 3, &mut rng);
        assert!(matches!(enc.encode_z(&[0.0; 5]), Err(Error::Dimension(_))));
        assert!(matches!(enc.encode_f(&[0.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_class_loss_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f: NumericArray<f64> = NumericArray::randn(&[3, 4], 1.0, &mut rng);
        let w = NumericArray::randn(&[1, 4], 1.0, &mut rng);
        let cfg = MarginConfig { scale: 8.0, margin: 0.4 };
        let out = margin_loss(&f, &[0, 0, 0], &cfg, &w).unwrap();
        assert!(out.loss.abs() < 1e-12);
    }

    #[test]
    fn zero_feature_is_degenerate() {
        let f = NumericArray::<f64>::zeros(&[1, 4]);
        let w = NumericArray::full(&[2, 4], 1.0);
        assert!(matches!(margin_loss(&f, &[0], &MarginConfig::default(), &w), Err(Error::Degenerate(_))));
    }

    #[test]
    fn training_needs_two_identities() {
        let x = NumericArray::<f64>::zeros(&[4, 6]);
        let cfg = EncoderTrainConfig { arch: small_arch(), ..Default::default() };
        assert!(matches!(train_encoder(&x, &[0, 0, 0, 0], &cfg), Err(Error::Config(_))));
        assert!(matches!(train_encoder(&NumericArray::<f64>::zeros(&[0, 6]), &[], &cfg), Err(Error::Config(_))));
    }
}
