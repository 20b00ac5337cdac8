//! The pipeline stages. Each reads its prerequisites from the output
//! directory and returns the metrics it reports.

use std::path::{Path, PathBuf};

use difrec::diffusion::{finetune_diffusion, train_diffusion_on_latents, Denoiser, LatentDataset};
use difrec::encoder::{class_accuracy, train_encoder, EncoderParams};
use difrec::eval::{
    build_pairs, identification_accuracy, pair_scores_csv, rank_csv, roc, roc_csv, score, select_threshold,
    top_k, verification_accuracy, PairList,
};
use difrec::prompts::PromptVector;
use difrec::refiner::{train_refiner, Refiner};
use difrec::schedule::StepIndexPlan;
use difrec::synthworld::{generate_world, Split};
use difrec::{seeding, Array, Params, Schedule};

use crate::checkpoint::{Checkpoint, Component};
use crate::config::{RunConfig, Stage};
use crate::data::{load_dataset, write_dataset, Dataset};
use crate::error::CliError;

pub type Metrics = Vec<(String, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    SynthGen,
    TrainEncoder,
    TrainDiffusion,
    TrainRefiner,
    EvalVerify,
    EvalIdentify,
}

pub fn run(command: Command, cfg: &RunConfig, out: &Path) -> Result<Metrics, CliError> {
    std::fs::create_dir_all(out)?;
    match command {
        Command::SynthGen => synth_gen(cfg, out),
        Command::TrainEncoder => cmd_train_encoder(cfg, out),
        Command::TrainDiffusion => cmd_train_diffusion(cfg, out),
        Command::TrainRefiner => cmd_train_refiner(cfg, out),
        Command::EvalVerify => eval_verify(cfg, out),
        Command::EvalIdentify => eval_identify(cfg, out),
    }
}

fn ckpt_path(out: &Path, c: Component) -> PathBuf {
    out.join(c.file_name())
}

/// Mean of the first and last `window` entries, shrunk to a tenth of short runs.
fn loss_ends(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(losses.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&losses[..w.min(losses.len())]), mean(&losses[losses.len().saturating_sub(w)..]))
}

pub fn synth_gen(cfg: &RunConfig, out: &Path) -> Result<Metrics, CliError> {
    let world = generate_world::<f64>(&cfg.world)?;
    write_dataset(&world, cfg, out)?;
    Ok(vec![
        ("identities".into(), cfg.world.total_ids() as f64),
        ("prompt_collisions".into(), world.prompt_collisions as f64),
        ("separability".into(), world.separability),
    ])
}

fn sample_prompts(d: &difrec::synthworld::SplitData<f64>) -> Vec<PromptVector> {
    d.sample_prompts()
}

pub fn cmd_train_encoder(cfg: &RunConfig, out: &Path) -> Result<Metrics, CliError> {
    let data = load_dataset(cfg, out)?;
    let run = train_encoder(&data.train.images, &data.train.labels, &cfg.encoder)?;
    let mut ck = Checkpoint::new(Component::Encoder, cfg.stage_hash(Stage::Encoder));
    ck.push_params("", &run.params);
    ck.save(&ckpt_path(out, Component::Encoder))?;
    let (first, last) = loss_ends(&run.losses, run.batches_per_epoch);
    Ok(vec![
        ("encoder_loss_first_epoch".into(), first),
        ("encoder_loss_last_epoch".into(), last),
        ("encoder_train_accuracy".into(), class_accuracy(&run.params, &data.train.images, &data.train.labels)?),
    ])
}

pub fn load_encoder(cfg: &RunConfig, out: &Path) -> Result<EncoderParams<f64>, CliError> {
    let mut ck = Checkpoint::load(&ckpt_path(out, Component::Encoder), Component::Encoder, &cfg.stage_hash(Stage::Encoder))?;
    let mut enc = EncoderParams::new(&cfg.encoder.arch, cfg.world.n_train_ids, &mut seeding::rng(0));
    ck.load_params("", &mut enc)?;
    ck.finish()?;
    Ok(enc)
}

pub fn load_denoiser(cfg: &RunConfig, out: &Path) -> Result<Denoiser<f64>, CliError> {
    let hash = cfg.stage_hash(Stage::Denoiser);
    let mut den = Denoiser::new(&cfg.diffusion.arch, cfg.schedule.0, &mut seeding::rng(0));
    let mut ck = Checkpoint::load(&ckpt_path(out, Component::Denoiser), Component::Denoiser, &hash)?;
    ck.load_params("trunk", &mut den.trunk)?;
    let (mean, std) = (ck.take("latent_mean")?, ck.take("latent_std")?);
    if mean.shape() != [den.d_z()] || std.shape() != [den.d_z()] {
        return Err(CliError::Integrity("latent statistics have the wrong shape".into()));
    }
    den.latent_mean = mean;
    den.latent_std = std;
    ck.finish()?;
    let mut ck = Checkpoint::load(&ckpt_path(out, Component::PromptEmbedder), Component::PromptEmbedder, &hash)?;
    ck.load_params("embedder", &mut den.embedder)?;
    ck.finish()?;
    Ok(den)
}

pub fn load_refiner(cfg: &RunConfig, out: &Path) -> Result<Refiner<f64>, CliError> {
    let mut ck = Checkpoint::load(&ckpt_path(out, Component::Refiner), Component::Refiner, &cfg.stage_hash(Stage::Refiner))?;
    let mut r = Refiner::new(cfg.encoder.arch.d_z, cfg.refiner.hidden, cfg.encoder.arch.d_f, &mut seeding::rng(0));
    ck.load_params("", &mut r)?;
    ck.finish()?;
    Ok(r)
}

fn frozen_check<P: Params<f64>>(what: &str, model: &P, before: u64) -> Result<(), CliError> {
    if model.fingerprint() != before {
        return Err(CliError::Integrity(format!("{} weights changed during a stage that must not train them", what)));
    }
    Ok(())
}

pub fn cmd_train_diffusion(cfg: &RunConfig, out: &Path) -> Result<Metrics, CliError> {
    let data = load_dataset(cfg, out)?;
    let enc = load_encoder(cfg, out)?;
    let before = enc.fingerprint();
    let sched = cfg.noise_schedule();
    let latents = LatentDataset::from_encoder(&enc, &data.train.images, sample_prompts(&data.train))?;
    let mut run = train_diffusion_on_latents(&latents, &sched, &cfg.diffusion)?;
    if cfg.diffusion.finetune_steps > 0 {
        finetune_diffusion(&mut run, &latents, &sched, &cfg.diffusion)?;
    }
    frozen_check("encoder", &enc, before)?;
    let served = run.served();
    let hash = cfg.stage_hash(Stage::Denoiser);
    let mut ck = Checkpoint::new(Component::Denoiser, hash);
    ck.push_params("trunk", &served.trunk);
    ck.push("latent_mean", served.latent_mean.clone());
    ck.push("latent_std", served.latent_std.clone());
    ck.save(&ckpt_path(out, Component::Denoiser))?;
    let mut ck = Checkpoint::new(Component::PromptEmbedder, hash);
    ck.push_params("embedder", &served.embedder);
    ck.save(&ckpt_path(out, Component::PromptEmbedder))?;
    let (first, last) = loss_ends(&run.losses, 100);
    Ok(vec![("diffusion_loss_start".into(), first), ("diffusion_loss_end".into(), last)])
}

pub fn cmd_train_refiner(cfg: &RunConfig, out: &Path) -> Result<Metrics, CliError> {
    let data = load_dataset(cfg, out)?;
    let enc = load_encoder(cfg, out)?;
    let den = load_denoiser(cfg, out)?;
    let (enc_before, den_before) = (enc.fingerprint(), den.fingerprint());
    let sched = cfg.noise_schedule();
    let plan = StepIndexPlan::evenly_spaced(&sched, cfg.inference_steps)?;
    let run = train_refiner(&den, &enc, &data.train.images, &sample_prompts(&data.train), &sched, &plan, &cfg.refiner)?;
    frozen_check("encoder", &enc, enc_before)?;
    frozen_check("denoiser", &den, den_before)?;
    let mut ck = Checkpoint::new(Component::Refiner, cfg.stage_hash(Stage::Refiner));
    ck.push_params("", &run.refiner);
    ck.save(&ckpt_path(out, Component::Refiner))?;
    let (first, last) = loss_ends(&run.losses, 100);
    Ok(vec![("refiner_loss_start".into(), first), ("refiner_loss_end".into(), last)])
}

/// Trained models and the sampler settings shared by both evaluations.
struct Models {
    enc: EncoderParams<f64>,
    den: Denoiser<f64>,
    refiner: Refiner<f64>,
    sched: Schedule,
    plan: StepIndexPlan,
}

impl Models {
    fn load(cfg: &RunConfig, out: &Path) -> Result<Self, CliError> {
        let sched = cfg.noise_schedule();
        let plan = StepIndexPlan::evenly_spaced(&sched, cfg.inference_steps)?;
        Ok(Self {
            enc: load_encoder(cfg, out)?,
            den: load_denoiser(cfg, out)?,
            refiner: load_refiner(cfg, out)?,
            sched,
            plan,
        })
    }

    /// `ẑ_0` per prompt, each from its own stream derived from `seed`.
    fn sample(&self, cfg: &RunConfig, prompts: &[PromptVector], seed: u64) -> Result<Array, CliError> {
        let mut rngs = seeding::item_rngs(seed, 0, prompts.len());
        Ok(self.den.sample_latents(prompts, &self.sched, &self.plan, cfg.respacing, &mut rngs)?)
    }
}

/// Refined and raw-latent scores for every pair of a list.
fn pair_scores(
    cfg: &RunConfig,
    m: &Models,
    data: &Dataset,
    pairs: &PairList,
    split: Split,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let d = data.split(split);
    let prompts: Vec<PromptVector> = pairs.entries.iter().map(|e| d.prompts[e.prompt].clone()).collect();
    let z_hat = m.sample(cfg, &prompts, seed)?;
    let f_p = m.refiner.refine_batch(&z_hat)?;
    let rows: Vec<&[f64]> = pairs.entries.iter().map(|e| d.image(e.image)).collect();
    let x = Array::stack_rows(&rows)?;
    let z0 = m.enc.encode_z_batch(&x)?;
    let f_x = m.enc.ef.forward(&z0)?;
    let mut refined = Vec::with_capacity(pairs.len());
    let mut raw = Vec::with_capacity(pairs.len());
    for i in 0..pairs.len() {
        refined.push(score(f_x.row(i), f_p.row(i))?);
        raw.push(score(z0.row(i), z_hat.row(i))?);
    }
    Ok((refined, raw))
}

pub fn eval_verify(cfg: &RunConfig, out: &Path) -> Result<Metrics, CliError> {
    let data = load_dataset(cfg, out)?;
    let m = Models::load(cfg, out)?;
    let val = build_pairs(&data.val, cfg.val_pairs, seeding::stage_seed(cfg.seed, "val-pairs"))?;
    let (val_refined, val_raw) = pair_scores(cfg, &m, &data, &val, Split::Val, seeding::stage_seed(cfg.seed, "val-sampling"))?;
    let val_roc = roc(&val_refined, &val.labels())?;
    let s_refined = select_threshold(&val_roc)?;
    let s_raw = select_threshold(&roc(&val_raw, &val.labels())?)?;
    std::fs::write(out.join("verify_roc_val.csv"), roc_csv(&val_roc))?;

    let mut metrics: Metrics = vec![("threshold_refined".into(), s_refined), ("threshold_raw".into(), s_raw)];
    let mut summary = String::from("list,refined_accuracy,raw_accuracy\n");
    let mut accs = Vec::new();
    for l in 0..cfg.pair_lists {
        let pairs = build_pairs(&data.test, cfg.pairs_per_list, seeding::stage_seed(cfg.seed, &format!("test-pairs-{}", l)))?;
        let (refined, raw) =
            pair_scores(cfg, &m, &data, &pairs, Split::Test, seeding::stage_seed(cfg.seed, &format!("test-sampling-{}", l)))?;
        let a_ref = verification_accuracy(&pairs, &refined, s_refined)?;
        let a_raw = verification_accuracy(&pairs, &raw, s_raw)?;
        std::fs::write(out.join(format!("verify_roc_list{}.csv", l)), roc_csv(&roc(&refined, &pairs.labels())?))?;
        std::fs::write(out.join(format!("verify_scores_list{}.csv", l)), pair_scores_csv(&pairs, &refined)?)?;
        summary.push_str(&format!("{},{},{}\n", l, a_ref, a_raw));
        metrics.push((format!("verify_accuracy_list{}", l), a_ref));
        metrics.push((format!("verify_raw_accuracy_list{}", l), a_raw));
        accs.push(a_ref);
    }
    std::fs::write(out.join("verify_summary.csv"), summary)?;
    metrics.push(("verify_accuracy_mean".into(), accs.iter().sum::<f64>() / accs.len() as f64));
    metrics.push(("verify_accuracy_min".into(), accs.iter().cloned().fold(f64::INFINITY, f64::min)));
    Ok(metrics)
}

pub fn eval_identify(cfg: &RunConfig, out: &Path) -> Result<Metrics, CliError> {
    let data = load_dataset(cfg, out)?;
    let m = Models::load(cfg, out)?;
    let test = &data.test;
    let groups = test.by_label();
    let n_ids = test.n_ids();
    // probe i describes identity i mod n_ids; gallery entry i is an image of it
    let prompts: Vec<PromptVector> = (0..cfg.probes).map(|i| test.prompts[i % n_ids].clone()).collect();
    let gallery: Vec<&[f64]> = (0..cfg.probes)
        .map(|i| {
            let g = &groups[i % n_ids];
            test.image(g[(i / n_ids) % g.len()])
        })
        .collect();
    let f_p = m.refiner.refine_batch(&m.sample(cfg, &prompts, seeding::stage_seed(cfg.seed, "identify-sampling"))?)?;
    let f_x = m.enc.encode_batch(&Array::stack_rows(&gallery)?)?;
    let table = top_k(&f_p, &f_x, cfg.probes)?;
    let mut csv = String::from("k,accuracy\n");
    let mut accs = Vec::with_capacity(cfg.probes);
    for k in 1..=cfg.probes {
        let a = identification_accuracy(&table, k)?;
        csv.push_str(&format!("{},{}\n", k, a));
        accs.push(a);
    }
    std::fs::write(out.join("identify_topk.csv"), csv)?;
    std::fs::write(out.join("identify_ranks.csv"), rank_csv(&table))?;
    let mut metrics: Metrics = vec![("identify_chance_k1".into(), 1.0 / cfg.probes as f64)];
    for &k in &cfg.report_ks {
        metrics.push((format!("identify_accuracy_k{}", k), accs[k - 1]));
    }
    Ok(metrics)
}
