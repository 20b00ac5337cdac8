//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use difrec::diffusion::{DenoiserArch, DiffusionTrainConfig};
use difrec::encoder::{EncoderArch, EncoderTrainConfig, MarginConfig};
use difrec::numerics::AdamConfig;
use difrec::prompts::DEFAULT_IDENTITY_MASK;
use difrec::refiner::RefinerTrainConfig;
use difrec::schedule::Respacing;
use difrec::synthworld::WorldConfig;
use difrec::{seeding, Schedule};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Every recognised key with its default, in file order.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    // synthetic world
    ("n_train_ids", "64"),
    ("n_val_ids", "32"),
    ("n_test_ids", "32"),
    ("samples_per_id", "20"),
    ("image_dim", "128"),
    ("attr_count", "18"),
    ("within_id_noise", "0.3"),
    ("attribute_mask", ""),
    // encoder
    ("ez_hidden", "128"),
    ("d_z", "32"),
    ("ef_hidden", "256"),
    ("d_f", "512"),
    ("margin_scale", "16"),
    ("margin", "0.3"),
    ("encoder_epochs", "30"),
    ("encoder_batch_size", "32"),
    ("encoder_learning_rate", "1e-3"),
    // schedule and sampler
    ("t_max", "1000"),
    ("beta_start", "1e-4"),
    ("beta_end", "0.02"),
    ("inference_steps", "20"),
    ("respacing", "cumulative"),
    // denoiser
    ("d_t", "32"),
    ("d_p", "8"),
    ("d_c", "64"),
    ("denoiser_hidden", "256"),
    ("denoiser_layers", "3"),
    ("diffusion_learning_rate", "1e-4"),
    ("finetune_learning_rate", "5e-5"),
    ("diffusion_batch_size", "4"),
    ("diffusion_accum_steps", "4"),
    ("diffusion_steps", "4000"),
    ("finetune_steps", "0"),
    ("ema_decay", "0.999"),
    ("max_grad_norm", "1"),
    // refiner
    ("refiner_hidden", "256"),
    ("refiner_learning_rate", "1e-4"),
    ("refiner_batch_size", "4"),
    ("refiner_accum_steps", "4"),
    ("refiner_steps", "2000"),
    // evaluation
    ("pair_lists", "5"),
    ("pairs_per_list", "2000"),
    ("val_pairs", "2000"),
    ("probes", "100"),
    ("report_ks", "1,5,10,20,30,50"),
    ("out_dir", "run"),
];

/// Keys that change a stage's trained weights, by stage.
const ENCODER_KEYS: &[&str] = &[
    "seed", "n_train_ids", "n_val_ids", "n_test_ids", "samples_per_id", "image_dim", "attr_count", "within_id_noise",
    "ez_hidden", "d_z", "ef_hidden", "d_f", "margin_scale", "margin", "encoder_epochs", "encoder_batch_size",
    "encoder_learning_rate",
];
const DENOISER_KEYS: &[&str] = &[
    "attribute_mask", "t_max", "beta_start", "beta_end", "d_t", "d_p", "d_c", "denoiser_hidden", "denoiser_layers",
    "diffusion_learning_rate", "finetune_learning_rate", "diffusion_batch_size", "diffusion_accum_steps",
    "diffusion_steps", "finetune_steps", "ema_decay", "max_grad_norm",
];
const REFINER_KEYS: &[&str] = &[
    "inference_steps", "respacing", "refiner_hidden", "refiner_learning_rate", "refiner_batch_size",
    "refiner_accum_steps", "refiner_steps",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Denoiser,
    Refiner,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub world: WorldConfig,
    pub mask: Vec<String>,
    pub encoder: EncoderTrainConfig,
    pub schedule: (usize, f64, f64),
    pub inference_steps: usize,
    pub respacing: Respacing,
    pub diffusion: DiffusionTrainConfig,
    pub refiner: RefinerTrainConfig,
    pub pair_lists: usize,
    pub pairs_per_list: usize,
    pub val_pairs: usize,
    pub probes: usize,
    pub report_ks: Vec<usize>,
    pub out_dir: String,
    pub seed: u64,
}

fn parse<T: FromStr>(values: &BTreeMap<String, String>, key: &str) -> Result<T, CliError> {
    let raw = &values[key];
    raw.trim().parse().map_err(|_| CliError::Config(format!("invalid value '{}' for {}", raw, key)))
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self::from_pairs(Vec::new()).expect("built-in defaults are valid")
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(pairs)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::parse(&text)
    }

    /// Applies explicit overrides, rejecting unknown and repeated keys.
    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut seen = std::collections::HashSet::new();
        for (k, v) in pairs {
            if !values.contains_key(&k) {
                return Err(CliError::Config(format!("unknown key '{}'", k)));
            }
            if !seen.insert(k.clone()) {
                return Err(CliError::Config(format!("key '{}' given twice", k)));
            }
            values.insert(k, v);
        }
        Self::build(values)
    }

    pub fn with_seed(&self, seed: u64) -> Result<Self, CliError> {
        let mut values = self.values.clone();
        values.insert("seed".into(), seed.to_string());
        Self::build(values)
    }

    fn build(values: BTreeMap<String, String>) -> Result<Self, CliError> {
        let p = |k: &str| parse::<usize>(&values, k);
        let f = |k: &str| parse::<f64>(&values, k);
        let seed: u64 = parse(&values, "seed")?;

        let world = WorldConfig {
            n_train_ids: p("n_train_ids")?,
            n_val_ids: p("n_val_ids")?,
            n_test_ids: p("n_test_ids")?,
            samples_per_id: p("samples_per_id")?,
            image_dim: p("image_dim")?,
            attr_count: p("attr_count")?,
            within_id_noise: f("within_id_noise")?,
            seed,
        };
        world.validate()?;

        let mask: Vec<String> = if values["attribute_mask"].trim().is_empty() {
            if world.attr_count == DEFAULT_IDENTITY_MASK.len() {
                DEFAULT_IDENTITY_MASK.iter().map(|s| s.to_string()).collect()
            } else {
                world.attribute_names()
            }
        } else {
            values["attribute_mask"].split(',').map(|s| s.trim().to_string()).collect()
        };
        if mask.is_empty() || mask.iter().any(|m| m.is_empty()) {
            return Err(CliError::Config("attribute_mask has an empty entry".into()));
        }

        let arch = EncoderArch {
            image_dim: world.image_dim,
            ez_hidden: p("ez_hidden")?,
            d_z: p("d_z")?,
            ef_hidden: p("ef_hidden")?,
            d_f: p("d_f")?,
        };
        let encoder = EncoderTrainConfig {
            arch,
            margin: MarginConfig { scale: f("margin_scale")?, margin: f("margin")? },
            epochs: p("encoder_epochs")?,
            batch_size: p("encoder_batch_size")?,
            adam: AdamConfig { learning_rate: f("encoder_learning_rate")?, ..AdamConfig::default() },
            seed: seeding::stage_seed(seed, "encoder"),
        };
        encoder.margin.validate()?;
        if [encoder.arch.ez_hidden, encoder.arch.d_z, encoder.arch.ef_hidden, encoder.arch.d_f, encoder.epochs, encoder.batch_size]
            .contains(&0)
            || !(encoder.adam.learning_rate > 0.0)
        {
            return Err(CliError::Config("encoder sizes, epochs, batch size and learning rate must be positive".into()));
        }

        let schedule = (p("t_max")?, f("beta_start")?, f("beta_end")?);
        let sched = Schedule::linear(schedule.0, schedule.1, schedule.2)?;
        let inference_steps = p("inference_steps")?;
        difrec::schedule::StepIndexPlan::evenly_spaced(&sched, inference_steps)?;
        let respacing: Respacing = values["respacing"].trim().parse()?;

        let diffusion = DiffusionTrainConfig {
            arch: DenoiserArch {
                d_z: encoder.arch.d_z,
                d_t: p("d_t")?,
                d_p: p("d_p")?,
                d_c: p("d_c")?,
                hidden: p("denoiser_hidden")?,
                hidden_layers: p("denoiser_layers")?,
                attr_count: mask.len(),
            },
            learning_rate: f("diffusion_learning_rate")?,
            finetune_rate: f("finetune_learning_rate")?,
            batch_size: p("diffusion_batch_size")?,
            grad_accum_steps: p("diffusion_accum_steps")?,
            max_steps: p("diffusion_steps")?,
            finetune_steps: p("finetune_steps")?,
            ema_decay: f("ema_decay")?,
            max_grad_norm: f("max_grad_norm")?,
            seed: seeding::stage_seed(seed, "diffusion"),
        };
        diffusion.validate()?;
        let a = &diffusion.arch;
        if [a.d_t, a.d_p, a.d_c, a.hidden, a.hidden_layers].contains(&0) || a.d_t % 2 != 0 {
            return Err(CliError::Config("denoiser sizes must be positive and d_t even".into()));
        }

        let refiner = RefinerTrainConfig {
            hidden: p("refiner_hidden")?,
            learning_rate: f("refiner_learning_rate")?,
            batch_size: p("refiner_batch_size")?,
            grad_accum_steps: p("refiner_accum_steps")?,
            max_steps: p("refiner_steps")?,
            max_grad_norm: diffusion.max_grad_norm,
            ema_decay: diffusion.ema_decay,
            respacing,
            seed: seeding::stage_seed(seed, "refiner"),
        };
        if [refiner.hidden, refiner.batch_size, refiner.grad_accum_steps, refiner.max_steps].contains(&0)
            || !(refiner.learning_rate > 0.0)
        {
            return Err(CliError::Config("refiner sizes, steps and learning rate must be positive".into()));
        }

        let pair_lists = p("pair_lists")?;
        let pairs_per_list = p("pairs_per_list")?;
        let val_pairs = p("val_pairs")?;
        let probes = p("probes")?;
        if pair_lists == 0 || probes == 0 {
            return Err(CliError::Config("pair_lists and probes must be positive".into()));
        }
        for (k, n) in [("pairs_per_list", pairs_per_list), ("val_pairs", val_pairs)] {
            if n == 0 || n % 2 != 0 {
                return Err(CliError::Config(format!("{} must be positive and even", k)));
            }
        }
        if world.n_val_ids < 2 || world.n_test_ids < 2 {
            return Err(CliError::Config("evaluation needs at least two validation and two test identities".into()));
        }
        let report_ks = values["report_ks"]
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|_| CliError::Config(format!("invalid k '{}' in report_ks", s))))
            .collect::<Result<Vec<_>, _>>()?;
        if report_ks.iter().any(|&k| k == 0 || k > probes) {
            return Err(CliError::Config(format!("report_ks entries must lie in 1..={}", probes)));
        }
        let out_dir = values["out_dir"].trim().to_string();

        Ok(Self {
            values,
            world,
            mask,
            encoder,
            schedule,
            inference_steps,
            respacing,
            diffusion,
            refiner,
            pair_lists,
            pairs_per_list,
            val_pairs,
            probes,
            report_ks,
            out_dir,
            seed,
        })
    }

    pub fn noise_schedule(&self) -> Schedule {
        Schedule::linear(self.schedule.0, self.schedule.1, self.schedule.2).expect("validated at load")
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Hash over the normalized values of every key that shapes `stage`'s
    /// weights, including those of the stages it depends on.
    pub fn stage_hash(&self, stage: Stage) -> [u8; 32] {
        let mut keys: Vec<&str> = ENCODER_KEYS.to_vec();
        if matches!(stage, Stage::Denoiser | Stage::Refiner) {
            keys.extend(DENOISER_KEYS);
        }
        if stage == Stage::Refiner {
            keys.extend(REFINER_KEYS);
        }
        let mut h = Sha256::new();
        for k in keys {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(self.values[k].trim().as_bytes());
            h.update(b"\n");
        }
        if stage != Stage::Encoder {
            // the resolved mask, so an empty override and its default agree
            h.update(self.mask.join(",").as_bytes());
        }
        h.finalize().into()
    }

    /// The configuration as a `key = value` document.
    pub fn to_text(&self) -> String {
        DEFAULTS.iter().map(|(k, _)| format!("{} = {}\n", k, self.values[*k])).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_module_defaults() {
        let c = RunConfig::defaults();
        assert_eq!(c.world.n_train_ids, 64);
        assert_eq!(c.mask.len(), 18);
        assert_eq!(c.diffusion.learning_rate, 1e-4);
        assert_eq!(c.diffusion.finetune_rate, 5e-5);
        assert_eq!((c.diffusion.batch_size, c.diffusion.grad_accum_steps), (4, 4));
        assert_eq!(c.encoder.arch.d_f, 512);
        assert_eq!(c.refiner.hidden, 256);
        assert_eq!(c.inference_steps, 20);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("seed = x"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("n_val_ids = 0"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("pairs_per_list = 3"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("no equals sign"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("respacing = sideways"), Err(CliError::Config(_))));
    }

    #[test]
    fn round_trips_through_text() {
        let c = RunConfig::parse("seed = 7 # master\n\ndiffusion_steps=10\n").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn stage_hash_tracks_relevant_keys() {
        let base = RunConfig::defaults();
        let eval_only = RunConfig::parse("pairs_per_list = 200").unwrap();
        let refiner_only = RunConfig::parse("refiner_steps = 10").unwrap();
        for s in [Stage::Encoder, Stage::Denoiser, Stage::Refiner] {
            assert_eq!(base.stage_hash(s), eval_only.stage_hash(s));
        }
        assert_eq!(base.stage_hash(Stage::Denoiser), refiner_only.stage_hash(Stage::Denoiser));
        assert_ne!(base.stage_hash(Stage::Refiner), refiner_only.stage_hash(Stage::Refiner));
        assert_ne!(base.stage_hash(Stage::Encoder), base.with_seed(1).unwrap().stage_hash(Stage::Encoder));
    }
}
