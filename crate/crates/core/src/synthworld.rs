//! Seeded synthetic identity world: one prototype per identity, noisy image
//! vectors around it, and attributes read off the prototype's leading signs.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Result};
use crate::prompts::{AttributeRecord, AttributeTable, PromptVector, DEFAULT_IDENTITY_MASK};
use crate::{seeding, NumericArray, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub n_train_ids: usize,
    pub n_val_ids: usize,
    pub n_test_ids: usize,
    pub samples_per_id: usize,
    pub image_dim: usize,
    pub attr_count: usize,
    pub within_id_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_train_ids: 64,
            n_val_ids: 32,
            n_test_ids: 32,
            samples_per_id: 20,
            image_dim: 128,
            attr_count: 18,
            within_id_noise: 0.3,
            seed: 0,
        }
    }
}

/// Minimum ratio of mean inter-prototype distance to within-identity spread.
pub const MIN_SEPARABILITY: f64 = 3.0;

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train_ids == 0 || self.n_val_ids == 0 || self.n_test_ids == 0 {
            return Err(config_err("every split needs at least one identity"));
        }
        if self.samples_per_id == 0 {
            return Err(config_err("samples_per_id must be positive"));
        }
        if self.attr_count == 0 || self.attr_count > self.image_dim {
            return Err(config_err(format!(
                "attr_count must lie in 1..={}, got {}",
                self.image_dim, self.attr_count
            )));
        }
        if !(self.within_id_noise >= 0.0 && self.within_id_noise.is_finite()) {
            return Err(config_err("within_id_noise must be a non-negative number"));
        }
        Ok(())
    }

    pub fn total_ids(&self) -> usize {
        self.n_train_ids + self.n_val_ids + self.n_test_ids
    }

    /// Attribute names used when exporting the world: the default mask first,
    /// then generic names if more attributes are configured.
    pub fn attribute_names(&self) -> Vec<String> {
        (0..self.attr_count)
            .map(|i| DEFAULT_IDENTITY_MASK.get(i).map_or_else(|| format!("Attr_{}", i), |s| s.to_string()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Samples of one split with split-local identity labels `0..n_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData<F> {
    pub split: Split,
    /// `[n_samples × image_dim]`.
    pub images: NumericArray<F>,
    pub labels: Vec<usize>,
    /// Indexed by split-local label.
    pub prompts: Vec<PromptVector>,
    /// Global identity id of each split-local label.
    pub global_ids: Vec<usize>,
}

impl<F: Scalar> SplitData<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_ids(&self) -> usize {
        self.prompts.len()
    }

    pub fn image(&self, i: usize) -> &[F] {
        self.images.row(i)
    }

    /// Prompt of every sample, aligned with `images`.
    pub fn sample_prompts(&self) -> Vec<PromptVector> {
        self.labels.iter().map(|&l| self.prompts[l].clone()).collect()
    }

    /// Sample indices grouped by label.
    pub fn by_label(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_ids()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// `(image, prompt, label)` in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (&[F], &PromptVector, usize)> + '_ {
        self.labels.iter().enumerate().map(move |(i, &l)| (self.image(i), &self.prompts[l], l))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset<F> {
    pub config: WorldConfig,
    /// `[total_ids × image_dim]`, global identity order.
    pub prototypes: NumericArray<F>,
    pub train: SplitData<F>,
    pub val: SplitData<F>,
    pub test: SplitData<F>,
    /// Identities whose prompt is shared with at least one other identity.
    pub prompt_collisions: usize,
    /// Mean inter-prototype distance over within-identity spread.
    pub separability: f64,
}

impl<F: Scalar> SyntheticDataset<F> {
    pub fn split(&self, split: Split) -> &SplitData<F> {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Attribute table over every sample of every split.
    pub fn attribute_table(&self) -> AttributeTable {
        let names = self.config.attribute_names();
        let mut records = Vec::new();
        for split in Split::ALL {
            let d = self.split(split);
            let mut counter = vec![0usize; d.n_ids()];
            for &l in &d.labels {
                records.push(AttributeRecord {
                    sample_id: format!("{}_{:05}_{:03}", split.name(), d.global_ids[l], counter[l]),
                    flags: d.prompts[l].flags().to_vec(),
                });
                counter[l] += 1;
            }
        }
        AttributeTable { names, records, count_line: true }
    }
}

pub fn split_iter<F: Scalar>(
    dataset: &SyntheticDataset<F>,
    split: Split,
) -> impl Iterator<Item = (&[F], &PromptVector, usize)> + '_ {
    dataset.split(split).iter()
}

pub fn generate_world<F: Scalar>(cfg: &WorldConfig) -> Result<SyntheticDataset<F>> {
    cfg.validate()?;
    let mut rng = seeding::rng(seeding::stage_seed(cfg.seed, "synthworld"));
    let n = cfg.total_ids();
    let dim = cfg.image_dim;
    let protos: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();

    let separability = separability(&protos, n, dim, cfg.within_id_noise);
    if separability <= MIN_SEPARABILITY {
        return Err(config_err(format!(
            "identities are not separable: inter/intra distance ratio {:.3} <= {}",
            separability, MIN_SEPARABILITY
        )));
    }

    let prompts: Vec<PromptVector> =
        (0..n).map(|i| PromptVector::from_signs(&protos[i * dim..i * dim + cfg.attr_count])).collect();
    let prompt_collisions = (0..n).filter(|&i| (0..n).any(|j| j != i && prompts[j] == prompts[i])).count();

    let ranges = [
        (Split::Train, 0..cfg.n_train_ids),
        (Split::Val, cfg.n_train_ids..cfg.n_train_ids + cfg.n_val_ids),
        (Split::Test, cfg.n_train_ids + cfg.n_val_ids..n),
    ];
    let mut splits = Vec::with_capacity(3);
    for (split, range) in ranges {
        let global_ids: Vec<usize> = range.collect();
        let mut images = Vec::with_capacity(global_ids.len() * cfg.samples_per_id * dim);
        let mut labels = Vec::new();
        for (local, &g) in global_ids.iter().enumerate() {
            let proto = &protos[g * dim..(g + 1) * dim];
            for _ in 0..cfg.samples_per_id {
                for &p in proto {
                    let e: f64 = rng.sample(StandardNormal);
                    images.push(F::lit(p + cfg.within_id_noise * e));
                }
                labels.push(local);
            }
        }
        splits.push(SplitData {
            split,
            images: NumericArray::from_vec(vec![labels.len(), dim], images)?,
            labels,
            prompts: global_ids.iter().map(|&g| prompts[g].clone()).collect(),
            global_ids,
        });
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(SyntheticDataset {
        config: cfg.clone(),
        prototypes: NumericArray::from_vec(vec![n, dim], protos.iter().map(|&v| F::lit(v)).collect())?,
        train,
        val,
        test,
        prompt_collisions,
        separability,
    })
}

fn separability(protos: &[f64], n: usize, dim: usize, noise: f64) -> f64 {
    if noise == 0.0 {
        return f64::INFINITY;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = (0..dim).map(|k| (protos[i * dim + k] - protos[j * dim + k]).powi(2)).sum();
            total += d.sqrt();
            pairs += 1;
        }
    }
    let inter = if pairs == 0 { (2.0 * dim as f64).sqrt() } else { total / pairs as f64 };
    inter / (noise * (dim as f64).sqrt())
}
