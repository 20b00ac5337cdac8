//! On-disk form of the synthetic dataset: `images.csv`, `attributes.txt` and
//! a manifest pinning both to the configuration that produced them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use difrec::prompts::{select_identity_relevant, AttributeTable, PromptVector};
use difrec::synthworld::{Split, SplitData, SyntheticDataset};
use difrec::Array;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const IMAGES: &str = "images.csv";
pub const ATTRIBUTES: &str = "attributes.txt";
pub const MANIFEST: &str = "dataset.manifest";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: SplitData<f64>,
    pub val: SplitData<f64>,
    pub test: SplitData<f64>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &SplitData<f64> {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

fn digest(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn world_hash(cfg: &RunConfig) -> String {
    let w = &cfg.world;
    digest(
        format!(
            "{} {} {} {} {} {} {} {}",
            w.n_train_ids, w.n_val_ids, w.n_test_ids, w.samples_per_id, w.image_dim, w.attr_count, w.within_id_noise, w.seed
        )
        .as_bytes(),
    )
}

fn sample_id(split: Split, global: usize, n: usize) -> String {
    format!("{}_{:05}_{:03}", split.name(), global, n)
}

pub fn write_dataset(world: &SyntheticDataset<f64>, cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let mut csv = String::from("sample_id,split,identity,label");
    for j in 0..cfg.world.image_dim {
        write!(csv, ",x{}", j).unwrap();
    }
    csv.push('\n');
    for s in Split::ALL {
        let d = world.split(s);
        let mut counter = vec![0usize; d.n_ids()];
        for i in 0..d.len() {
            let l = d.labels[i];
            write!(csv, "{},{},{},{}", sample_id(s, d.global_ids[l], counter[l]), s.name(), d.global_ids[l], l).unwrap();
            counter[l] += 1;
            for v in d.image(i) {
                write!(csv, ",{}", v).unwrap();
            }
            csv.push('\n');
        }
    }
    let attrs = world.attribute_table().to_text();
    std::fs::write(dir.join(IMAGES), &csv)?;
    std::fs::write(dir.join(ATTRIBUTES), &attrs)?;
    let manifest = format!(
        "world {}\n{} {}\n{} {}\n",
        world_hash(cfg),
        IMAGES,
        digest(csv.as_bytes()),
        ATTRIBUTES,
        digest(attrs.as_bytes())
    );
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

fn read_verified(dir: &Path, name: &str, manifest: &HashMap<String, String>) -> Result<String, CliError> {
    let text = std::fs::read_to_string(dir.join(name))
        .map_err(|e| CliError::Missing(format!("{} unavailable ({}); run synth-gen first", name, e)))?;
    if manifest.get(name) != Some(&digest(text.as_bytes())) {
        return Err(CliError::Integrity(format!("{} does not match the dataset manifest", name)));
    }
    Ok(text)
}

pub fn load_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset, CliError> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST))
        .map_err(|_| CliError::Missing(format!("no dataset in {}; run synth-gen first", dir.display())))?;
    let manifest: HashMap<String, String> = manifest_text
        .lines()
        .filter_map(|l| l.split_once(' '))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    if manifest.get("world") != Some(&world_hash(cfg)) {
        return Err(CliError::Integrity("dataset was generated under a different world configuration".into()));
    }
    let csv = read_verified(dir, IMAGES, &manifest)?;
    let attrs = AttributeTable::parse(&read_verified(dir, ATTRIBUTES, &manifest)?)?;
    let by_id: HashMap<&str, usize> = attrs.records.iter().enumerate().map(|(i, r)| (r.sample_id.as_str(), i)).collect();

    let bad = |line: usize, msg: &str| CliError::Integrity(format!("{} line {}: {}", IMAGES, line, msg));
    let dim = cfg.world.image_dim;
    let mut parts: HashMap<Split, (Vec<f64>, Vec<usize>, Vec<Option<PromptVector>>, Vec<usize>)> = HashMap::new();
    for (n, line) in csv.lines().enumerate().skip(1) {
        let mut f = line.split(',');
        let id = f.next().ok_or_else(|| bad(n + 1, "empty row"))?;
        let split = match f.next() {
            Some("train") => Split::Train,
            Some("val") => Split::Val,
            Some("test") => Split::Test,
            _ => return Err(bad(n + 1, "unknown split")),
        };
        let global: usize = f.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(n + 1, "bad identity"))?;
        let label: usize = f.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(n + 1, "bad label"))?;
        let values: Vec<f64> = f.map(|v| v.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad(n + 1, "bad value"))?;
        if values.len() != dim {
            return Err(bad(n + 1, "wrong number of values"));
        }
        let rec = by_id.get(id).ok_or_else(|| bad(n + 1, "sample missing from attribute file"))?;
        let prompt = select_identity_relevant(&attrs, &attrs.records[*rec], &cfg.mask)?;
        let entry = parts.entry(split).or_default();
        entry.0.extend(values);
        entry.1.push(label);
        if entry.2.len() <= label {
            entry.2.resize(label + 1, None);
            entry.3.resize(label + 1, usize::MAX);
        }
        entry.2[label].get_or_insert(prompt);
        entry.3[label] = global;
    }
    let mut take = |s: Split| -> Result<SplitData<f64>, CliError> {
        let (images, labels, prompts, global_ids) =
            parts.remove(&s).ok_or_else(|| CliError::Integrity(format!("{} has no {} samples", IMAGES, s.name())))?;
        let prompts = prompts
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| CliError::Integrity(format!("{} split has a gap in its labels", s.name())))?;
        Ok(SplitData { split: s, images: Array::from_vec(vec![labels.len(), dim], images)?, labels, prompts, global_ids })
    };
    Ok(Dataset { train: take(Split::Train)?, val: take(Split::Val)?, test: take(Split::Test)? })
}
