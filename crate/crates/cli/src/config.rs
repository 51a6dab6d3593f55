//! JSON experiment configuration: one document describing the training
//! hyperparameters, the margin head, the synthetic populations, and the
//! pair-generation / evaluation settings. Unknown keys are rejected and the
//! whole document is validated before any run starts.
//!
//! All randomness flows from the single top-level `seed`: the `seed` fields
//! on populations and pair generation are per-section offsets added to it,
//! so `--seed` re-keys the entire experiment.

use anyhow::{bail, Context, Result};
use isloss::bench::PopulationSpec;
use isloss::dataset::Dataset;
use isloss::loss::Temperature;
use isloss::margin::{Aggregate, MarginConfig, MarginKind};
use isloss::train::TrainConfig;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    seed: u64,
    out_dir: String,
    train_population: String,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    margin: RawMargin,
    populations: Vec<RawPopulation>,
    pairs: RawPairs,
    #[serde(default = "default_far_levels")]
    far_levels: Vec<f64>,
    #[serde(default = "default_hard_pair_count")]
    hard_pair_count: usize,
}

fn default_far_levels() -> Vec<f64> {
    vec![0.01, 0.001]
}

fn default_hard_pair_count() -> usize {
    50
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    #[serde(default = "d_embed_dim")]
    embed_dim: usize,
    #[serde(default = "d_lr")]
    lr: f64,
    #[serde(default = "d_momentum")]
    momentum: f64,
    #[serde(default = "d_weight_decay")]
    weight_decay: f64,
    #[serde(default = "d_batch_size")]
    batch_size: usize,
    #[serde(default = "d_epochs")]
    epochs: usize,
    #[serde(default)]
    lr_decay_epochs: Vec<usize>,
    #[serde(default = "d_lr_decay_factor")]
    lr_decay_factor: f64,
    #[serde(default = "d_temp")]
    temp: f64,
    #[serde(default = "d_aggregate")]
    aggregate: String,
}

fn d_embed_dim() -> usize {
    32
}
fn d_lr() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}
fn d_weight_decay() -> f64 {
    5e-4
}
fn d_batch_size() -> usize {
    128
}
fn d_epochs() -> usize {
    10
}
fn d_lr_decay_factor() -> f64 {
    10.0
}
fn d_temp() -> f64 {
    0.5
}
fn d_aggregate() -> String {
    "log-is".into()
}

impl Default for RawTrain {
    fn default() -> Self {
        Self {
            embed_dim: d_embed_dim(),
            lr: d_lr(),
            momentum: d_momentum(),
            weight_decay: d_weight_decay(),
            batch_size: d_batch_size(),
            epochs: d_epochs(),
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: d_lr_decay_factor(),
            temp: d_temp(),
            aggregate: d_aggregate(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMargin {
    #[serde(default = "d_scale")]
    s: f64,
    #[serde(default = "d_margin")]
    m: f64,
    #[serde(default = "d_kind")]
    kind: String,
}

fn d_scale() -> f64 {
    64.0
}
fn d_margin() -> f64 {
    0.5
}
fn d_kind() -> String {
    "additive-angular".into()
}

impl Default for RawMargin {
    fn default() -> Self {
        Self {
            s: d_scale(),
            m: d_margin(),
            kind: d_kind(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPopulation {
    name: String,
    class_count: usize,
    samples_per_class: usize,
    class_center_spread: f64,
    within_class_noise: f64,
    shift_vector: Vec<f64>,
    /// Offset added to the experiment seed.
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPairs {
    positives_per_class: usize,
    negatives_total: usize,
    /// Offset added to the experiment seed.
    #[serde(default)]
    seed: u64,
}

/// Fully validated experiment, seeds resolved.
pub struct Experiment {
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub populations: Vec<PopulationSpec>,
    pub pairs: PairsSection,
    pub far_levels: Vec<f64>,
    pub hard_pair_count: usize,
    pub train_population: String,
}

pub struct PairsSection {
    pub positives_per_class: usize,
    pub negatives_total: usize,
    pub seed: u64,
}

impl Experiment {
    pub fn train_population_spec(&self) -> Result<&PopulationSpec> {
        self.populations
            .iter()
            .find(|p| p.name == self.train_population)
            .with_context(|| {
                format!(
                    "train_population {:?} is not among the configured populations",
                    self.train_population
                )
            })
    }

    pub fn train_population_data(&self) -> Result<Dataset> {
        let spec = self.train_population_spec()?;
        Ok(isloss::bench::generate_population(spec)?.data)
    }
}

fn parse_aggregate(name: &str) -> Result<Aggregate> {
    match name {
        "mean-ce" => Ok(Aggregate::MeanCe),
        "log-is" => Ok(Aggregate::LogIs),
        other => bail!("unknown aggregate {other:?} (expected mean-ce or log-is)"),
    }
}

fn parse_kind(name: &str) -> Result<MarginKind> {
    match name {
        "additive-angular" => Ok(MarginKind::AdditiveAngular),
        "additive-cosine" => Ok(MarginKind::AdditiveCosine),
        other => bail!("unknown margin kind {other:?}"),
    }
}

/// Load, override, and validate an experiment config.
pub fn load(
    path: &Path,
    seed_override: Option<&u64>,
    out_dir_override: Option<&PathBuf>,
) -> Result<Experiment> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let raw: RawExperiment = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;

    let seed = seed_override.copied().unwrap_or(raw.seed);
    let out_dir = out_dir_override
        .cloned()
        .unwrap_or_else(|| PathBuf::from(&raw.out_dir));

    let temp = Temperature::new(raw.train.temp).context("train.temp")?;
    let margin = MarginConfig::new(raw.margin.s, raw.margin.m, parse_kind(&raw.margin.kind)?)
        .context("margin")?;
    let train = TrainConfig {
        embed_dim: raw.train.embed_dim,
        lr: raw.train.lr,
        momentum: raw.train.momentum,
        weight_decay: raw.train.weight_decay,
        batch_size: raw.train.batch_size,
        epochs: raw.train.epochs,
        lr_decay_epochs: raw.train.lr_decay_epochs,
        lr_decay_factor: raw.train.lr_decay_factor,
        temp,
        aggregate: parse_aggregate(&raw.train.aggregate)?,
        margin,
        seed,
    };

    if raw.populations.is_empty() {
        bail!("at least one population is required");
    }
    let populations: Vec<PopulationSpec> = raw
        .populations
        .into_iter()
        .map(|p| PopulationSpec {
            name: p.name,
            class_count: p.class_count,
            samples_per_class: p.samples_per_class,
            class_center_spread: p.class_center_spread,
            within_class_noise: p.within_class_noise,
            shift_vector: p.shift_vector,
            seed: seed.wrapping_add(p.seed),
        })
        .collect();
    for p in &populations {
        p.validate()
            .with_context(|| format!("population {:?}", p.name))?;
    }
    {
        let mut names: Vec<&str> = populations.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != populations.len() {
            bail!("population names must be unique");
        }
    }

    for &level in &raw.far_levels {
        if !(level > 0.0 && level < 1.0) {
            bail!("far_levels entries must be in (0, 1), got {level}");
        }
    }
    if raw.hard_pair_count == 0 {
        bail!("hard_pair_count must be positive");
    }
    if raw.pairs.positives_per_class == 0 && raw.pairs.negatives_total == 0 {
        bail!("pair generation must request at least one pair");
    }

    let experiment = Experiment {
        out_dir,
        train,
        populations,
        pairs: PairsSection {
            positives_per_class: raw.pairs.positives_per_class,
            negatives_total: raw.pairs.negatives_total,
            seed: seed.wrapping_add(raw.pairs.seed),
        },
        far_levels: raw.far_levels,
        hard_pair_count: raw.hard_pair_count,
        train_population: raw.train_population,
    };
    // the training population must exist
    experiment.train_population_spec()?;
    Ok(experiment)
}
