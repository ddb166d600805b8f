//! Flat key=value run configuration.
//!
//! The format is deliberately plain: one `section.key = value` pair per
//! line, `#` comments, no nesting, no quoting. Unknown or duplicate keys are
//! hard errors so a typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use prunetree::criteria::Criterion;
use prunetree::engine::{EngineConfig, Method};
use prunetree::nn::{NetworkSpec, TrainConfig};
use prunetree::similarity::{RbfSigma, SimilarityMetric};

use crate::CliError;

#[derive(Debug, Clone)]
pub enum DatasetConfig {
    Synthetic {
        seed: u64,
        classes: usize,
        train_samples: usize,
        heldout_samples: usize,
        image_size: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone)]
pub struct ArchConfig {
    pub input_channels: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub strides: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub engine: EngineConfig,
    pub keep_iterates: bool,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {}", path.display(), e))
        })?;
        let mut raw = Raw::parse(&text)?;
        let cfg = RunConfig::from_raw(&mut raw)?;
        raw.finish()?;
        Ok(cfg)
    }

    fn from_raw(raw: &mut Raw) -> Result<RunConfig, CliError> {
        let dataset = match raw.require::<String>("dataset.source")?.as_str() {
            "synthetic" => DatasetConfig::Synthetic {
                seed: raw.get("dataset.seed")?.unwrap_or(0),
                classes: raw.require("dataset.classes")?,
                train_samples: raw.require("dataset.train_samples")?,
                heldout_samples: raw.require("dataset.heldout_samples")?,
                image_size: raw.require("dataset.image_size")?,
            },
            "idx" => DatasetConfig::Idx {
                train_images: raw.require("dataset.train_images")?,
                train_labels: raw.require("dataset.train_labels")?,
                test_images: raw.require("dataset.test_images")?,
                test_labels: raw.require("dataset.test_labels")?,
            },
            other => {
                return Err(CliError::Config(format!(
                    "dataset.source must be `synthetic` or `idx`, got `{}`",
                    other
                )))
            }
        };

        let widths = raw.require_list("arch.widths")?;
        let blocks = raw.require_list("arch.blocks")?;
        let strides = match raw.get_list("arch.strides")? {
            Some(s) => s,
            // First stage keeps resolution, later stages halve it.
            None => (0..widths.len()).map(|i| if i == 0 { 1 } else { 2 }).collect(),
        };
        if widths.contains(&0) {
            return Err(CliError::Config("arch.widths entries must be positive".to_string()));
        }
        let arch = ArchConfig {
            input_channels: raw.get("arch.input_channels")?.unwrap_or(1),
            widths,
            blocks,
            strides,
        };

        let mut train = TrainConfig::default();
        if let Some(v) = raw.get("train.epochs")? {
            train.epochs = v;
        }
        if let Some(v) = raw.get("train.batch_size")? {
            train.batch_size = v;
        }
        if let Some(v) = raw.get("train.learning_rate")? {
            train.learning_rate = v;
        }
        if let Some(v) = raw.get("train.momentum")? {
            train.momentum = v;
        }
        if let Some(v) = raw.get("train.weight_decay")? {
            train.weight_decay = v;
        }
        if let Some(text) = raw.get::<String>("train.lr_schedule")? {
            train.lr_schedule = parse_schedule(&text)?;
        }

        let mut engine = EngineConfig::default();
        if let Some(v) = raw.get("engine.K")? {
            engine.iterations = v;
        }
        if let Some(v) = raw.get("engine.epsilon")? {
            engine.epsilon = v;
        }
        if let Some(v) = raw.get("engine.recovery_epochs")? {
            engine.recovery_epochs = v;
        }
        if let Some(v) = raw.get("engine.post_select_epochs")? {
            engine.post_select_epochs = v;
        }
        if let Some(text) = raw.get::<String>("engine.method")? {
            engine.method = match text.as_str() {
                "cka" => Method::CkaGuided,
                "random-walk" | "random_walk" => Method::RandomWalk,
                other => {
                    return Err(CliError::Config(format!(
                        "engine.method must be `cka` or `random-walk`, got `{}`",
                        other
                    )))
                }
            };
        }
        if let Some(text) = raw.get::<String>("engine.metric")? {
            engine.metric = parse_metric(&text)?;
        }
        if let Some(text) = raw.get::<String>("engine.criterion")? {
            engine.criterion = match text.as_str() {
                "kl" => Criterion::KlDivergence,
                "l1" => Criterion::L1Norm,
                other => {
                    return Err(CliError::Config(format!(
                        "engine.criterion must be `kl` or `l1`, got `{}`",
                        other
                    )))
                }
            };
        }
        if let Some(v) = raw.get("engine.seed")? {
            engine.seed = v;
        }
        if let Some(v) = raw.get("engine.stop_on_negative_delta")? {
            engine.stop_on_negative_delta = v;
        }
        if let Some(v) = raw.get("engine.probe_size")? {
            engine.probe_size = v;
        }
        if let Some(v) = raw.get("engine.group_size")? {
            engine.group_size = v;
        }
        if let Some(v) = raw.get("engine.tau")? {
            engine.tau = v;
        }
        engine.workers = worker_count()?;

        Ok(RunConfig {
            dataset,
            arch,
            train,
            engine,
            keep_iterates: raw.get("engine.keep_iterates")?.unwrap_or(false),
            out_dir: raw.get::<PathBuf>("out_dir")?,
        })
    }

    /// Network topology for `classes` output classes and the configured
    /// input geometry.
    pub fn spec(&self, image_h: usize, image_w: usize, classes: usize) -> Result<NetworkSpec, CliError> {
        NetworkSpec::staged(
            (self.arch.input_channels, image_h, image_w),
            &self.arch.widths,
            &self.arch.blocks,
            &self.arch.strides,
            classes,
        )
        .map_err(CliError::from)
    }

    /// Fine-tuning hyperparameters for the engine: the baseline recipe at
    /// its final (post-schedule) learning rate, with the schedule cleared.
    /// Epoch counts are decided per phase by the engine.
    pub fn tune(&self) -> TrainConfig {
        let mult = self.train.lr_schedule.last().map(|&(_, m)| m).unwrap_or(1.0);
        TrainConfig {
            epochs: 0,
            learning_rate: self.train.learning_rate * mult,
            lr_schedule: Vec::new(),
            ..self.train.clone()
        }
    }
}

/// Candidate fine-tunes may run on up to two threads; `PRUNETREE_THREADS`
/// caps that.
fn worker_count() -> Result<usize, CliError> {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut workers = available.clamp(1, 2);
    if let Ok(text) = std::env::var("PRUNETREE_THREADS") {
        let cap: usize = text.parse().map_err(|_| {
            CliError::Config(format!("PRUNETREE_THREADS must be a positive integer, got `{}`", text))
        })?;
        if cap == 0 {
            return Err(CliError::Config("PRUNETREE_THREADS must be a positive integer".to_string()));
        }
        workers = workers.min(cap);
    }
    Ok(workers)
}

fn parse_metric(text: &str) -> Result<SimilarityMetric, CliError> {
    if text == "linear" {
        return Ok(SimilarityMetric::Linear);
    }
    if text == "rbf" {
        return Ok(SimilarityMetric::Rbf(RbfSigma::Median));
    }
    if let Some(rest) = text.strip_prefix("rbf:") {
        let sigma: f64 = rest.parse().map_err(|_| {
            CliError::Config(format!("engine.metric rbf bandwidth `{}` is not a number", rest))
        })?;
        return Ok(SimilarityMetric::Rbf(RbfSigma::Fixed(sigma)));
    }
    Err(CliError::Config(format!(
        "engine.metric must be `linear`, `rbf`, or `rbf:<sigma>`, got `{}`",
        text
    )))
}

/// `epoch:multiplier` pairs separated by commas, e.g. `24:0.25,40:0.1`.
fn parse_schedule(text: &str) -> Result<Vec<(usize, f64)>, CliError> {
    let mut schedule = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (epoch, mult) = part.split_once(':').ok_or_else(|| {
            CliError::Config(format!("train.lr_schedule entry `{}` is not `epoch:multiplier`", part))
        })?;
        let epoch = epoch.trim().parse().map_err(|_| {
            CliError::Config(format!("train.lr_schedule epoch `{}` is not an integer", epoch))
        })?;
        let mult = mult.trim().parse().map_err(|_| {
            CliError::Config(format!("train.lr_schedule multiplier `{}` is not a number", mult))
        })?;
        schedule.push((epoch, mult));
    }
    Ok(schedule)
}

struct Raw {
    map: BTreeMap<String, String>,
}

impl Raw {
    fn parse(text: &str) -> Result<Raw, CliError> {
        let mut map = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`, got `{}`", idx + 1, line))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if map.insert(key.clone(), value).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key `{}`", idx + 1, key)));
            }
        }
        Ok(Raw { map })
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some(text) => text.parse().map(Some).map_err(|e| {
                CliError::Config(format!("key `{}`: invalid value `{}` ({})", key, text, e))
            }),
        }
    }

    fn require<T: FromStr>(&mut self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| CliError::Config(format!("missing required key `{}`", key)))
    }

    fn get_list(&mut self, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(text) => {
                let mut out = Vec::new();
                for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    out.push(part.parse().map_err(|_| {
                        CliError::Config(format!("key `{}`: `{}` is not an integer", key, part))
                    })?);
                }
                if out.is_empty() {
                    return Err(CliError::Config(format!("key `{}` must list at least one value", key)));
                }
                Ok(Some(out))
            }
        }
    }

    fn require_list(&mut self, key: &str) -> Result<Vec<usize>, CliError> {
        self.get_list(key)?
            .ok_or_else(|| CliError::Config(format!("missing required key `{}`", key)))
    }

    fn finish(self) -> Result<(), CliError> {
        if self.map.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.map.keys().map(String::as_str).collect();
        Err(CliError::Config(format!("unknown config keys: {}", keys.join(", "))))
    }
}
