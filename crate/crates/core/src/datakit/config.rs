//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Every key has a default; the
//! `preset` key loads one of the published hyperparameter sets first, and
//! any explicit key then overrides it. Each resolved value remembers where it
//! came from so runs can report it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gan::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Selection {
    Max,
    Mean,
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::Max => "max",
            Selection::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CondStrategy {
    DualMiner,
    AsFamily,
}

impl fmt::Display for CondStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CondStrategy::DualMiner => "dual-miner",
            CondStrategy::AsFamily => "as-family",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bandwidth::Median => f.write_str("median"),
            Bandwidth::Fixed(s) => write!(f, "{s:?}"),
        }
    }
}

/// Where a resolved value came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Provenance {
    /// Built-in default chosen for this tool.
    Default,
    /// Taken from a named published preset.
    Preset(String),
    /// Set explicitly by the document or a command-line override.
    User,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Default => f.write_str("default"),
            Provenance::Preset(p) => write!(f, "preset:{p}"),
            Provenance::User => f.write_str("user"),
        }
    }
}

/// Documentation for one configuration key.
pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    /// `published` when the default or a preset reproduces a published setting,
    /// `artifact` when it is a choice made for this tool.
    pub origin: &'static str,
    pub help: &'static str,
}

pub const KEYS: &[KeyDoc] = &[
    KeyDoc { key: "preset", default: "none", origin: "published", help: "hyperparameter preset: none, appendixA-mnist, appendixA-progan, appendixA-sngan, appendixA-biggan" },
    KeyDoc { key: "batch_size", default: "64", origin: "published", help: "minibatch size K (appendixA-mnist uses 64)" },
    KeyDoc { key: "lr_generator", default: "0.0005", origin: "artifact", help: "Adam learning rate for generators during pretraining" },
    KeyDoc { key: "lr_critic", default: "0.0005", origin: "artifact", help: "Adam learning rate for critics" },
    KeyDoc { key: "lr_miner", default: "0.003", origin: "artifact", help: "Adam learning rate for miners" },
    KeyDoc { key: "beta1", default: "0", origin: "artifact", help: "Adam first-moment decay" },
    KeyDoc { key: "beta2", default: "0.9", origin: "artifact", help: "Adam second-moment decay" },
    KeyDoc { key: "gp_weight", default: "10", origin: "artifact", help: "gradient-penalty weight lambda (unpublished; WGAN-GP convention)" },
    KeyDoc { key: "n_critic", default: "5", origin: "artifact", help: "critic steps per generator/miner step (unpublished; WGAN-GP convention)" },
    KeyDoc { key: "iterations", default: "2000", origin: "artifact", help: "pretraining generator iterations" },
    KeyDoc { key: "mine_iterations", default: "600", origin: "artifact", help: "stage-1 (mining) iterations" },
    KeyDoc { key: "finetune_iterations", default: "400", origin: "artifact", help: "stage-2 (joint finetuning) iterations" },
    KeyDoc { key: "stage2_lr_scale", default: "0.1", origin: "artifact", help: "stage-2 generator/critic learning rate as a multiple of lr_miner" },
    KeyDoc { key: "seed", default: "0", origin: "artifact", help: "random seed" },
    KeyDoc { key: "selection", default: "max", origin: "published", help: "multi-generator selection: max or mean (ablation)" },
    KeyDoc { key: "miner_depth", default: "auto", origin: "published", help: "miner layers; auto = 2 for data of dimension <= 2, else 4" },
    KeyDoc { key: "miner_width", default: "auto", origin: "published", help: "miner hidden width; auto = latent dimension" },
    KeyDoc { key: "latent_dim", default: "8", origin: "artifact", help: "generator latent dimension" },
    KeyDoc { key: "gen_width", default: "64", origin: "artifact", help: "generator hidden width" },
    KeyDoc { key: "gen_depth", default: "4", origin: "artifact", help: "generator layer count" },
    KeyDoc { key: "critic_width", default: "64", origin: "artifact", help: "critic hidden width" },
    KeyDoc { key: "critic_depth", default: "3", origin: "artifact", help: "critic layer count" },
    KeyDoc { key: "embedding_dim", default: "8", origin: "artifact", help: "class embedding dimension of conditional generators" },
    KeyDoc { key: "window", default: "200", origin: "artifact", help: "selector sliding window in minibatches" },
    KeyDoc { key: "critic_source", default: "0", origin: "artifact", help: "index of the source critic that initializes the shared critic" },
    KeyDoc { key: "conditional", default: "false", origin: "artifact", help: "pretrain a class-conditional generator (one class per mixture component)" },
    KeyDoc { key: "cond_strategy", default: "dual-miner", origin: "published", help: "conditional mining: dual-miner or as-family" },
    KeyDoc { key: "source_data", default: "ring:8:2.0:0.01", origin: "artifact", help: "pretraining data: mixture spec" },
    KeyDoc { key: "target_data", default: "1@2.0,0.0:0.01", origin: "artifact", help: "target distribution: mixture spec" },
    KeyDoc { key: "target_file", default: "", origin: "artifact", help: "target samples from an IDX file (overrides target_data)" },
    KeyDoc { key: "target_samples", default: "100", origin: "artifact", help: "size of the target training set drawn from target_data" },
    KeyDoc { key: "sources", default: "", origin: "artifact", help: "comma-separated source checkpoint paths for mining" },
    KeyDoc { key: "checkpoint", default: "", origin: "artifact", help: "input checkpoint for finetune/sample/eval" },
    KeyDoc { key: "samples", default: "1000", origin: "artifact", help: "number of points written by sample" },
    KeyDoc { key: "eval_cap", default: "10000", origin: "published", help: "maximum evaluation sample count" },
    KeyDoc { key: "eval_real_samples", default: "1000", origin: "artifact", help: "held-out real points drawn from target_data for eval" },
    KeyDoc { key: "bandwidth", default: "median", origin: "artifact", help: "KMMD kernel bandwidth: median or a positive number" },
    KeyDoc { key: "target_class", default: "none", origin: "artifact", help: "class index for classifier error (classifier trained on source_data components)" },
    KeyDoc { key: "log_every", default: "10", origin: "artifact", help: "metric stream interval in iterations" },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: String,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub lr_miner: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gp_weight: f64,
    pub n_critic: usize,
    pub iterations: usize,
    pub mine_iterations: usize,
    pub finetune_iterations: usize,
    pub stage2_lr_scale: f64,
    pub seed: u64,
    pub selection: Selection,
    pub miner_depth: Option<usize>,
    pub miner_width: Option<usize>,
    pub latent_dim: usize,
    pub gen_width: usize,
    pub gen_depth: usize,
    pub critic_width: usize,
    pub critic_depth: usize,
    pub embedding_dim: usize,
    pub window: usize,
    pub critic_source: usize,
    pub conditional: bool,
    pub cond_strategy: CondStrategy,
    pub source_data: String,
    pub target_data: String,
    pub target_file: String,
    pub target_samples: usize,
    pub sources: Vec<String>,
    pub checkpoint: String,
    pub samples: usize,
    pub eval_cap: usize,
    pub eval_real_samples: usize,
    pub bandwidth: Bandwidth,
    pub target_class: Option<usize>,
    pub log_every: usize,
    #[serde(skip)]
    pub provenance: BTreeMap<String, Provenance>,
}

/// Published hyperparameter presets.
pub fn preset_values(name: &str) -> Option<&'static [(&'static str, &'static str)]> {
    Some(match name {
        "none" => &[],
        "appendixA-mnist" => &[
            ("batch_size", "64"),
            ("lr_generator", "0.0004"),
            ("lr_critic", "0.0004"),
            ("lr_miner", "0.0004"),
            ("beta1", "0.5"),
            ("beta2", "0.999"),
            ("miner_depth", "2"),
        ],
        "appendixA-progan" => &[
            ("batch_size", "4"),
            ("lr_generator", "0.0015"),
            ("lr_critic", "0.0015"),
            ("lr_miner", "0.0015"),
            ("beta1", "0"),
            ("beta2", "0.99"),
            ("miner_depth", "4"),
        ],
        "appendixA-sngan" => &[
            ("batch_size", "8"),
            ("lr_generator", "0.0002"),
            ("lr_critic", "0.0002"),
            ("lr_miner", "0.0002"),
            ("beta1", "0"),
            ("beta2", "0.9"),
            ("miner_depth", "3"),
        ],
        "appendixA-biggan" => &[
            ("batch_size", "256"),
            ("lr_generator", "0.0001"),
            ("lr_critic", "0.0004"),
            ("lr_miner", "0.0001"),
            ("beta1", "0"),
            ("beta2", "0.999"),
            ("miner_depth", "4"),
        ],
        _ => return None,
    })
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            preset: String::new(),
            batch_size: 0,
            lr_generator: 0.0,
            lr_critic: 0.0,
            lr_miner: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            gp_weight: 0.0,
            n_critic: 0,
            iterations: 0,
            mine_iterations: 0,
            finetune_iterations: 0,
            stage2_lr_scale: 0.0,
            seed: 0,
            selection: Selection::Max,
            miner_depth: None,
            miner_width: None,
            latent_dim: 0,
            gen_width: 0,
            gen_depth: 0,
            critic_width: 0,
            critic_depth: 0,
            embedding_dim: 0,
            window: 0,
            critic_source: 0,
            conditional: false,
            cond_strategy: CondStrategy::DualMiner,
            source_data: String::new(),
            target_data: String::new(),
            target_file: String::new(),
            target_samples: 0,
            sources: Vec::new(),
            checkpoint: String::new(),
            samples: 0,
            eval_cap: 0,
            eval_real_samples: 0,
            bandwidth: Bandwidth::Median,
            target_class: None,
            log_every: 0,
            provenance: BTreeMap::new(),
        };
        for doc in KEYS {
            cfg.assign(doc.key, doc.default)
                .expect("built-in defaults are valid");
            cfg.provenance.insert(doc.key.to_string(), Provenance::Default);
        }
        cfg
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("`{value}` is not a valid {}", std::any::type_name::<T>())))
}

fn auto(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

impl RunConfig {
    fn assign(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => {
                if preset_values(v).is_none() {
                    return Err(Error::config(key, format!("unknown preset `{v}`")));
                }
                self.preset = v.to_string();
            }
            "batch_size" => self.batch_size = num(key, v)?,
            "lr_generator" => self.lr_generator = num(key, v)?,
            "lr_critic" => self.lr_critic = num(key, v)?,
            "lr_miner" => self.lr_miner = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "gp_weight" => self.gp_weight = num(key, v)?,
            "n_critic" => self.n_critic = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "mine_iterations" => self.mine_iterations = num(key, v)?,
            "finetune_iterations" => self.finetune_iterations = num(key, v)?,
            "stage2_lr_scale" => self.stage2_lr_scale = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "selection" => {
                self.selection = match v {
                    "max" => Selection::Max,
                    "mean" => Selection::Mean,
                    _ => return Err(Error::config(key, format!("`{v}` is not one of: max, mean"))),
                }
            }
            "miner_depth" => self.miner_depth = auto(key, v)?,
            "miner_width" => self.miner_width = auto(key, v)?,
            "latent_dim" => self.latent_dim = num(key, v)?,
            "gen_width" => self.gen_width = num(key, v)?,
            "gen_depth" => self.gen_depth = num(key, v)?,
            "critic_width" => self.critic_width = num(key, v)?,
            "critic_depth" => self.critic_depth = num(key, v)?,
            "embedding_dim" => self.embedding_dim = num(key, v)?,
            "window" => self.window = num(key, v)?,
            "critic_source" => self.critic_source = num(key, v)?,
            "conditional" => self.conditional = num(key, v)?,
            "cond_strategy" => {
                self.cond_strategy = match v {
                    "dual-miner" => CondStrategy::DualMiner,
                    "as-family" => CondStrategy::AsFamily,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("`{v}` is not one of: dual-miner, as-family"),
                        ))
                    }
                }
            }
            "source_data" => self.source_data = v.to_string(),
            "target_data" => self.target_data = v.to_string(),
            "target_file" => self.target_file = v.to_string(),
            "target_samples" => self.target_samples = num(key, v)?,
            "sources" => {
                self.sources = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "checkpoint" => self.checkpoint = v.to_string(),
            "samples" => self.samples = num(key, v)?,
            "eval_cap" => self.eval_cap = num(key, v)?,
            "eval_real_samples" => self.eval_real_samples = num(key, v)?,
            "bandwidth" => {
                self.bandwidth = if v == "median" {
                    Bandwidth::Median
                } else {
                    Bandwidth::Fixed(num(key, v)?)
                }
            }
            "target_class" => {
                self.target_class = if v == "none" { None } else { Some(num(key, v)?) }
            }
            "log_every" => self.log_every = num(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Current value of `key` in the same text form the parser accepts.
    pub fn value_text(&self, key: &str) -> Option<String> {
        let opt = |o: Option<usize>| o.map_or("auto".to_string(), |v| v.to_string());
        Some(match key {
            "preset" => self.preset.clone(),
            "batch_size" => self.batch_size.to_string(),
            "lr_generator" => format!("{:?}", self.lr_generator),
            "lr_critic" => format!("{:?}", self.lr_critic),
            "lr_miner" => format!("{:?}", self.lr_miner),
            "beta1" => format!("{:?}", self.beta1),
            "beta2" => format!("{:?}", self.beta2),
            "gp_weight" => format!("{:?}", self.gp_weight),
            "n_critic" => self.n_critic.to_string(),
            "iterations" => self.iterations.to_string(),
            "mine_iterations" => self.mine_iterations.to_string(),
            "finetune_iterations" => self.finetune_iterations.to_string(),
            "stage2_lr_scale" => format!("{:?}", self.stage2_lr_scale),
            "seed" => self.seed.to_string(),
            "selection" => self.selection.to_string(),
            "miner_depth" => opt(self.miner_depth),
            "miner_width" => opt(self.miner_width),
            "latent_dim" => self.latent_dim.to_string(),
            "gen_width" => self.gen_width.to_string(),
            "gen_depth" => self.gen_depth.to_string(),
            "critic_width" => self.critic_width.to_string(),
            "critic_depth" => self.critic_depth.to_string(),
            "embedding_dim" => self.embedding_dim.to_string(),
            "window" => self.window.to_string(),
            "critic_source" => self.critic_source.to_string(),
            "conditional" => self.conditional.to_string(),
            "cond_strategy" => self.cond_strategy.to_string(),
            "source_data" => self.source_data.clone(),
            "target_data" => self.target_data.clone(),
            "target_file" => self.target_file.clone(),
            "target_samples" => self.target_samples.to_string(),
            "sources" => self.sources.join(","),
            "checkpoint" => self.checkpoint.clone(),
            "samples" => self.samples.to_string(),
            "eval_cap" => self.eval_cap.to_string(),
            "eval_real_samples" => self.eval_real_samples.to_string(),
            "bandwidth" => self.bandwidth.to_string(),
            "target_class" => self
                .target_class
                .map_or("none".to_string(), |c| c.to_string()),
            "log_every" => self.log_every.to_string(),
            _ => return None,
        })
    }

    /// Fully resolved document; parsing it yields an equal configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for doc in KEYS {
            let v = self.value_text(doc.key).expect("documented key");
            out.push_str(&format!("{} = {}\n", doc.key, v));
        }
        out
    }

    pub fn provenance_of(&self, key: &str) -> Option<&Provenance> {
        self.provenance.get(key)
    }

    /// Applies `key=value` pairs on top of the current values.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut entries = Vec::new();
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::config(pair, "override must look like key=value"))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_entries(&entries)?;
        self.validate()
    }

    fn apply_entries(&mut self, entries: &[(String, String)]) -> Result<()> {
        // Presets go first so explicit keys in the same document win.
        for (k, v) in entries.iter().filter(|(k, _)| k == "preset") {
            self.assign(k, v)?;
            self.provenance.insert(k.clone(), Provenance::User);
            for (pk, pv) in preset_values(v).expect("validated by assign") {
                self.assign(pk, pv)?;
                self.provenance
                    .insert(pk.to_string(), Provenance::Preset(v.to_string()));
            }
        }
        for (k, v) in entries.iter().filter(|(k, _)| k != "preset") {
            self.assign(k, v)?;
            self.provenance.insert(k.clone(), Provenance::User);
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, msg))
            }
        };
        check(self.batch_size >= 2, "batch_size", "must be at least 2")?;
        for (k, v) in [
            ("lr_generator", self.lr_generator),
            ("lr_critic", self.lr_critic),
            ("lr_miner", self.lr_miner),
        ] {
            check(v > 0.0 && v.is_finite(), k, "must be positive")?;
        }
        check((0.0..1.0).contains(&self.beta1), "beta1", "must be in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must be in [0, 1)")?;
        check(self.gp_weight >= 0.0 && self.gp_weight.is_finite(), "gp_weight", "must be >= 0")?;
        check(self.n_critic >= 1, "n_critic", "must be at least 1")?;
        check(
            self.stage2_lr_scale > 0.0 && self.stage2_lr_scale.is_finite(),
            "stage2_lr_scale",
            "must be positive",
        )?;
        check(self.miner_depth != Some(0), "miner_depth", "must be at least 1")?;
        check(self.miner_width != Some(0), "miner_width", "must be at least 1")?;
        for (k, v) in [
            ("latent_dim", self.latent_dim),
            ("gen_width", self.gen_width),
            ("gen_depth", self.gen_depth),
            ("critic_width", self.critic_width),
            ("embedding_dim", self.embedding_dim),
            ("window", self.window),
            ("target_samples", self.target_samples),
            ("samples", self.samples),
            ("eval_cap", self.eval_cap),
            ("eval_real_samples", self.eval_real_samples),
            ("log_every", self.log_every),
        ] {
            check(v >= 1, k, "must be at least 1")?;
        }
        check(self.critic_depth >= 2, "critic_depth", "must be at least 2")?;
        if let Bandwidth::Fixed(s) = self.bandwidth {
            check(s > 0.0 && s.is_finite(), "bandwidth", "must be positive or `median`")?;
        }
        check(!self.source_data.is_empty(), "source_data", "must not be empty")?;
        crate::datakit::MixtureSpec::parse(&self.source_data)
            .map_err(|e| Error::config("source_data", e.to_string()))?;
        crate::datakit::MixtureSpec::parse(&self.target_data)
            .map_err(|e| Error::config("target_data", e.to_string()))?;
        for (key, path) in std::iter::once(("target_file", &self.target_file))
            .chain(std::iter::once(("checkpoint", &self.checkpoint)))
            .chain(self.sources.iter().map(|s| ("sources", s)))
        {
            check(
                path.is_empty() || Path::new(path).exists(),
                key,
                &format!("path `{path}` does not exist"),
            )?;
        }
        Ok(())
    }

    /// Miner depth after resolving `auto` for data of dimension `data_dim`.
    pub fn resolved_miner_depth(&self, data_dim: usize) -> usize {
        self.miner_depth
            .unwrap_or(if data_dim <= 2 { 2 } else { 4 })
    }

    pub fn resolved_miner_width(&self) -> usize {
        self.miner_width.unwrap_or(self.latent_dim)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr_generator: self.lr_generator,
            lr_critic: self.lr_critic,
            lr_miner: self.lr_miner,
            beta1: self.beta1,
            beta2: self.beta2,
            gp_weight: self.gp_weight,
            n_critic: self.n_critic,
            iterations: self.iterations,
            seed: self.seed,
        }
    }

    /// Hex SHA-256 of the resolved document.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Parses a configuration document and validates the result.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(line, format!("line {} is not `key = value`", lineno + 1))
        })?;
        let k = k.trim();
        if !KEYS.iter().any(|d| d.key == k) {
            return Err(Error::config(k, "unknown key"));
        }
        entries.push((k.to_string(), v.trim().to_string()));
    }
    let mut cfg = RunConfig::default();
    cfg.apply_entries(&entries)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_file(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
