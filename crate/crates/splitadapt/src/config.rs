//! Experiment configuration: INI files (`[section]` + `key = value`) with
//! `section.key=value` overrides applied on top.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use splitadapt_core::adapt::AdaptConfig;
use splitadapt_core::attack::DecoderConfig;
use splitadapt_core::client::ClientConfig;
use splitadapt_core::server::{QuantConfig, ServerConfig, TrainConfig, PRETRAIN};
use splitadapt_core::vit::ModelSpec;

/// A rejected configuration value, naming the field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Channel,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "channel" => Ok(TransportKind::Channel),
            "tcp" => Ok(TransportKind::Tcp),
            _ => Err(format!("expected channel or tcp, got {s:?}")),
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::Channel => "channel",
            TransportKind::Tcp => "tcp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub spec: ModelSpec,
    pub split: usize,
    pub data_seed: u64,
    pub server_per_class: usize,
    pub server_test_per_class: usize,
    pub pretrain: TrainConfig,
    pub quant: QuantConfig,
    pub tune: TrainConfig,
    pub use_ht: bool,
    pub use_qat: bool,
    /// Seed field unused; each run supplies its own.
    pub client: ClientConfig,
    pub pool_per_class: usize,
    pub test_per_class: usize,
    /// Seed field unused; each run supplies its own.
    pub adapt: AdaptConfig,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub decoder: DecoderConfig,
    pub attack_seeds: Vec<u64>,
    pub sweep: Vec<f64>,
    pub transport: TransportKind,
    pub host: String,
    pub port: u16,
    pub timeout_secs: u64,
    pub max_sessions: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let server = ServerConfig::default();
        Self {
            spec: server.spec,
            split: server.split,
            data_seed: 100,
            server_per_class: 200,
            server_test_per_class: 50,
            pretrain: PRETRAIN,
            quant: server.quant,
            tune: server.tune,
            use_ht: server.use_ht,
            use_qat: server.use_qat,
            client: ClientConfig::default(),
            pool_per_class: 40,
            test_per_class: 100,
            adapt: AdaptConfig::default(),
            shots: vec![3, 5, 10],
            seeds: vec![1, 42, 215],
            decoder: DecoderConfig::default(),
            attack_seeds: vec![1, 42, 215, 7, 99, 3, 4, 5, 6, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18],
            sweep: vec![0.2, 0.4, 0.8, 1.2, 2.0],
            transport: TransportKind::Channel,
            host: "127.0.0.1".into(),
            port: 7878,
            timeout_secs: 30,
            max_sessions: 1,
            output_dir: PathBuf::from("sa-output"),
        }
    }
}

fn parse<T: FromStr>(field: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.trim().parse().map_err(|e: T::Err| err(field, format!("cannot parse {v:?}: {e}")))
}

fn parse_list<T: FromStr>(field: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(field, s)).collect()
}

fn list<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Every key in file order, used for both output and validation of unknown keys.
pub const KEYS: &[&str] = &[
    "model.image_size",
    "model.channels",
    "model.patch_size",
    "model.embed_dim",
    "model.num_heads",
    "model.mlp_hidden",
    "model.num_layers",
    "model.layernorm_eps",
    "model.split",
    "server.data_seed",
    "server.per_class",
    "server.test_per_class",
    "server.pretrain_epochs",
    "server.pretrain_batch",
    "server.pretrain_lr",
    "server.pretrain_seed",
    "server.bits",
    "server.subsets",
    "server.calib_samples",
    "server.quant_seed",
    "server.tune_epochs",
    "server.tune_batch",
    "server.tune_lr",
    "server.tune_seed",
    "server.use_ht",
    "server.use_qat",
    "client.alpha",
    "client.laplace",
    "client.n_p",
    "client.n_aug",
    "client.use_pr",
    "client.pool_per_class",
    "client.test_per_class",
    "adapt.epochs",
    "adapt.lr",
    "adapt.batch_size",
    "adapt.shots",
    "adapt.seeds",
    "attack.epochs",
    "attack.lr",
    "attack.batch_size",
    "attack.seed",
    "attack.seeds",
    "attack.sweep",
    "run.transport",
    "run.host",
    "run.port",
    "run.timeout_secs",
    "run.max_sessions",
    "run.output_dir",
];

impl ExperimentConfig {
    /// Sets one `section.key` from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let k = key;
        match key {
            "model.image_size" => self.spec.image_size = parse(k, v)?,
            "model.channels" => self.spec.channels = parse(k, v)?,
            "model.patch_size" => self.spec.patch_size = parse(k, v)?,
            "model.embed_dim" => self.spec.embed_dim = parse(k, v)?,
            "model.num_heads" => self.spec.num_heads = parse(k, v)?,
            "model.mlp_hidden" => self.spec.mlp_hidden = parse(k, v)?,
            "model.num_layers" => self.spec.num_layers = parse(k, v)?,
            "model.layernorm_eps" => self.spec.layernorm_eps = parse(k, v)?,
            "model.split" => self.split = parse(k, v)?,
            "server.data_seed" => self.data_seed = parse(k, v)?,
            "server.per_class" => self.server_per_class = parse(k, v)?,
            "server.test_per_class" => self.server_test_per_class = parse(k, v)?,
            "server.pretrain_epochs" => self.pretrain.epochs = parse(k, v)?,
            "server.pretrain_batch" => self.pretrain.batch_size = parse(k, v)?,
            "server.pretrain_lr" => self.pretrain.lr = parse(k, v)?,
            "server.pretrain_seed" => self.pretrain.seed = parse(k, v)?,
            "server.bits" => self.quant.bits = parse(k, v)?,
            "server.subsets" => self.quant.subsets = parse(k, v)?,
            "server.calib_samples" => self.quant.calib_samples = parse(k, v)?,
            "server.quant_seed" => self.quant.seed = parse(k, v)?,
            "server.tune_epochs" => self.tune.epochs = parse(k, v)?,
            "server.tune_batch" => self.tune.batch_size = parse(k, v)?,
            "server.tune_lr" => self.tune.lr = parse(k, v)?,
            "server.tune_seed" => self.tune.seed = parse(k, v)?,
            "server.use_ht" => self.use_ht = parse(k, v)?,
            "server.use_qat" => self.use_qat = parse(k, v)?,
            "client.alpha" => self.client.alpha = parse(k, v)?,
            "client.laplace" => self.client.laplace = parse(k, v)?,
            "client.n_p" => self.client.n_p = parse(k, v)?,
            "client.n_aug" => self.client.n_aug = parse(k, v)?,
            "client.use_pr" => self.client.use_pr = parse(k, v)?,
            "client.pool_per_class" => self.pool_per_class = parse(k, v)?,
            "client.test_per_class" => self.test_per_class = parse(k, v)?,
            "adapt.epochs" => self.adapt.epochs = parse(k, v)?,
            "adapt.lr" => self.adapt.lr = parse(k, v)?,
            "adapt.batch_size" => self.adapt.batch_size = parse(k, v)?,
            "adapt.shots" => self.shots = parse_list(k, v)?,
            "adapt.seeds" => self.seeds = parse_list(k, v)?,
            "attack.epochs" => self.decoder.epochs = parse(k, v)?,
            "attack.lr" => self.decoder.lr = parse(k, v)?,
            "attack.batch_size" => self.decoder.batch_size = parse(k, v)?,
            "attack.seed" => self.decoder.seed = parse(k, v)?,
            "attack.seeds" => self.attack_seeds = parse_list(k, v)?,
            "attack.sweep" => self.sweep = parse_list(k, v)?,
            "run.transport" => self.transport = parse(k, v)?,
            "run.host" => self.host = v.trim().to_string(),
            "run.port" => self.port = parse(k, v)?,
            "run.timeout_secs" => self.timeout_secs = parse(k, v)?,
            "run.max_sessions" => self.max_sessions = parse(k, v)?,
            "run.output_dir" => self.output_dir = PathBuf::from(v.trim()),
            _ => return Err(err(key, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "model.image_size" => self.spec.image_size.to_string(),
            "model.channels" => self.spec.channels.to_string(),
            "model.patch_size" => self.spec.patch_size.to_string(),
            "model.embed_dim" => self.spec.embed_dim.to_string(),
            "model.num_heads" => self.spec.num_heads.to_string(),
            "model.mlp_hidden" => self.spec.mlp_hidden.to_string(),
            "model.num_layers" => self.spec.num_layers.to_string(),
            "model.layernorm_eps" => self.spec.layernorm_eps.to_string(),
            "model.split" => self.split.to_string(),
            "server.data_seed" => self.data_seed.to_string(),
            "server.per_class" => self.server_per_class.to_string(),
            "server.test_per_class" => self.server_test_per_class.to_string(),
            "server.pretrain_epochs" => self.pretrain.epochs.to_string(),
            "server.pretrain_batch" => self.pretrain.batch_size.to_string(),
            "server.pretrain_lr" => self.pretrain.lr.to_string(),
            "server.pretrain_seed" => self.pretrain.seed.to_string(),
            "server.bits" => self.quant.bits.to_string(),
            "server.subsets" => self.quant.subsets.to_string(),
            "server.calib_samples" => self.quant.calib_samples.to_string(),
            "server.quant_seed" => self.quant.seed.to_string(),
            "server.tune_epochs" => self.tune.epochs.to_string(),
            "server.tune_batch" => self.tune.batch_size.to_string(),
            "server.tune_lr" => self.tune.lr.to_string(),
            "server.tune_seed" => self.tune.seed.to_string(),
            "server.use_ht" => self.use_ht.to_string(),
            "server.use_qat" => self.use_qat.to_string(),
            "client.alpha" => self.client.alpha.to_string(),
            "client.laplace" => self.client.laplace.to_string(),
            "client.n_p" => self.client.n_p.to_string(),
            "client.n_aug" => self.client.n_aug.to_string(),
            "client.use_pr" => self.client.use_pr.to_string(),
            "client.pool_per_class" => self.pool_per_class.to_string(),
            "client.test_per_class" => self.test_per_class.to_string(),
            "adapt.epochs" => self.adapt.epochs.to_string(),
            "adapt.lr" => self.adapt.lr.to_string(),
            "adapt.batch_size" => self.adapt.batch_size.to_string(),
            "adapt.shots" => list(&self.shots),
            "adapt.seeds" => list(&self.seeds),
            "attack.epochs" => self.decoder.epochs.to_string(),
            "attack.lr" => self.decoder.lr.to_string(),
            "attack.batch_size" => self.decoder.batch_size.to_string(),
            "attack.seed" => self.decoder.seed.to_string(),
            "attack.seeds" => list(&self.attack_seeds),
            "attack.sweep" => list(&self.sweep),
            "run.transport" => self.transport.to_string(),
            "run.host" => self.host.clone(),
            "run.port" => self.port.to_string(),
            "run.timeout_secs" => self.timeout_secs.to_string(),
            "run.max_sessions" => self.max_sessions.to_string(),
            "run.output_dir" => self.output_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Applies every key of an INI document on top of `self`.
    pub fn merge_ini(&mut self, text: &str) -> Result<(), ConfigError> {
        let doc = ini::Ini::load_from_str(text).map_err(|e| err("config", e.to_string()))?;
        for (section, props) in doc.iter() {
            for (key, value) in props.iter() {
                let full = match section {
                    Some(s) => format!("{s}.{key}"),
                    None => key.to_string(),
                };
                self.set(&full, value)?;
            }
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let Some((k, v)) = assignment.split_once('=') else {
            return Err(err(assignment, "expected section.key=value"));
        };
        self.set(k.trim(), v)
    }

    /// INI text that reproduces this configuration through [`merge_ini`](Self::merge_ini).
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for key in KEYS {
            let (section, name) = key.split_once('.').expect("keys are dotted");
            if section != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{name} = {}\n", self.get(key).expect("every key has a value")));
        }
        out
    }

    /// Checks every field against the preconditions of the modules that consume it.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.spec.validate().map_err(|e| err("model", e.to_string()))?;
        self.spec.validate_split(self.split).map_err(|e| err("model.split", e.to_string()))?;
        if self.spec.image_size < 8 {
            return Err(err("model.image_size", "shapes need at least 8 pixels"));
        }
        if self.spec.channels != 1 {
            return Err(err("model.channels", "the shapes generator renders grayscale only"));
        }
        if !(2..=8).contains(&self.quant.bits) {
            return Err(err("server.bits", format!("{} outside 2..=8", self.quant.bits)));
        }
        if self.quant.subsets == 0 {
            return Err(err("server.subsets", "need at least one subset"));
        }
        if self.quant.calib_samples == 0 {
            return Err(err("server.calib_samples", "must be positive"));
        }
        for (name, v) in
            [("server.per_class", self.server_per_class), ("server.test_per_class", self.server_test_per_class)]
        {
            if v == 0 {
                return Err(err(name, "must be positive"));
            }
        }
        for (name, t) in [("server.pretrain", &self.pretrain), ("server.tune", &self.tune)] {
            if t.batch_size == 0 {
                return Err(err(&format!("{name}_batch"), "must be positive"));
            }
            if !(t.lr >= 0.0 && t.lr.is_finite()) {
                return Err(err(&format!("{name}_lr"), format!("{} is not a valid learning rate", t.lr)));
            }
        }
        if !(self.client.alpha >= 0.0 && self.client.alpha.is_finite()) {
            return Err(err("client.alpha", "must be a finite nonnegative number"));
        }
        if !(self.client.laplace >= 0.0 && self.client.laplace.is_finite()) {
            return Err(err("client.laplace", "must be a finite nonnegative number"));
        }
        if self.client.n_p > self.spec.num_patches() {
            return Err(err("client.n_p", format!("{} exceeds {} patches", self.client.n_p, self.spec.num_patches())));
        }
        if self.test_per_class == 0 {
            return Err(err("client.test_per_class", "must be positive"));
        }
        self.adapt.validate().map_err(|e| err("adapt", e.to_string()))?;
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(err("adapt.shots", "need at least one positive shot count"));
        }
        if let Some(s) = self.shots.iter().find(|&&s| s > self.pool_per_class) {
            return Err(err("adapt.shots", format!("{s} shots exceed the pool of {} per class", self.pool_per_class)));
        }
        if self.seeds.is_empty() {
            return Err(err("adapt.seeds", "need at least one seed"));
        }
        if self.decoder.batch_size == 0 {
            return Err(err("attack.batch_size", "must be positive"));
        }
        if self.sweep.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(err("attack.sweep", "Laplace scales must be finite and nonnegative"));
        }
        if self.max_sessions == 0 {
            return Err(err("run.max_sessions", "must be positive"));
        }
        if self.timeout_secs == 0 {
            return Err(err("run.timeout_secs", "must be positive"));
        }
        Ok(())
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            spec: self.spec,
            split: self.split,
            quant: self.quant,
            tune: self.tune,
            use_ht: self.use_ht,
            use_qat: self.use_qat,
        }
    }

    pub fn client_config(&self, seed: u64) -> ClientConfig {
        ClientConfig { seed, ..self.client }
    }

    pub fn adapt_config(&self, seed: u64) -> AdaptConfig {
        AdaptConfig { seed, ..self.adapt }
    }

    /// Fingerprint of everything that determines the pretrained model.
    pub fn pretrain_key(&self) -> u64 {
        let text: String = KEYS
            .iter()
            .filter(|k| {
                k.starts_with("model.")
                    || k.starts_with("server.data_seed")
                    || k.starts_with("server.per_class")
                    || k.starts_with("server.pretrain")
            })
            .map(|k| format!("{k}={}\n", self.get(k).unwrap()))
            .collect();
        splitadapt_core::vit::fnv1a(text.as_bytes())
    }
}
