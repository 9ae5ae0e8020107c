//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys mirror the
//! training, solver and synthetic-data settings; values given as flags
//! replace values from the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use node_adapter::dataset::SyntheticSpec;
use node_adapter::ode::SolverMethod;
use node_adapter::train::TrainConfig;

use crate::failure::Failure;

/// Every accepted key with its default, as documented in the README.
pub const KEYS: &[(&str, &str)] = &[
    ("epochs", "20"),
    ("lr0", "0.001"),
    ("lr_min", "0"),
    ("temperature", "0.01"),
    ("decay_rate", "0.1"),
    ("horizon", "30"),
    ("embed_dim", "1024"),
    ("weight_decay", "0.01"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("eps", "1e-8"),
    ("seed", "0"),
    ("solver", "euler"),
    ("steps", "30"),
    ("t0", "0"),
    ("t1", "30"),
    ("classes", "10"),
    ("dim", "32"),
    ("shots", "16"),
    ("queries", "20"),
    ("prompts", "5"),
    ("visual_noise", "0.25"),
    ("textual_noise", "0.15"),
    ("bias", "0.3"),
];

#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        Self::parse(&text).map_err(|m| Failure::Usage(format!("{}: {m}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
            let key = key.trim();
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(format!("line {}: unknown key `{key}`", n + 1));
            }
            if values.insert(key.to_owned(), value.trim().to_owned()).is_some() {
                return Err(format!("line {}: duplicate key `{key}`", n + 1));
            }
        }
        Ok(Self { values })
    }

    /// The flag value if given, else the file value, else `None`.
    pub fn pick<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Failure::Usage(format!("config key `{key}`: invalid value `{v}`: {e}"))),
        }
    }
}

/// Training flags shared by `train` and `episode`.
#[derive(clap::Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    /// Softmax temperature of the cosine classifier.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub decay_rate: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// euler, ab2, abm2 or rk4.
    #[arg(long)]
    pub solver: Option<SolverMethod>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub t0: Option<f64>,
    #[arg(long)]
    pub t1: Option<f64>,
}

macro_rules! apply {
    ($file:expr, $target:expr, $flags:expr, $($key:ident),+) => {
        $(
            if let Some(v) = $file.pick(stringify!($key), $flags.$key.take())? {
                $target.$key = v;
            }
        )+
    };
}

impl TrainFlags {
    pub fn resolve(mut self, file: &FileConfig) -> Result<TrainConfig, Failure> {
        let mut cfg = TrainConfig::default();
        apply!(file, cfg, self, epochs, lr0, lr_min, temperature, decay_rate, horizon, embed_dim, weight_decay, beta1, beta2, eps, seed);
        if let Some(m) = file.pick("solver", self.solver.take())? {
            cfg.solver.method = m;
        }
        apply!(file, cfg.solver, self, steps, t0, t1);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Synthetic benchmark flags.
#[derive(clap::Args, Debug, Default)]
pub struct SynthFlags {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub shots: Option<u64>,
    /// Query rows per class.
    #[arg(long)]
    pub queries: Option<usize>,
    /// Prompt rows per class.
    #[arg(long)]
    pub prompts: Option<usize>,
    /// Length of the per-class offset added to support rows.
    #[arg(long)]
    pub bias: Option<f64>,
    #[arg(long)]
    pub visual_noise: Option<f64>,
    #[arg(long)]
    pub textual_noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SynthFlags {
    pub fn resolve(mut self, file: &FileConfig) -> Result<SyntheticSpec, Failure> {
        let mut spec = SyntheticSpec::default();
        apply!(file, spec, self, classes, dim, visual_noise, textual_noise, seed);
        if let Some(v) = file.pick::<u64>("shots", self.shots.take())? {
            spec.shots = v as usize;
        }
        if let Some(v) = file.pick("queries", self.queries.take())? {
            spec.queries_per_class = v;
        }
        if let Some(v) = file.pick("prompts", self.prompts.take())? {
            spec.prompts_per_class = v;
        }
        if let Some(v) = file.pick("bias", self.bias.take())? {
            spec.support_bias = v;
        }
        spec.validate()?;
        Ok(spec)
    }
}
