//! Plain-text run configuration: `key = value` lines, `#` starts a comment.
//!
//! Unknown keys are errors. The environment variable `FORGELOC_SEED`
//! overrides `seed`. `Display` writes the fully resolved configuration in
//! the same format, so it can be read back.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::data::ForgeryKind;
use crate::metrics::{standard_suite, Perturbation};
use crate::network::{ModelConfig, NoiseFront};
use crate::train::SatConfig;

pub const SEED_ENV: &str = "FORGELOC_SEED";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    Value { line: usize, key: String, reason: String },
    #[error("{SEED_ENV}: {0}")]
    Env(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub sat: SatConfig,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub train_count: usize,
    pub test_count: usize,
    pub kinds: Vec<ForgeryKind>,
    /// Optional folder of PNGs used as base imagery instead of procedural scenes.
    pub base_images: Option<PathBuf>,
    pub perturbations: Vec<Perturbation>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            sat: SatConfig::default(),
            manifest: None,
            output_dir: PathBuf::from("out"),
            train_count: 200,
            test_count: 50,
            kinds: ForgeryKind::ALL.to_vec(),
            base_images: None,
            perturbations: standard_suite(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "nbf",
    "k",
    "convs_per_block",
    "input_height",
    "input_width",
    "coarse_front",
    "refined_front",
    "attention",
    "coarse_to_fine",
    "eps_max",
    "lr",
    "iterations",
    "batch_size",
    "sat",
    "flip_rotate",
    "manifest",
    "output_dir",
    "train_count",
    "test_count",
    "kinds",
    "base_images",
    "perturbations",
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_list<T: FromStr<Err = String>>(v: &str) -> Result<Vec<T>, String> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse::<T>()).collect()
}

impl RunConfig {
    /// Parses config text on top of the defaults. Does not consult the environment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: content.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            cfg.set(key, value).map_err(|reason| ConfigError::Value {
                line,
                key: key.to_string(),
                reason,
            })?;
        }
        cfg.sat.rng_seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let s = &mut self.sat;
        match key {
            "seed" => self.seed = parse_num(v)?,
            "nbf" => m.nbf = parse_num(v)?,
            "k" => m.k = parse_num(v)?,
            "convs_per_block" => m.convs_per_block = parse_num(v)?,
            "input_height" => m.input_size.0 = parse_num(v)?,
            "input_width" => m.input_size.1 = parse_num(v)?,
            "coarse_front" => m.coarse_front = v.parse::<NoiseFront>()?,
            "refined_front" => m.refined_front = v.parse::<NoiseFront>()?,
            "attention" => m.attention = parse_bool(v)?,
            "coarse_to_fine" => m.coarse_to_fine = parse_bool(v)?,
            "eps_max" => s.eps_max = parse_num(v)?,
            "lr" => s.lr = parse_num(v)?,
            "iterations" => s.iterations = parse_num(v)?,
            "batch_size" => s.batch_size = parse_num(v)?,
            "sat" => s.sat_enabled = parse_bool(v)?,
            "flip_rotate" => s.flip_rotate_enabled = parse_bool(v)?,
            "manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "train_count" => self.train_count = parse_num(v)?,
            "test_count" => self.test_count = parse_num(v)?,
            "kinds" => self.kinds = parse_list(v)?,
            "base_images" => self.base_images = (!v.is_empty()).then(|| PathBuf::from(v)),
            "perturbations" => self.perturbations = parse_list(v)?,
            _ => unreachable!("key list checked by caller"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sat.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.kinds.is_empty() {
            return Err(ConfigError::Invalid(
                "`kinds` must name at least one forgery kind".into(),
            ));
        }
        Ok(())
    }

    /// Applies `FORGELOC_SEED` if it is set to a non-empty value.
    pub fn apply_env_seed(&mut self, value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(v) = value.map(str::trim).filter(|v| !v.is_empty()) {
            self.seed = v
                .parse()
                .map_err(|e| ConfigError::Env(format!("`{v}` is not a seed: {e}")))?;
            self.sat.rng_seed = self.seed;
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sat.rng_seed = seed;
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.model;
        let s = &self.sat;
        let join = |items: Vec<String>| {
            if items.is_empty() {
                "none".to_string()
            } else {
                items.join(",")
            }
        };
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "nbf = {}", m.nbf)?;
        writeln!(f, "k = {}", m.k)?;
        writeln!(f, "convs_per_block = {}", m.convs_per_block)?;
        writeln!(f, "input_height = {}", m.input_size.0)?;
        writeln!(f, "input_width = {}", m.input_size.1)?;
        writeln!(f, "coarse_front = {}", m.coarse_front.as_str())?;
        writeln!(f, "refined_front = {}", m.refined_front.as_str())?;
        writeln!(f, "attention = {}", m.attention)?;
        writeln!(f, "coarse_to_fine = {}", m.coarse_to_fine)?;
        writeln!(f, "eps_max = {}", s.eps_max)?;
        writeln!(f, "lr = {}", s.lr)?;
        writeln!(f, "iterations = {}", s.iterations)?;
        writeln!(f, "batch_size = {}", s.batch_size)?;
        writeln!(f, "sat = {}", s.sat_enabled)?;
        writeln!(f, "flip_rotate = {}", s.flip_rotate_enabled)?;
        if let Some(p) = &self.manifest {
            writeln!(f, "manifest = {}", p.display())?;
        }
        writeln!(f, "output_dir = {}", self.output_dir.display())?;
        writeln!(f, "train_count = {}", self.train_count)?;
        writeln!(f, "test_count = {}", self.test_count)?;
        writeln!(
            f,
            "kinds = {}",
            join(self.kinds.iter().map(|k| k.to_string()).collect())
        )?;
        if let Some(p) = &self.base_images {
            writeln!(f, "base_images = {}", p.display())?;
        }
        writeln!(
            f,
            "perturbations = {}",
            join(self.perturbations.iter().map(|p| p.to_string()).collect())
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = "# tiny run\nseed = 7\nnbf = 8  # narrow\nattention = false\nkinds = splice,removal\nperturbations = noise:15\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sat.rng_seed, 7);
        assert_eq!(cfg.model.nbf, 8);
        assert!(!cfg.model.attention);
        assert_eq!(cfg.kinds, vec![ForgeryKind::Splice, ForgeryKind::Removal]);
        assert_eq!(RunConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert_eq!(
            RunConfig::parse("sed = 1"),
            Err(ConfigError::UnknownKey {
                line: 1,
                key: "sed".into()
            })
        );
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(RunConfig::parse("seed 1"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(RunConfig::parse("nbf = many"), Err(ConfigError::Value { .. })));
        assert!(matches!(
            RunConfig::parse("input_height = 30"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn env_seed_overrides() {
        let mut cfg = RunConfig::parse("seed = 1").unwrap();
        cfg.apply_env_seed(Some("99")).unwrap();
        assert_eq!((cfg.seed, cfg.sat.rng_seed), (99, 99));
        cfg.apply_env_seed(None).unwrap();
        assert_eq!(cfg.seed, 99);
        assert!(cfg.apply_env_seed(Some("x")).is_err());
    }
}
