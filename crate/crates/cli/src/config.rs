//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory holding the config file. Recognized keys:
//!
//! ```text
//! preset              cifar10 | nus-wide | mirflickr (applied before other keys)
//! k alpha beta gamma lambda lr momentum weight_decay batch epochs seed hidden
//! sim_mode            concept | concept-no-denoise | feature-cosine
//! tau_mode            "3m" (multiple of the concept count) or a fixed value
//! tau_after_denoise   rescale | keep
//! scores_path         comma-separated score files, one per prompt template
//! distributions_path  comma-separated precomputed distribution files
//! features_path
//! labels_path
//! output_dir
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use semhash::conceptsim::{DenoisedTemperature, SimilarityMode, Temperature};
use semhash::hashnet::{Preset, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub preset: Option<Preset>,
    pub sim_mode: SimilarityMode,
    pub temperature: Temperature,
    pub tau_after_denoise: DenoisedTemperature,
    pub scores_paths: Vec<PathBuf>,
    pub distributions_paths: Vec<PathBuf>,
    pub features_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            preset: None,
            sim_mode: SimilarityMode::Concept,
            temperature: Temperature::default(),
            tau_after_denoise: DenoisedTemperature::default(),
            scores_paths: Vec::new(),
            distributions_paths: Vec::new(),
            features_path: None,
            labels_path: None,
            output_dir: None,
        }
    }
}

/// Parses `"3m"` as a per-concept multiplier and a bare number as a fixed
/// temperature.
pub fn parse_temperature(s: &str) -> CliResult<Temperature> {
    let s = s.trim();
    let bad = || {
        CliError::Config(format!(
            "invalid tau_mode {s:?} (expected e.g. \"3m\" or \"60\")"
        ))
    };
    let (num, per_concept) = match s.strip_suffix('m') {
        Some(rest) => (rest.trim(), true),
        None => (s, false),
    };
    let v: f64 = num.parse().map_err(|_| bad())?;
    if !(v.is_finite() && v > 0.0) {
        return Err(bad());
    }
    Ok(if per_concept {
        Temperature::PerConcept(v)
    } else {
        Temperature::Fixed(v)
    })
}

pub fn parse_denoised_temperature(s: &str) -> CliResult<DenoisedTemperature> {
    match s.trim() {
        "rescale" => Ok(DenoisedTemperature::Rescale),
        "keep" => Ok(DenoisedTemperature::Keep),
        other => Err(CliError::Config(format!(
            "invalid tau_after_denoise {other:?} (expected rescale or keep)"
        ))),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse()
        .map_err(|_| CliError::Config(format!("invalid value {v:?} for {key}")))
}

fn path_list(base: &Path, v: &str) -> Vec<PathBuf> {
    v.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| base.join(p))
        .collect()
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let mut pairs = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!(
                    "line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
            pairs.push((key, value));
        }

        let mut cfg = RunConfig::default();
        if let Some(&(_, v)) = pairs.iter().find(|(k, _)| *k == "preset") {
            let preset = Preset::from_str(v).map_err(|e| CliError::Config(e.to_string()))?;
            cfg.train.apply_preset(preset);
            cfg.preset = Some(preset);
        }
        for (key, v) in pairs {
            let t = &mut cfg.train;
            match key {
                "preset" => {}
                "k" => t.k = num(key, v)?,
                "alpha" => t.alpha = num(key, v)?,
                "beta" => t.beta = num(key, v)?,
                "gamma" => t.gamma = num(key, v)?,
                "lambda" => t.lambda = num(key, v)?,
                "lr" => t.lr = num(key, v)?,
                "momentum" => t.momentum = num(key, v)?,
                "weight_decay" => t.weight_decay = num(key, v)?,
                "batch" => t.batch = num(key, v)?,
                "epochs" => t.epochs = num(key, v)?,
                "seed" => t.seed = num(key, v)?,
                "hidden" => t.hidden = num(key, v)?,
                "sim_mode" => {
                    cfg.sim_mode =
                        SimilarityMode::from_str(v).map_err(|e| CliError::Config(e.to_string()))?
                }
                "tau_mode" => cfg.temperature = parse_temperature(v)?,
                "tau_after_denoise" => cfg.tau_after_denoise = parse_denoised_temperature(v)?,
                "scores_path" => cfg.scores_paths = path_list(base, v),
                "distributions_path" => cfg.distributions_paths = path_list(base, v),
                "features_path" => cfg.features_path = Some(base.join(v)),
                "labels_path" => cfg.labels_path = Some(base.join(v)),
                "output_dir" => cfg.output_dir = Some(base.join(v)),
                other => return Err(CliError::Config(format!("unknown key {other:?}"))),
            }
        }
        cfg.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Every input path named by the config must exist.
    fn check_paths(&self) -> CliResult<()> {
        let inputs = self
            .scores_paths
            .iter()
            .chain(&self.distributions_paths)
            .chain(&self.features_path)
            .chain(&self.labels_path);
        for p in inputs {
            if !p.exists() {
                return Err(CliError::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
