//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::EncoderConfig;
use crate::baselines::{BaselineConfig, BaselineKind, DEFAULT_TEMPERATURE, DEFAULT_TYPE_MASK_RATIO};
use crate::ddm::{
    build_schedule, DdmConfig, NoiseMode, DEFAULT_BETA, DEFAULT_LEVELS, DEFAULT_SIGMA_MAX, DEFAULT_SIGMA_MIN,
};
use crate::error::{Error, Result};
use crate::geom::{DEFAULT_COORD_SIGMA, DEFAULT_CUTOFF};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Ddm,
    Baseline(BaselineKind),
    /// Random initialization, no training.
    None,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Ddm => "ddm",
            Objective::Baseline(k) => k.name(),
            Objective::None => "none",
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddm" => Ok(Objective::Ddm),
            "none" => Ok(Objective::None),
            other => other
                .parse()
                .map(Objective::Baseline)
                .map_err(|_| Error::invalid(format!("unknown objective {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub objective: Objective,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub levels: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub beta: f64,
    pub noise_mode: NoiseMode,
    pub coord_sigma: f64,
    pub mask_ratio: f64,
    pub condition_coord_noise: bool,
    pub type_mask_ratio: f64,
    pub temperature: f64,
    pub head_hidden: usize,
    pub encoder: EncoderConfig,
    pub finetune_epochs: usize,
    /// Conformer file, relative paths resolved against `base_dir`.
    pub dataset: Option<PathBuf>,
    /// Label CSV for fine-tuning.
    pub labels: Option<PathBuf>,
    /// Record elapsed seconds in metrics; when false the column is 0.
    pub wall_clock: bool,
    /// Directory of the config file; not serialized.
    pub base_dir: PathBuf,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Ddm,
            seed: 0,
            epochs: 1,
            batch_size: 1,
            lr: crate::autodiff::DEFAULT_LR,
            lr_min: 0.0,
            levels: DEFAULT_LEVELS,
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
            beta: DEFAULT_BETA,
            noise_mode: NoiseMode::Gaussian,
            coord_sigma: DEFAULT_COORD_SIGMA,
            mask_ratio: 0.0,
            condition_coord_noise: false,
            type_mask_ratio: DEFAULT_TYPE_MASK_RATIO,
            temperature: DEFAULT_TEMPERATURE,
            head_hidden: 64,
            encoder: EncoderConfig::default(),
            finetune_epochs: 50,
            dataset: None,
            labels: None,
            wall_clock: false,
            base_dir: PathBuf::from("."),
        }
    }
}

const KEYS: &[&str] = &[
    "objective",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "lr_min",
    "levels",
    "sigma_min",
    "sigma_max",
    "beta",
    "noise_mode",
    "coord_sigma",
    "mask_ratio",
    "condition_coord_noise",
    "type_mask_ratio",
    "temperature",
    "head_hidden",
    "embedding_dim",
    "num_layers",
    "rbf_count",
    "rbf_gamma",
    "rbf_max",
    "cutoff",
    "finetune_epochs",
    "dataset",
    "labels",
    "wall_clock",
];

/// Keys that fix parameter shapes; a checkpoint can seed an encoder only
/// when these agree.
pub const ARCHITECTURE_KEYS: &[&str] = &[
    "embedding_dim",
    "num_layers",
    "rbf_count",
    "rbf_gamma",
    "rbf_max",
    "cutoff",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn noise_mode_name(m: NoiseMode) -> &'static str {
    match m {
        NoiseMode::Gaussian => "gaussian",
        NoiseMode::LiteralShift => "literal_shift",
    }
}

impl TrainingConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line, message };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
                return Err(err(format!("unknown key {key}")));
            };
            if seen.contains(&known) {
                return Err(err(format!("duplicate key {key}")));
            }
            seen.push(known);
            config.set(key, value).map_err(err)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`; relative data paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "objective" => self.objective = value.parse().map_err(|e: Error| e.to_string())?,
            "seed" => self.seed = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "lr_min" => self.lr_min = parse_num(key, value)?,
            "levels" => self.levels = parse_num(key, value)?,
            "sigma_min" => self.sigma_min = parse_num(key, value)?,
            "sigma_max" => self.sigma_max = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "noise_mode" => {
                self.noise_mode = match value {
                    "gaussian" => NoiseMode::Gaussian,
                    "literal_shift" => NoiseMode::LiteralShift,
                    _ => return Err(format!("noise_mode: expected gaussian or literal_shift, got {value:?}")),
                }
            }
            "coord_sigma" => self.coord_sigma = parse_num(key, value)?,
            "mask_ratio" => self.mask_ratio = parse_num(key, value)?,
            "condition_coord_noise" => self.condition_coord_noise = parse_bool(key, value)?,
            "type_mask_ratio" => self.type_mask_ratio = parse_num(key, value)?,
            "temperature" => self.temperature = parse_num(key, value)?,
            "head_hidden" => self.head_hidden = parse_num(key, value)?,
            "embedding_dim" => self.encoder.embedding_dim = parse_num(key, value)?,
            "num_layers" => self.encoder.num_layers = parse_num(key, value)?,
            "rbf_count" => self.encoder.rbf_count = parse_num(key, value)?,
            "rbf_gamma" => self.encoder.rbf_gamma = parse_num(key, value)?,
            "rbf_max" => self.encoder.rbf_max = parse_num(key, value)?,
            "cutoff" => {
                self.encoder.cutoff = match value {
                    "none" => None,
                    "default" => Some(DEFAULT_CUTOFF),
                    v => Some(parse_num(key, v)?),
                }
            }
            "finetune_epochs" => self.finetune_epochs = parse_num(key, value)?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "wall_clock" => self.wall_clock = parse_bool(key, value)?,
            _ => unreachable!("key list and setter disagree on {key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.finetune_epochs == 0 {
            return Err(Error::invalid(
                "epochs, finetune_epochs and batch_size must be positive",
            ));
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr && self.lr.is_finite()) {
            return Err(Error::invalid("need 0 <= lr_min <= lr"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid("mask_ratio must lie in [0, 1)"));
        }
        self.encoder.validate()?;
        self.ddm()?;
        self.baseline(BaselineKind::Rr).validate()?;
        if let Objective::Baseline(k) = self.objective {
            if k.is_batch_level() && self.batch_size < 2 {
                return Err(Error::invalid(format!("{k} needs batch_size >= 2")));
            }
        }
        Ok(())
    }

    pub fn ddm(&self) -> Result<DdmConfig> {
        if !(self.coord_sigma >= 0.0 && self.coord_sigma.is_finite()) {
            return Err(Error::invalid("coord_sigma must be >= 0"));
        }
        Ok(DdmConfig {
            schedule: build_schedule(self.levels, self.sigma_min, self.sigma_max, self.beta)?,
            noise_mode: self.noise_mode,
            coord_sigma: self.coord_sigma,
            mask_ratio: self.mask_ratio,
            condition_coord_noise: self.condition_coord_noise,
        })
    }

    pub fn baseline(&self, kind: BaselineKind) -> BaselineConfig {
        BaselineConfig {
            kind,
            head_hidden: self.head_hidden,
            mask_ratio: self.type_mask_ratio,
            temperature: self.temperature,
            coord_sigma: self.coord_sigma,
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// `(key, value)` in canonical order and formatting.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.encoder;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let values = [
            self.objective.name().to_string(),
            self.seed.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            format!("{:?}", self.lr),
            format!("{:?}", self.lr_min),
            self.levels.to_string(),
            format!("{:?}", self.sigma_min),
            format!("{:?}", self.sigma_max),
            format!("{:?}", self.beta),
            noise_mode_name(self.noise_mode).to_string(),
            format!("{:?}", self.coord_sigma),
            format!("{:?}", self.mask_ratio),
            self.condition_coord_noise.to_string(),
            format!("{:?}", self.type_mask_ratio),
            format!("{:?}", self.temperature),
            self.head_hidden.to_string(),
            e.embedding_dim.to_string(),
            e.num_layers.to_string(),
            e.rbf_count.to_string(),
            format!("{:?}", e.rbf_gamma),
            format!("{:?}", e.rbf_max),
            e.cutoff.map_or("none".to_string(), |c| format!("{c:?}")),
            self.finetune_epochs.to_string(),
            path(&self.dataset),
            path(&self.labels),
            self.wall_clock.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// Canonical text; parsing it yields an equal config (up to `base_dir`).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            if (k == "dataset" || k == "labels") && v == "none" {
                continue;
            }
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }
}

/// Fails unless `echo` (a checkpoint's config text) agrees with `config`
/// on every key in `keys`.
pub fn check_echo(echo: &str, config: &TrainingConfig, keys: &[&str]) -> Result<()> {
    let stored = TrainingConfig::parse(echo)?;
    let a = stored.entries();
    let b = config.entries();
    for ((key, x), (_, y)) in a.iter().zip(&b) {
        if keys.contains(key) && x != y {
            return Err(Error::ConfigMismatch(format!(
                "{key}: checkpoint has {x}, config has {y}"
            )));
        }
    }
    Ok(())
}
