//! Run configuration: flat `key = value` files with `#` comments and dotted
//! section prefixes, merged with command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sharpness_core::models::ModelSpec;
use sharpness_core::normops::{PNorm, Scheme};

use crate::error::{LabError, Result};

// ---------------------------------------------------------------------------
// key = value parsing
// ---------------------------------------------------------------------------

/// Parsed config file. Keys are dotted paths (`optimizer.rho`); duplicate
/// keys are rejected so typos surface early.
#[derive(Clone, Debug, Default)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LabError::invalid(format!("config line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(LabError::invalid(format!("config line {}: empty key", lineno + 1)));
            }
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(LabError::invalid(format!("config line {}: duplicate key `{key}`", lineno + 1)));
            }
            entries.push((key, value));
        }
        Ok(KvConfig { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        KvConfig::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Keys under `prefix.`, in file order, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, String)> {
        let want = format!("{prefix}.");
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(&want))
            .map(|(k, v)| (k[want.len()..].to_string(), v.clone()))
            .collect()
    }

    fn parse_with<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| LabError::invalid(format!("config key `{key}`: `{raw}` is not {what}"))),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.parse_with(key, "a float")
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parse_with(key, "a nonnegative integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.parse_with(key, "a nonnegative integer")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some("on") | Some("true") => Ok(Some(true)),
            Some("off") | Some("false") => Ok(Some(false)),
            Some(other) => Err(LabError::invalid(format!(
                "config key `{key}`: `{other}` is not on/off"
            ))),
        }
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| LabError::invalid(format!("config key `{key}`: `{t}` is not a float")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }
}

// ---------------------------------------------------------------------------
// Enums
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Sam,
    Asam,
}

impl OptimizerKind {
    pub fn is_two_step(self) -> bool {
        matches!(self, OptimizerKind::Sam | OptimizerKind::Asam)
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sam => "sam",
            OptimizerKind::Asam => "asam",
        };
        f.write_str(s)
    }
}

impl FromStr for OptimizerKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "sam" => Ok(OptimizerKind::Sam),
            "asam" => Ok(OptimizerKind::Asam),
            other => Err(LabError::invalid(format!(
                "unknown optimizer `{other}` (expected sgd, adam, sam or asam)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseKind {
    Sgd,
    Adam,
}

impl FromStr for BaseKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(BaseKind::Sgd),
            "adam" => Ok(BaseKind::Adam),
            other => Err(LabError::invalid(format!("unknown base optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(LabError::invalid(format!("unknown schedule `{other}`"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Resolved configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        dim: usize,
        train_count: usize,
        test_count: usize,
        separation: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        subset: Option<usize>,
    },
}

#[derive(Clone, Debug)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base: BaseKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub rho: f64,
    pub p: PNorm,
    pub scheme: Scheme,
    pub eta: f64,
    pub bias_norm: bool,
    /// m-sharpness chunk size during training; `None` uses the full batch.
    pub m: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct MeasureConfig {
    pub rho: f64,
    pub eta: f64,
    pub bias_norm: bool,
    pub steps: usize,
    pub m: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub noise_rate: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub measure: MeasureConfig,
    pub min_train_acc: f64,
    pub out: PathBuf,
}

/// Hyperparameter axes of a grid run, in config order.
#[derive(Clone, Debug, Default)]
pub struct GridAxes {
    pub axes: Vec<(String, Vec<f64>)>,
    pub workers: Option<usize>,
}

pub const GRID_AXIS_NAMES: &[&str] = &[
    "batch_size",
    "weight_decay",
    "learning_rate",
    "momentum",
    "rho",
    "noise_rate",
];

/// Flag-level overrides shared by the train/grid/measure subcommands.
#[derive(Clone, Debug, Default)]
pub struct CliOverrides {
    pub optimizer: Option<OptimizerKind>,
    pub rho: Option<f64>,
    pub p: Option<PNorm>,
    pub scheme: Option<Scheme>,
    pub eta: Option<f64>,
    pub bias_norm: Option<bool>,
    pub m: Option<usize>,
    pub noise_rate: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn parse_key<T: FromStr<Err = LabError>>(cfg: &KvConfig, key: &str) -> Result<Option<T>> {
    match cfg.get(key) {
        None => Ok(None),
        Some(raw) => raw.parse::<T>().map(Some),
    }
}

fn parse_core_key<T>(cfg: &KvConfig, key: &str) -> Result<Option<T>>
where
    T: FromStr<Err = sharpness_core::Error>,
{
    match cfg.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|e| LabError::invalid(format!("config key `{key}`: {e}"))),
    }
}

impl RunConfig {
    /// Resolves a config file plus CLI overrides into a validated run
    /// configuration and any grid axes it declares.
    pub fn load(path: &Path, overrides: &CliOverrides) -> Result<(RunConfig, GridAxes)> {
        let cfg = KvConfig::from_file(path)?;
        RunConfig::resolve(&cfg, overrides, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(cfg: &KvConfig, overrides: &CliOverrides, base_dir: &Path) -> Result<(RunConfig, GridAxes)> {
        let model_text = cfg
            .get("model")
            .ok_or_else(|| LabError::invalid("config is missing the `model` key"))?;
        let model: ModelSpec = model_text
            .parse()
            .map_err(|e| LabError::invalid(format!("config key `model`: {e}")))?;

        let dataset = match cfg.get("dataset.kind").unwrap_or("blobs") {
            "blobs" => DatasetSpec::Blobs {
                classes: cfg.get_usize("dataset.classes")?.unwrap_or(2),
                dim: cfg.get_usize("dataset.dim")?.unwrap_or(2),
                train_count: cfg.get_usize("dataset.train_count")?.unwrap_or(200),
                test_count: cfg.get_usize("dataset.test_count")?.unwrap_or(200),
                separation: cfg.get_f64("dataset.separation")?.unwrap_or(4.0),
            },
            "idx" => {
                let path_key = |key: &str| -> Result<PathBuf> {
                    let raw = cfg
                        .get(key)
                        .ok_or_else(|| LabError::invalid(format!("idx dataset needs `{key}`")))?;
                    let p = PathBuf::from(raw);
                    let p = if p.is_relative() { base_dir.join(p) } else { p };
                    if !p.exists() {
                        return Err(LabError::invalid(format!("`{key}`: {} does not exist", p.display())));
                    }
                    Ok(p)
                };
                DatasetSpec::Idx {
                    images: path_key("dataset.images")?,
                    labels: path_key("dataset.labels")?,
                    test_images: path_key("dataset.test_images")?,
                    test_labels: path_key("dataset.test_labels")?,
                    subset: cfg.get_usize("dataset.subset")?,
                }
            }
            other => return Err(LabError::invalid(format!("unknown dataset.kind `{other}`"))),
        };

        let kind = overrides
            .optimizer
            .map(Ok)
            .unwrap_or_else(|| parse_key::<OptimizerKind>(cfg, "optimizer.kind").map(|o| o.unwrap_or(OptimizerKind::Sgd)))?;
        let base = match kind {
            OptimizerKind::Sgd => BaseKind::Sgd,
            OptimizerKind::Adam => BaseKind::Adam,
            _ => parse_key::<BaseKind>(cfg, "optimizer.base")?.unwrap_or(BaseKind::Sgd),
        };
        let default_lr = match base {
            BaseKind::Sgd => 0.1,
            BaseKind::Adam => 0.0005,
        };
        let default_rho = match kind {
            OptimizerKind::Asam => 0.5,
            _ => 0.05,
        };
        let scheme = overrides
            .scheme
            .map(Ok)
            .unwrap_or_else(|| {
                parse_core_key::<Scheme>(cfg, "optimizer.norm").map(|o| {
                    o.unwrap_or(match kind {
                        OptimizerKind::Asam => Scheme::Elementwise,
                        _ => Scheme::Identity,
                    })
                })
            })?;
        let optimizer = OptimizerConfig {
            kind,
            base,
            lr: cfg.get_f64("optimizer.lr")?.unwrap_or(default_lr),
            momentum: cfg.get_f64("optimizer.momentum")?.unwrap_or(0.9),
            weight_decay: cfg.get_f64("optimizer.weight_decay")?.unwrap_or(5e-4),
            schedule: parse_key::<ScheduleKind>(cfg, "optimizer.schedule")?.unwrap_or(ScheduleKind::Cosine),
            rho: overrides.rho.map(Ok).unwrap_or_else(|| cfg.get_f64("optimizer.rho").map(|o| o.unwrap_or(default_rho)))?,
            p: overrides
                .p
                .map(Ok)
                .unwrap_or_else(|| parse_core_key::<PNorm>(cfg, "optimizer.p").map(|o| o.unwrap_or(PNorm::Two)))?,
            scheme,
            eta: overrides.eta.map(Ok).unwrap_or_else(|| cfg.get_f64("optimizer.eta").map(|o| o.unwrap_or(0.01)))?,
            bias_norm: overrides
                .bias_norm
                .map(Ok)
                .unwrap_or_else(|| cfg.get_bool("optimizer.bias_norm").map(|o| o.unwrap_or(false)))?,
            m: match overrides.m {
                Some(0) => None,
                Some(m) => Some(m),
                None => cfg.get_usize("optimizer.m")?.filter(|&m| m > 0),
            },
        };

        let measure = MeasureConfig {
            rho: cfg.get_f64("measure.rho")?.unwrap_or(0.05),
            eta: cfg.get_f64("measure.eta")?.unwrap_or(0.01),
            bias_norm: cfg.get_bool("measure.bias_norm")?.unwrap_or(false),
            steps: cfg.get_usize("measure.steps")?.unwrap_or(1),
            m: cfg.get_usize("measure.m")?.filter(|&m| m > 0),
        };

        let run = RunConfig {
            model,
            dataset,
            noise_rate: overrides
                .noise_rate
                .map(Ok)
                .unwrap_or_else(|| cfg.get_f64("dataset.noise_rate").map(|o| o.unwrap_or(0.0)))?,
            optimizer,
            epochs: cfg.get_usize("train.epochs")?.unwrap_or(10),
            batch_size: cfg.get_usize("train.batch_size")?.unwrap_or(32),
            seed: overrides.seed.map(Ok).unwrap_or_else(|| cfg.get_u64("seed").map(|o| o.unwrap_or(0)))?,
            measure,
            min_train_acc: cfg.get_f64("correlate.min_train_acc")?.unwrap_or(0.99),
            out: overrides.out.clone().unwrap_or_else(|| PathBuf::from("out")),
        };
        run.validate()?;

        let mut axes = GridAxes { axes: Vec::new(), workers: cfg.get_usize("grid.workers")? };
        for (name, raw) in cfg.with_prefix("grid.axis") {
            if !GRID_AXIS_NAMES.contains(&name.as_str()) {
                return Err(LabError::invalid(format!(
                    "unknown grid axis `{name}` (supported: {})",
                    GRID_AXIS_NAMES.join(", ")
                )));
            }
            let values: Vec<f64> = raw
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| LabError::invalid(format!("grid axis `{name}`: `{t}` is not a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(LabError::invalid(format!("grid axis `{name}` has no values")));
            }
            axes.axes.push((name, values));
        }
        Ok((run, axes))
    }

    fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if o.rho < 0.0 || !o.rho.is_finite() {
            return Err(LabError::invalid(format!("rho must be >= 0, got {}", o.rho)));
        }
        if o.eta < 0.0 || !o.eta.is_finite() {
            return Err(LabError::invalid(format!("eta must be >= 0, got {}", o.eta)));
        }
        if o.lr <= 0.0 || !o.lr.is_finite() {
            return Err(LabError::invalid(format!("learning rate must be > 0, got {}", o.lr)));
        }
        if self.epochs < 1 {
            return Err(LabError::invalid("train.epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(LabError::invalid("train.batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(LabError::invalid(format!(
                "noise rate {} outside [0, 1]",
                self.noise_rate
            )));
        }
        if self.measure.rho <= 0.0 {
            return Err(LabError::invalid("measure.rho must be > 0"));
        }
        if self.measure.steps < 1 {
            return Err(LabError::invalid("measure.steps must be >= 1"));
        }
        if let DatasetSpec::Blobs { classes, dim, train_count, test_count, separation } = &self.dataset {
            if *classes < 2 || *dim < 1 || *train_count < 1 || *test_count < 1 {
                return Err(LabError::invalid("blobs need classes >= 2, dim >= 1 and nonzero counts"));
            }
            if *separation < 0.0 {
                return Err(LabError::invalid("blob separation must be >= 0"));
            }
        }
        Ok(())
    }

    /// Applies one grid-axis value, returning the adjusted configuration.
    pub fn with_axis(&self, name: &str, value: f64) -> Result<RunConfig> {
        let mut rc = self.clone();
        match name {
            "batch_size" => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(LabError::invalid(format!("batch_size axis value {value} is not a positive integer")));
                }
                rc.batch_size = value as usize;
            }
            "weight_decay" => rc.optimizer.weight_decay = value,
            "learning_rate" => rc.optimizer.lr = value,
            "momentum" => rc.optimizer.momentum = value,
            "rho" => rc.optimizer.rho = value,
            "noise_rate" => rc.noise_rate = value,
            other => return Err(LabError::invalid(format!("unknown grid axis `{other}`"))),
        }
        rc.validate()?;
        Ok(rc)
    }
}
