//! Experiment configuration: `key = value` lines, `#` comments.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_CONNECTIVITY, DEFAULT_THRESHOLD};
use crate::networks::{ArchSpec, Init, LatentMode, Variant};
use crate::patchflow::DEFAULT_OVERLAP;

/// Settings of one training session.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub patch_extent: usize,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub base_channels: usize,
    pub stages: usize,
    pub reg_hidden: (usize, usize),
    pub latent: LatentMode,
    pub init: Init,
    /// Used by BDM only.
    pub dropout_rate: f64,
    pub overlap: f64,
    pub threshold: f64,
    pub connectivity: usize,
    pub pearson_abs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Bm,
            lambda: 0.0,
            lr: 1e-4,
            batch_size: 4,
            epochs: 10,
            steps_per_epoch: 25,
            patch_extent: 64,
            seed: 0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            base_channels: 8,
            stages: 4,
            reg_hidden: (64, 32),
            latent: LatentMode::AvgPool,
            init: Init::He,
            dropout_rate: 0.5,
            overlap: DEFAULT_OVERLAP,
            threshold: DEFAULT_THRESHOLD,
            connectivity: DEFAULT_CONNECTIVITY,
            pearson_abs: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.adam_betas.0) || !(0.0..1.0).contains(&self.adam_betas.1) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::invalid(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if ![6, 18, 26].contains(&self.connectivity) {
            return Err(Error::invalid(format!(
                "connectivity must be 6, 18 or 26, got {}",
                self.connectivity
            )));
        }
        self.arch(2).validate()
    }

    /// Architecture for a head over `n_domains` classes.
    pub fn arch(&self, n_domains: usize) -> ArchSpec {
        ArchSpec {
            base_channels: self.base_channels,
            stages: self.stages,
            n_domains,
            reg_hidden: self.reg_hidden,
            dropout_rate: if self.variant == Variant::Bdm { self.dropout_rate } else { 0.0 },
            patch_extent: self.patch_extent,
            latent: self.latent,
            ..ArchSpec::default()
        }
    }
}

/// Whole-experiment settings shared by every CLI verb.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    /// Fixed weight; `None` uses each variant's tuned value.
    pub lambda: Option<f64>,
    /// Non-empty: grid-search the weight on the tuning fold.
    pub lambda_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub n_sites: usize,
    pub subjects_per_site: usize,
    pub volume_extent: usize,
    pub folds: usize,
    /// How many of the folds are actually run, starting at fold 0.
    pub folds_to_run: usize,
    pub probe_seed: u64,
    pub probe_hidden: usize,
    pub probe_epochs: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variants: Variant::ALL.to_vec(),
            lambda: None,
            lambda_grid: Vec::new(),
            seeds: vec![0],
            data_seed: 0,
            n_sites: 20,
            subjects_per_site: 1,
            volume_extent: 64,
            folds: 5,
            folds_to_run: 5,
            probe_seed: 0,
            probe_hidden: 32,
            probe_epochs: 300,
            train: TrainConfig::default(),
        }
    }
}

/// Every key accepted in config files and `--set` overrides.
pub const CONFIG_KEYS: &[&str] = &[
    "variant",
    "lambda",
    "lambda_grid",
    "lr",
    "batch_size",
    "epochs",
    "steps_per_epoch",
    "patch_extent",
    "seeds",
    "data_seed",
    "n_sites",
    "subjects_per_site",
    "volume_extent",
    "connectivity",
    "threshold",
    "overlap",
    "folds",
    "folds_to_run",
    "base_channels",
    "stages",
    "reg_hidden",
    "latent",
    "init",
    "dropout_rate",
    "adam_betas",
    "adam_eps",
    "pearson_abs",
    "probe_seed",
    "probe_hidden",
    "probe_epochs",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse {value:?}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let out = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num(key, s))
        .collect::<Result<Vec<T>>>()?;
    Ok(out)
}

fn pair<T: FromStr + Copy>(key: &str, value: &str) -> Result<(T, T)> {
    match list::<T>(key, value)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::invalid(format!("{key}: expected two comma-separated values"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::invalid(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "variant" | "variants" => {
                self.variants = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(Variant::from_str)
                    .collect::<Result<Vec<_>>>()?;
            }
            "lambda" => {
                self.lambda = match value.to_ascii_lowercase().as_str() {
                    "tuned" | "" => None,
                    _ => Some(num(key, value)?),
                }
            }
            "lambda_grid" => self.lambda_grid = list(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "steps_per_epoch" => t.steps_per_epoch = num(key, value)?,
            "patch_extent" => t.patch_extent = num(key, value)?,
            "seeds" | "seed" => self.seeds = list(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "n_sites" => self.n_sites = num(key, value)?,
            "subjects_per_site" => self.subjects_per_site = num(key, value)?,
            "volume_extent" => self.volume_extent = num(key, value)?,
            "connectivity" => t.connectivity = num(key, value)?,
            "threshold" => t.threshold = num(key, value)?,
            "overlap" => t.overlap = num(key, value)?,
            "folds" => self.folds = num(key, value)?,
            "folds_to_run" => self.folds_to_run = num(key, value)?,
            "base_channels" => t.base_channels = num(key, value)?,
            "stages" => t.stages = num(key, value)?,
            "reg_hidden" => t.reg_hidden = pair(key, value)?,
            "latent" => {
                t.latent = match value.to_ascii_lowercase().as_str() {
                    "avgpool" => LatentMode::AvgPool,
                    "flatten" => LatentMode::Flatten,
                    _ => return Err(Error::invalid(format!("latent: expected avgpool or flatten, got {value:?}"))),
                }
            }
            "init" | "init_sigma" => t.init = Init::from_str(value)?,
            "dropout_rate" => t.dropout_rate = num(key, value)?,
            "adam_betas" => t.adam_betas = pair(key, value)?,
            "adam_eps" => t.adam_eps = num(key, value)?,
            "pearson_abs" => t.pearson_abs = num(key, value)?,
            "probe_seed" => self.probe_seed = num(key, value)?,
            "probe_hidden" => self.probe_hidden = num(key, value)?,
            "probe_epochs" => self.probe_epochs = num(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::invalid("no variants selected"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("no seeds given"));
        }
        if let Some(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::invalid(format!("lambda {l} outside [0, 1]")));
            }
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::invalid(format!("lambda_grid value {l} outside [0, 1]")));
        }
        if self.n_sites < 2 || self.subjects_per_site == 0 {
            return Err(Error::invalid("need n_sites >= 2 and subjects_per_site >= 1"));
        }
        if self.folds < 2 || self.folds_to_run == 0 {
            return Err(Error::invalid("need folds >= 2 and folds_to_run >= 1"));
        }
        if self.volume_extent < self.train.patch_extent {
            return Err(Error::invalid(format!(
                "volume_extent {} smaller than patch_extent {}",
                self.volume_extent, self.train.patch_extent
            )));
        }
        if self.probe_hidden == 0 {
            return Err(Error::invalid("probe_hidden must be >= 1"));
        }
        self.train.validate()
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.volume_extent; 3]
    }

    /// Weight used for `variant` when no grid search runs.
    pub fn lambda_for(&self, variant: Variant) -> f64 {
        if !variant.has_head() {
            return 0.0;
        }
        self.lambda.or(variant.tuned_lambda()).unwrap_or(0.0)
    }

    pub fn train_config(&self, variant: Variant, seed: u64, lambda: f64) -> TrainConfig {
        TrainConfig {
            variant,
            seed,
            lambda,
            ..self.train.clone()
        }
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("variant", join(&self.variants));
        kv("lambda", self.lambda.map_or("tuned".into(), |l| l.to_string()));
        kv("lambda_grid", join(&self.lambda_grid));
        kv("lr", t.lr.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("steps_per_epoch", t.steps_per_epoch.to_string());
        kv("patch_extent", t.patch_extent.to_string());
        kv("seeds", join(&self.seeds));
        kv("data_seed", self.data_seed.to_string());
        kv("n_sites", self.n_sites.to_string());
        kv("subjects_per_site", self.subjects_per_site.to_string());
        kv("volume_extent", self.volume_extent.to_string());
        kv("connectivity", t.connectivity.to_string());
        kv("threshold", t.threshold.to_string());
        kv("overlap", t.overlap.to_string());
        kv("folds", self.folds.to_string());
        kv("folds_to_run", self.folds_to_run.to_string());
        kv("base_channels", t.base_channels.to_string());
        kv("stages", t.stages.to_string());
        kv("reg_hidden", format!("{},{}", t.reg_hidden.0, t.reg_hidden.1));
        kv(
            "latent",
            match t.latent {
                LatentMode::AvgPool => "avgpool".into(),
                LatentMode::Flatten => "flatten".into(),
            },
        );
        kv("init", t.init.to_string());
        kv("dropout_rate", t.dropout_rate.to_string());
        kv("adam_betas", format!("{},{}", t.adam_betas.0, t.adam_betas.1));
        kv("adam_eps", t.adam_eps.to_string());
        kv("pearson_abs", t.pearson_abs.to_string());
        kv("probe_seed", self.probe_seed.to_string());
        kv("probe_hidden", self.probe_hidden.to_string());
        kv("probe_epochs", self.probe_epochs.to_string());
        s
    }
}
