//! `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Unknown and repeated keys are errors. Every key has a default, so an
//! empty file describes the default blob benchmark.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use opera_core::model::Arrangement;
use opera_core::training::{Objective, RunConfig, Schedule, SchemeKind};

use crate::error::{CliError, CliResult};

/// Training run plus the data source, output location and evaluation
/// settings around it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    /// Share of each class held out for evaluation.
    pub test_fraction: f64,
    /// Load this CSV instead of generating blobs.
    pub data_csv: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Record real elapsed milliseconds in the metrics; off keeps the file
    /// reproducible byte for byte.
    pub log_wall_time: bool,
    pub probe_epochs: usize,
    pub ordering_samples: usize,
    pub knn_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run: RunConfig::default(),
            test_fraction: 0.25,
            data_csv: None,
            out: None,
            log_wall_time: false,
            probe_epochs: 100,
            ordering_samples: 2000,
            knn_k: 5,
        }
    }
}

/// Recognised keys in the order `config.resolved` lists them.
pub const KEYS: &[&str] = &[
    "mode",
    "arrangement",
    "epochs",
    "batch_size",
    "temperature",
    "momentum",
    "lr",
    "sgd_momentum",
    "weight_decay",
    "schedule",
    "seed",
    "num_classes",
    "per_class",
    "dim",
    "spread",
    "data_csv",
    "test_fraction",
    "noise_sigma",
    "scale_lo",
    "scale_hi",
    "mask_prob",
    "normalize",
    "symmetrize",
    "full_both_views",
    "full_coef",
    "naive_self",
    "naive_full",
    "naive_wp",
    "naive_wn",
    "backbone_widths",
    "projector_hidden",
    "embed_dim",
    "predictor_hidden",
    "class_hidden",
    "probe_epochs",
    "ordering_samples",
    "knn_k",
    "out",
    "log_wall_time",
];

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn core_parse<T: FromStr<Err = opera_core::Error>>(v: &str) -> Result<T, String> {
    v.parse().map_err(|e: opera_core::Error| e.to_string())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = ExperimentConfig::parse(&text, path)?;
        if let (Some(csv), Some(dir)) = (&cfg.data_csv, path.parent()) {
            if csv.is_relative() {
                cfg.data_csv = Some(dir.join(csv));
            }
        }
        Ok(cfg)
    }

    /// `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> CliResult<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| CliError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let value = value.trim();
            let known = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| CliError::Config(format!("unknown key `{key}` at line {}", i + 1)))?;
            if seen.contains(known) {
                return Err(CliError::Config(format!("key `{key}` set twice (line {})", i + 1)));
            }
            seen.push(known);
            cfg.set(key, value).map_err(|m| parse_err(format!("{key}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let r = &mut self.run;
        match key {
            "mode" => r.mode = core_parse::<Objective>(v)?,
            "arrangement" => r.arrangement = core_parse::<Arrangement>(v)?,
            "epochs" => r.epochs = num(v)?,
            "batch_size" => r.batch_size = num(v)?,
            "temperature" => r.temperature = num(v)?,
            "momentum" => r.target_momentum = num(v)?,
            "lr" => r.lr = num(v)?,
            "sgd_momentum" => r.sgd_momentum = num(v)?,
            "weight_decay" => r.weight_decay = num(v)?,
            "schedule" => {
                r.schedule = match v {
                    "constant" => Schedule::Constant,
                    "cosine" => Schedule::Cosine,
                    _ => return Err(format!("expected constant or cosine, got `{v}`")),
                }
            }
            "seed" => r.seed = num(v)?,
            "num_classes" => r.data.num_classes = num(v)?,
            "per_class" => r.data.per_class = num(v)?,
            "dim" => r.data.dim = num(v)?,
            "spread" => r.data.spread = num(v)?,
            "data_csv" => self.data_csv = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "test_fraction" => self.test_fraction = num(v)?,
            "noise_sigma" => r.augment.noise_sigma = num(v)?,
            "scale_lo" => r.augment.scale_lo = num(v)?,
            "scale_hi" => r.augment.scale_hi = num(v)?,
            "mask_prob" => r.augment.mask_prob = num(v)?,
            "normalize" => r.normalize = flag(v)?,
            "symmetrize" => r.symmetrize = flag(v)?,
            "full_both_views" => r.full_both_views = flag(v)?,
            "full_coef" => r.full_coef = num(v)?,
            "naive_self" => r.naive_self = core_parse::<SchemeKind>(v)?,
            "naive_full" => r.naive_full = core_parse::<SchemeKind>(v)?,
            "naive_wp" => r.naive_wp = num(v)?,
            "naive_wn" => r.naive_wn = num(v)?,
            "backbone_widths" => {
                r.backbone_widths = v
                    .split(',')
                    .map(|w| num::<usize>(w.trim()))
                    .collect::<Result<Vec<_>, _>>()?
            }
            "projector_hidden" => r.projector_hidden = num(v)?,
            "embed_dim" => r.embed_dim = num(v)?,
            "predictor_hidden" => r.predictor_hidden = num(v)?,
            "class_hidden" => r.class_hidden = if v == "auto" { None } else { Some(num(v)?) },
            "probe_epochs" => self.probe_epochs = num(v)?,
            "ordering_samples" => self.ordering_samples = num(v)?,
            "knn_k" => self.knn_k = num(v)?,
            "out" => self.out = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "log_wall_time" => self.log_wall_time = flag(v)?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.run.validate()?;
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return Err(CliError::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.knn_k == 0 || self.ordering_samples == 0 {
            return Err(CliError::Config("knn_k and ordering_samples must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, one per line, in [`KEYS`] order.
    pub fn resolved(&self) -> String {
        let r = &self.run;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let widths: Vec<String> = r.backbone_widths.iter().map(usize::to_string).collect();
        let values: Vec<String> = vec![
            r.mode.as_str().into(),
            r.arrangement.as_str().into(),
            r.epochs.to_string(),
            r.batch_size.to_string(),
            r.temperature.to_string(),
            r.target_momentum.to_string(),
            r.lr.to_string(),
            r.sgd_momentum.to_string(),
            r.weight_decay.to_string(),
            match r.schedule {
                Schedule::Constant => "constant".into(),
                Schedule::Cosine => "cosine".into(),
            },
            r.seed.to_string(),
            r.data.num_classes.to_string(),
            r.data.per_class.to_string(),
            r.data.dim.to_string(),
            r.data.spread.to_string(),
            path(&self.data_csv),
            self.test_fraction.to_string(),
            r.augment.noise_sigma.to_string(),
            r.augment.scale_lo.to_string(),
            r.augment.scale_hi.to_string(),
            r.augment.mask_prob.to_string(),
            r.normalize.to_string(),
            r.symmetrize.to_string(),
            r.full_both_views.to_string(),
            r.full_coef.to_string(),
            r.naive_self.as_str().into(),
            r.naive_full.as_str().into(),
            r.naive_wp.to_string(),
            r.naive_wn.to_string(),
            widths.join(","),
            r.projector_hidden.to_string(),
            r.embed_dim.to_string(),
            r.predictor_hidden.to_string(),
            r.class_hidden.map_or_else(|| "auto".into(), |h| h.to_string()),
            self.probe_epochs.to_string(),
            self.ordering_samples.to_string(),
            self.knn_k.to_string(),
            path(&self.out),
            self.log_wall_time.to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
