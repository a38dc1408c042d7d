use std::path::Path;

use opera_core::data::{AugmentConfig, Dataset};
use opera_core::evaluation::{knn_eval, linear_probe, similarity_ordering, ProbeConfig, SimilarityDiagnostic};
use opera_core::model::HierarchyModel;
use opera_core::training::streams;
use opera_core::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{experiment_split, load_csv};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Probe,
    Knn,
    Ordering,
}

/// Where the evaluation data comes from.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    /// Regenerate the experiment's own train/test split.
    Config(&'a Path),
    /// Split a CSV file with the given seed and test fraction 0.25.
    Csv(&'a Path),
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub k: usize,
    pub samples: usize,
    pub probe_epochs: usize,
    pub seed: u64,
}

/// Probe, kNN and ordering results of one trained model.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub probe_accuracy: f64,
    pub knn_accuracy: f64,
    pub ordering: OrderingJson,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OrderingJson {
    pub mean_same_instance: f64,
    pub mean_same_class: f64,
    pub mean_cross_class: f64,
}

impl From<SimilarityDiagnostic> for OrderingJson {
    fn from(d: SimilarityDiagnostic) -> Self {
        OrderingJson {
            mean_same_instance: d.mean_same_instance,
            mean_same_class: d.mean_same_class,
            mean_cross_class: d.mean_cross_class,
        }
    }
}

fn probe_cfg(epochs: usize, seed: u64) -> ProbeConfig {
    ProbeConfig {
        epochs,
        seed: Rng::derive(seed, streams::PROBE).next_u64(),
        ..ProbeConfig::default()
    }
}

/// All three protocols with the settings of `cfg`.
pub fn evaluate(model: &HierarchyModel, train: &Dataset, test: &Dataset, cfg: &ExperimentConfig) -> CliResult<EvalSummary> {
    let seed = cfg.run.seed;
    let probe = linear_probe(model, train, test, &probe_cfg(cfg.probe_epochs, seed))?;
    let knn = knn_eval(model, train, test, cfg.knn_k)?;
    let mut rng = Rng::derive(seed, streams::ORDERING);
    let ordering = similarity_ordering(model, test, &cfg.run.augment, &mut rng, cfg.ordering_samples)?;
    Ok(EvalSummary {
        probe_accuracy: probe.accuracy,
        knn_accuracy: knn,
        ordering: ordering.into(),
    })
}

/// Loads a checkpoint and runs one protocol on the test split.
pub fn cmd_eval(checkpoint_path: &Path, source: DataSource<'_>, protocol: Protocol, opts: &EvalOptions) -> CliResult<Value> {
    let pair = checkpoint::load(checkpoint_path)?;
    let (train, test, augment) = match source {
        DataSource::Config(path) => {
            let cfg = ExperimentConfig::load(path)?;
            let (tr, te) = experiment_split(&cfg)?;
            (tr, te, cfg.run.augment)
        }
        DataSource::Csv(path) => {
            let data = load_csv(path)?;
            let (tr, te) = data.stratified_split(0.25, &mut Rng::derive(opts.seed, streams::SPLIT))?;
            (tr, te, AugmentConfig::default())
        }
    };
    let model = &pair.online;
    if model.input_dim() != test.dim() {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} input features, dataset has {}",
            model.input_dim(),
            test.dim()
        )));
    }
    Ok(match protocol {
        Protocol::Probe => {
            let r = linear_probe(model, &train, &test, &probe_cfg(opts.probe_epochs, opts.seed))?;
            json!({
                "protocol": "probe",
                "accuracy": r.accuracy,
                "per_class_accuracy": r.per_class_accuracy,
                "epochs_used": r.epochs_used,
            })
        }
        Protocol::Knn => {
            let acc = knn_eval(model, &train, &test, opts.k)?;
            json!({ "protocol": "knn", "k": opts.k, "accuracy": acc })
        }
        Protocol::Ordering => {
            let mut rng = Rng::derive(opts.seed, streams::ORDERING);
            let d = similarity_ordering(model, &test, &augment, &mut rng, opts.samples)?;
            json!({
                "protocol": "ordering",
                "samples": opts.samples,
                "mean_same_instance": d.mean_same_instance,
                "mean_same_class": d.mean_same_class,
                "mean_cross_class": d.mean_cross_class,
            })
        }
    })
}
