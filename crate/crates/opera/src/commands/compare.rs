use std::io::Write;
use std::path::{Path, PathBuf};

use crate::commands::eval::evaluate;
use crate::commands::train::train;
use crate::config::ExperimentConfig;
use crate::data::experiment_split;
use crate::error::{CliError, CliResult};

pub const HEADER: &[&str] = &[
    "config",
    "mode",
    "arrangement",
    "seed",
    "epochs",
    "final_loss_total",
    "probe_accuracy",
    "knn_accuracy",
    "mean_same_instance",
    "mean_same_class",
    "mean_cross_class",
];

fn run_one(path: &Path) -> CliResult<Vec<String>> {
    let cfg = ExperimentConfig::load(path)?;
    let (outcome, records) = train(&cfg).map_err(|(e, _)| e)?;
    let (tr, te) = experiment_split(&cfg)?;
    let s = evaluate(&outcome.pair.online, &tr, &te, &cfg)?;
    Ok(vec![
        path.display().to_string(),
        cfg.run.mode.as_str().into(),
        cfg.run.arrangement.as_str().into(),
        cfg.run.seed.to_string(),
        records.len().to_string(),
        records.last().map_or(0.0, |r| r.loss_total).to_string(),
        s.probe_accuracy.to_string(),
        s.knn_accuracy.to_string(),
        s.ordering.mean_same_instance.to_string(),
        s.ordering.mean_same_class.to_string(),
        s.ordering.mean_cross_class.to_string(),
    ])
}

/// Trains and evaluates each config in turn, writing one CSV row per run.
/// Rows are flushed as they complete, so a failing run leaves the earlier
/// rows in place.
pub fn cmd_compare<W: Write>(configs: &[PathBuf], out: W) -> CliResult<()> {
    if configs.len() < 2 {
        return Err(CliError::Usage(format!("compare needs at least 2 configs, got {}", configs.len())));
    }
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| CliError::io("<csv output>", std::io::Error::other(e));
    w.write_record(HEADER).map_err(csv_err)?;
    w.flush().map_err(|e| CliError::io("<csv output>", e))?;
    for path in configs {
        let row = run_one(path)?;
        w.write_record(&row).map_err(csv_err)?;
        w.flush().map_err(|e| CliError::io("<csv output>", e))?;
    }
    Ok(())
}
