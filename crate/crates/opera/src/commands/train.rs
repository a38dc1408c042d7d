use std::path::{Path, PathBuf};
use std::time::Instant;

use opera_core::training::{pretrain_observed, EpochMetrics, Observer, TrainOutcome};
use serde::Serialize;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::experiment_split;
use crate::error::{CliError, CliResult};
use crate::metrics::{write_jsonl, MetricsRecord};

pub const OUT_ENV: &str = "OPERA_OUT";

/// Output directory: explicit flag, then `OPERA_OUT`, then the config's
/// `out` key, then `runs/<config file stem>`.
pub fn resolve_out_dir(cfg: &ExperimentConfig, config_path: &Path, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    if let Some(p) = &cfg.out {
        return p.clone();
    }
    let stem = config_path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from("runs").join(stem)
}

struct Recorder {
    start: Instant,
    wall: bool,
    records: Vec<MetricsRecord>,
}

impl Observer for Recorder {
    fn on_epoch(&mut self, m: &EpochMetrics) {
        let ms = if self.wall { self.start.elapsed().as_millis() as u64 } else { 0 };
        self.records.push(MetricsRecord::from_epoch(m, ms));
    }
}

/// Trains on the training split of `cfg`. Returns the outcome together with
/// the metrics records; on divergence the records of the finished epochs
/// are returned alongside the error.
pub fn train(cfg: &ExperimentConfig) -> Result<(TrainOutcome, Vec<MetricsRecord>), (CliError, Vec<MetricsRecord>)> {
    let (train, _) = experiment_split(cfg).map_err(|e| (e, Vec::new()))?;
    let mut rec = Recorder {
        start: Instant::now(),
        wall: cfg.log_wall_time,
        records: Vec::new(),
    };
    match pretrain_observed(&cfg.run, &train, &mut rec) {
        Ok(out) => Ok((out, rec.records)),
        Err(e) => Err((e.into(), rec.records)),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub out: String,
    pub epochs: usize,
    pub final_loss_total: f64,
}

/// Writes `config.resolved`, `metrics.jsonl` and `final.ckpt` under the
/// output directory.
pub fn cmd_train(config_path: &Path, out_flag: Option<&Path>) -> CliResult<TrainSummary> {
    let cfg = ExperimentConfig::load(config_path)?;
    let out = resolve_out_dir(&cfg, config_path, out_flag);
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let resolved = out.join("config.resolved");
    std::fs::write(&resolved, cfg.resolved()).map_err(|e| CliError::io(&resolved, e))?;

    let metrics_path = out.join("metrics.jsonl");
    let write_metrics = |records: &[MetricsRecord]| -> CliResult<()> {
        let file = std::fs::File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
        write_jsonl(records, std::io::BufWriter::new(file)).map_err(|e| CliError::io(&metrics_path, e))
    };
    let (outcome, records) = match train(&cfg) {
        Ok(done) => done,
        Err((err, partial)) => {
            write_metrics(&partial)?;
            return Err(err);
        }
    };
    write_metrics(&records)?;
    checkpoint::save(&outcome.pair, &out.join("final.ckpt"))?;
    Ok(TrainSummary {
        out: out.display().to_string(),
        epochs: records.len(),
        final_loss_total: records.last().map_or(0.0, |r| r.loss_total),
    })
}
