//! CSV datasets and the train/test split shared by every command.
//!
//! Format: header `f0,...,f{D-1},instance_id,class_id`, one sample per
//! row, decimal features.

use std::path::Path;

use opera_core::data::{make_blobs, Dataset};
use opera_core::training::streams;
use opera_core::{LabelPair, Matrix, Rng};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub fn load_csv(path: &Path) -> CliResult<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_csv(file, path)
}

/// `origin` only labels error messages.
pub fn read_csv<R: std::io::Read>(reader: R, origin: &Path) -> CliResult<Dataset> {
    let err = |line: usize, message: String| CliError::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let cols = header.len();
    if cols < 3 {
        return Err(err(1, format!("expected at least one feature plus instance_id,class_id; got {cols} columns")));
    }
    let dim = cols - 2;
    for (j, name) in header.iter().enumerate() {
        let want = match j {
            j if j < dim => format!("f{j}"),
            j if j == dim => "instance_id".into(),
            _ => "class_id".into(),
        };
        if name.trim() != want {
            return Err(err(1, format!("column {j} should be `{want}`, found `{name}`")));
        }
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut lines = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != cols {
            return Err(err(line, format!("expected {cols} fields, found {}", record.len())));
        }
        for (j, field) in record.iter().take(dim).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(line, format!("feature f{j} is not a number: `{field}`")))?;
            if !v.is_finite() {
                return Err(err(line, format!("feature f{j} is not finite")));
            }
            values.push(v);
        }
        let id = |j: usize, name: &str| -> CliResult<usize> {
            record[j]
                .trim()
                .parse()
                .map_err(|_| err(line, format!("{name} must be a non-negative integer, found `{}`", &record[j])))
        };
        labels.push(LabelPair::new(id(dim, "instance_id")?, id(dim + 1, "class_id")?));
        lines.push(line);
    }
    if labels.is_empty() {
        return Err(err(1, "no data rows".into()));
    }
    if let Err(v) = opera_core::labels::validate_dataset(&labels) {
        return Err(CliError::Parse {
            path: origin.to_path_buf(),
            line: lines[v.second],
            message: format!(
                "instance {} has class {} here but class {} on line {}",
                v.instance_id,
                labels[v.second].class_id,
                labels[v.first].class_id,
                lines[v.first]
            ),
        });
    }
    let num_classes = labels.iter().map(|l| l.class_id).max().unwrap_or(0) + 1;
    let features = Matrix::from_vec(labels.len(), dim, values)?;
    Ok(Dataset::new(features, labels, num_classes)?)
}

pub fn write_csv<W: std::io::Write>(data: &Dataset, writer: W) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("f{j}")).collect();
    header.push("instance_id".into());
    header.push("class_id".into());
    let to_cli = |e: csv::Error| CliError::Config(format!("csv write failed: {e}"));
    w.write_record(&header).map_err(to_cli)?;
    for (r, l) in data.labels().iter().enumerate() {
        let mut row: Vec<String> = data.features().row(r).iter().map(|v| v.to_string()).collect();
        row.push(l.instance_id.to_string());
        row.push(l.class_id.to_string());
        w.write_record(&row).map_err(to_cli)?;
    }
    w.flush().map_err(|e| CliError::io("<csv output>", e))?;
    Ok(())
}

/// Full dataset of an experiment: the CSV when one is configured, blobs
/// from the data stream of the seed otherwise.
pub fn experiment_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    match &cfg.data_csv {
        Some(path) => load_csv(path),
        None => {
            let b = cfg.run.data;
            let mut rng = Rng::derive(cfg.run.seed, streams::DATA);
            Ok(make_blobs(b.num_classes, b.per_class, b.dim, b.spread, &mut rng)?)
        }
    }
}

/// Stratified train/test split drawn from the split stream of the seed.
pub fn experiment_split(cfg: &ExperimentConfig) -> CliResult<(Dataset, Dataset)> {
    let data = experiment_dataset(cfg)?;
    let mut rng = Rng::derive(cfg.run.seed, streams::SPLIT);
    Ok(data.stratified_split(cfg.test_fraction, &mut rng)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str) -> CliResult<Dataset> {
        read_csv(text.as_bytes(), Path::new("mem.csv"))
    }

    #[test]
    fn three_rows() {
        let d = read("f0,f1,instance_id,class_id\n0.5,1,0,0\n-2,3e-1,1,1\n0,0,2,1\n").unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.num_classes(), 2);
        assert_eq!(d.features().row(1), &[-2.0, 0.3]);
    }

    #[test]
    fn wrong_column_count_reports_line() {
        match read("f0,instance_id,class_id\n1,0,0\n2,1\n") {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_numeric_feature() {
        assert!(matches!(read("f0,instance_id,class_id\nabc,0,0\n"), Err(CliError::Parse { line: 2, .. })));
    }

    #[test]
    fn hierarchy_violation() {
        match read("f0,instance_id,class_id\n1,0,0\n2,0,1\n") {
            Err(CliError::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("instance 0"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_header() {
        assert!(matches!(read("a,b,c\n1,0,0\n"), Err(CliError::Parse { line: 1, .. })));
    }

    #[test]
    fn write_then_read() {
        let d = make_blobs(2, 3, 4, 0.1, &mut Rng::new(1)).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice(), Path::new("x")).unwrap(), d);
    }
}
