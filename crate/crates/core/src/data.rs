//! Synthetic blobs, feature-vector augmentation and dataset helpers.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::labels::{validate_dataset, LabelPair};
use crate::numerics::{Matrix, Rng};

/// Feature matrix with one label pair per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<LabelPair>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<LabelPair>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} labels", features.rows()),
                format!("{}", labels.len()),
            ));
        }
        if let Some((r, c)) = features.first_non_finite() {
            return Err(Error::NonFinite {
                context: "dataset features".into(),
                row: r,
                col: c,
            });
        }
        if let Some(bad) = labels.iter().find(|l| l.class_id >= num_classes) {
            return Err(Error::Label(format!(
                "class id {} out of range for {num_classes} classes",
                bad.class_id
            )));
        }
        validate_dataset(&labels).map_err(|v| Error::from((v, labels.as_slice())))?;
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[LabelPair] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Same features with class ids replaced. Instance ids are kept.
    pub fn with_class_ids(&self, classes: &[usize]) -> Result<Dataset> {
        if classes.len() != self.len() {
            return Err(Error::shape(
                "Dataset::with_class_ids",
                format!("{} class ids", self.len()),
                format!("{}", classes.len()),
            ));
        }
        let labels = self
            .labels
            .iter()
            .zip(classes)
            .map(|(l, &c)| LabelPair::new(l.instance_id, c))
            .collect();
        Dataset::new(self.features.clone(), labels, self.num_classes)
    }

    /// Same labels with features replaced.
    pub fn with_features(&self, features: Matrix) -> Result<Dataset> {
        Dataset::new(features, self.labels.clone(), self.num_classes)
    }

    /// Per-class random split; every class keeps at least one training row
    /// when it has any rows at all.
    pub fn stratified_split(&self, test_fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction must lie in [0, 1), got {test_fraction}")));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..self.num_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i].class_id == c).collect();
            rng.shuffle(&mut idx);
            let n_test = ((idx.len() as f64 * test_fraction) as usize).min(idx.len().saturating_sub(1));
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// Number of rows per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.num_classes];
        for l in &self.labels {
            counts[l.class_id] += 1;
        }
        counts
    }
}

/// Gaussian blobs around class centers drawn uniformly on the unit sphere.
/// Rows are grouped by class and each row is its own instance.
pub fn make_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, rng: &mut Rng) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::Config("make_blobs needs positive class count, size and dimension".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!("spread must be finite and nonnegative, got {spread}")));
    }
    let mut centers = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut c: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        let mut n = crate::numerics::norm(&c);
        while n == 0.0 {
            c = (0..dim).map(|_| rng.gaussian()).collect();
            n = crate::numerics::norm(&c);
        }
        c.iter_mut().for_each(|v| *v /= n);
        centers.push(c);
    }
    let total = num_classes * per_class;
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                data.push(c + spread * rng.gaussian());
            }
            labels.push(LabelPair::new(labels.len(), class));
        }
    }
    Dataset::new(Matrix::from_vec(total, dim, data)?, labels, num_classes)
}

/// Random perturbation producing a view of a feature vector: a global
/// rescale, additive Gaussian noise, then coordinate dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub mask_prob: f64,
}

impl AugmentConfig {
    pub const IDENTITY: AugmentConfig = AugmentConfig {
        noise_sigma: 0.0,
        scale_lo: 1.0,
        scale_hi: 1.0,
        mask_prob: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi && self.scale_hi.is_finite()) {
            return Err(Error::Config(format!(
                "scale range must satisfy 0 < lo <= hi, got ({}, {})",
                self.scale_lo, self.scale_hi
            )));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob must lie in [0, 1), got {}", self.mask_prob)));
        }
        Ok(())
    }

    /// One view of `x`.
    pub fn view(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        let scale = if self.scale_hi > self.scale_lo {
            rng.uniform(self.scale_lo, self.scale_hi)
        } else {
            self.scale_lo
        };
        x.iter()
            .map(|&v| {
                let mut out = scale * v;
                if self.noise_sigma > 0.0 {
                    out += self.noise_sigma * rng.gaussian();
                }
                if self.mask_prob > 0.0 && rng.bernoulli(self.mask_prob) {
                    out = 0.0;
                }
                out
            })
            .collect()
    }

    /// One view per row.
    pub fn view_batch(&self, x: &Matrix, rng: &mut Rng) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let v = self.view(x.row(r), rng);
            out.row_mut(r).copy_from_slice(&v);
        }
        out
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_sigma: 0.1,
            scale_lo: 0.8,
            scale_hi: 1.2,
            mask_prob: 0.1,
        }
    }
}

/// Two independent views of `x`. Both inherit the label pair of `x`.
pub fn two_views(x: &[f64], cfg: &AugmentConfig, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let a = cfg.view(x, rng);
    let b = cfg.view(x, rng);
    Ok((a, b))
}

/// Two views of every row, drawn row by row in order.
pub fn two_views_batch(x: &Matrix, cfg: &AugmentConfig, rng: &mut Rng) -> Result<(Matrix, Matrix)> {
    cfg.validate()?;
    let mut a = Matrix::zeros(x.rows(), x.cols());
    let mut b = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let (v1, v2) = two_views(x.row(r), cfg, rng)?;
        a.row_mut(r).copy_from_slice(&v1);
        b.row_mut(r).copy_from_slice(&v2);
    }
    Ok((a, b))
}
