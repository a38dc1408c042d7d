//! Frozen-feature evaluations: linear probe, cosine kNN and the mean
//! similarity of view pairs, same-class pairs and cross-class pairs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::HierarchyModel;
use crate::numerics::{cosine, Matrix, Rng};
use crate::objectives::log_sum_exp;

/// Read-only feature extractor.
pub trait Encoder {
    fn encode(&self, x: &Matrix) -> Result<Matrix>;
}

/// Backbone output in evaluation mode.
impl Encoder for HierarchyModel {
    fn encode(&self, x: &Matrix) -> Result<Matrix> {
        HierarchyModel::encode(self, x)
    }
}

impl<F> Encoder for F
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self(x)
    }
}

/// Returns its input.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEncoder;

impl Encoder for IdentityEncoder {
    fn encode(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 0.1,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Accuracy within each test class; 0 for classes absent from the test set.
    pub per_class_accuracy: Vec<f64>,
    pub epochs_used: usize,
}

fn check_pair(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.num_classes() != test.num_classes() {
        return Err(Error::Config(format!(
            "train has {} classes, test has {}",
            train.num_classes(),
            test.num_classes()
        )));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("evaluation needs non-empty train and test sets".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape(
            "evaluation",
            format!("test width {}", train.dim()),
            format!("{}", test.dim()),
        ));
    }
    Ok(())
}

fn encode_checked(encoder: &dyn Encoder, x: &Matrix) -> Result<Matrix> {
    let f = encoder.encode(x)?;
    if f.rows() != x.rows() {
        return Err(Error::shape("encoder", format!("{} rows", x.rows()), format!("{}", f.rows())));
    }
    if let Some((row, col)) = f.first_non_finite() {
        return Err(Error::NonFinite {
            context: "encoded features".into(),
            row,
            col,
        });
    }
    Ok(f)
}

/// Softmax regression on frozen, standardised features. Standardisation
/// uses the training mean and standard deviation per feature (features
/// with zero spread are only centred). Weights start at zero and are
/// trained with plain minibatch SGD.
pub fn linear_probe(encoder: &dyn Encoder, train: &Dataset, test: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    check_pair(train, test)?;
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("probe needs batch_size >= 1 and lr > 0".into()));
    }
    let ftr = encode_checked(encoder, train.features())?;
    let fte = encode_checked(encoder, test.features())?;
    let d = ftr.cols();
    let n = ftr.rows();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(ftr.row(r)) {
            *m += v / n as f64;
        }
    }
    let mut sd = vec![0.0; d];
    for r in 0..n {
        for ((s, v), m) in sd.iter_mut().zip(ftr.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 0.0 { libm::sqrt(v) } else { 1.0 }).collect();
    let standardize = |f: &Matrix| {
        let mut out = f.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&mean).zip(&sd) {
                *v = (*v - m) / s;
            }
        }
        out
    };
    let xtr = standardize(&ftr);
    let xte = standardize(&fte);

    let c = train.num_classes();
    let mut w = Matrix::zeros(c, d);
    let mut b = vec![0.0; c];
    let mut rng = Rng::new(cfg.seed);
    let mut probs = vec![0.0; c];
    for _ in 0..cfg.epochs {
        let order = rng.permutation(n);
        for idx in order.chunks(cfg.batch_size) {
            let mut gw = Matrix::zeros(c, d);
            let mut gb = vec![0.0; c];
            let scale = 1.0 / idx.len() as f64;
            for &i in idx {
                let x = xtr.row(i);
                let logits = logits_of(&w, &b, x);
                let lse = log_sum_exp(&logits);
                for (p, z) in probs.iter_mut().zip(&logits) {
                    *p = libm::exp(z - lse);
                }
                probs[train.labels()[i].class_id] -= 1.0;
                for (k, &g) in probs.iter().enumerate() {
                    gb[k] += scale * g;
                    for (gv, xv) in gw.row_mut(k).iter_mut().zip(x) {
                        *gv += scale * g * xv;
                    }
                }
            }
            w.add_scaled(&gw, -cfg.lr)?;
            for (bv, g) in b.iter_mut().zip(&gb) {
                *bv -= cfg.lr * g;
            }
        }
    }

    let predictions: Vec<usize> = (0..xte.rows()).map(|r| argmax(&logits_of(&w, &b, xte.row(r)))).collect();
    Ok(score(&predictions, test, cfg.epochs))
}

fn logits_of(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|k| b[k] + w.row(k).iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn score(predictions: &[usize], test: &Dataset, epochs_used: usize) -> ProbeResult {
    let c = test.num_classes();
    let mut correct = vec![0usize; c];
    let counts = test.class_counts();
    for (p, l) in predictions.iter().zip(test.labels()) {
        if *p == l.class_id {
            correct[l.class_id] += 1;
        }
    }
    let total: usize = correct.iter().sum();
    ProbeResult {
        accuracy: total as f64 / test.len() as f64,
        per_class_accuracy: correct
            .iter()
            .zip(&counts)
            .map(|(&k, &n)| if n == 0 { 0.0 } else { k as f64 / n as f64 })
            .collect(),
        epochs_used,
    }
}

/// Majority vote among the `k` training rows with the highest cosine
/// similarity. Vote ties go to the class with the larger summed
/// similarity, then to the lower class id. Neighbour ties go to the lower
/// training index.
pub fn knn_eval(encoder: &dyn Encoder, train: &Dataset, test: &Dataset, k: usize) -> Result<f64> {
    check_pair(train, test)?;
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!("k must lie in [1, {}], got {k}", train.len())));
    }
    let ftr = encode_checked(encoder, train.features())?;
    let fte = encode_checked(encoder, test.features())?;
    let c = train.num_classes();
    let mut correct = 0usize;
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    for r in 0..fte.rows() {
        sims.clear();
        for t in 0..ftr.rows() {
            sims.push((cosine(fte.row(r), ftr.row(t))?, t));
        }
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![(0usize, 0.0f64); c];
        for &(s, t) in &sims[..k] {
            let v = &mut votes[train.labels()[t].class_id];
            v.0 += 1;
            v.1 += s;
        }
        let mut best = 0;
        for (i, v) in votes.iter().enumerate() {
            let b = votes[best];
            if v.0 > b.0 || (v.0 == b.0 && v.1 > b.1) {
                best = i;
            }
        }
        if best == test.labels()[r].class_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean cosine similarities of encoded pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityDiagnostic {
    /// Two views of one sample.
    pub mean_same_instance: f64,
    /// Views of two different samples of one class.
    pub mean_same_class: f64,
    /// Views of two samples of different classes.
    pub mean_cross_class: f64,
}

impl SimilarityDiagnostic {
    /// `same_instance - same_class` and `same_class - cross_class`.
    pub fn margins(&self) -> (f64, f64) {
        (
            self.mean_same_instance - self.mean_same_class,
            self.mean_same_class - self.mean_cross_class,
        )
    }
}

/// Draws `samples` anchors. For each anchor it forms a view pair of the
/// anchor, a pair with a random other sample of its class and a pair with
/// a random sample of another class; every member of every pair is an
/// independent augmented view.
pub fn similarity_ordering(
    encoder: &dyn Encoder,
    data: &Dataset,
    augment: &AugmentConfig,
    rng: &mut Rng,
    samples: usize,
) -> Result<SimilarityDiagnostic> {
    augment.validate()?;
    if samples == 0 {
        return Err(Error::Config("similarity_ordering needs samples >= 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, l) in data.labels().iter().enumerate() {
        by_class[l.class_id].push(i);
    }
    if let Some(c) = by_class.iter().position(|m| m.len() == 1) {
        return Err(Error::Sampling(format!("class {c} has a single sample")));
    }
    let present: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::Sampling("need samples from at least two classes".into()));
    }

    let x = data.features();
    let mut rows = Matrix::zeros(6 * samples, x.cols());
    for s in 0..samples {
        let i = rng.below(data.len());
        let ci = data.labels()[i].class_id;
        let members = &by_class[ci];
        let at = members.iter().position(|&m| m == i).unwrap_or(0);
        let mut p = rng.below(members.len() - 1);
        if p >= at {
            p += 1;
        }
        let j = members[p];
        let others: Vec<usize> = present.iter().copied().filter(|&c| c != ci).collect();
        let cls = others[rng.below(others.len())];
        let k = by_class[cls][rng.below(by_class[cls].len())];
        for (slot, idx) in [i, i, i, j, i, k].into_iter().enumerate() {
            let v = augment.view(x.row(idx), rng);
            rows.row_mut(6 * s + slot).copy_from_slice(&v);
        }
    }
    let f = encode_checked(encoder, &rows)?;
    let mut sums = [0.0; 3];
    for s in 0..samples {
        for (t, sum) in sums.iter_mut().enumerate() {
            *sum += cosine(f.row(6 * s + 2 * t), f.row(6 * s + 2 * t + 1))?;
        }
    }
    let n = samples as f64;
    Ok(SimilarityDiagnostic {
        mean_same_instance: sums[0] / n,
        mean_same_class: sums[1] / n,
        mean_cross_class: sums[2] / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;

    fn split(classes: usize, per: usize, dim: usize, spread: f64, seed: u64) -> (Dataset, Dataset) {
        let d = make_blobs(classes, per, dim, spread, &mut Rng::new(seed)).unwrap();
        d.stratified_split(0.25, &mut Rng::new(seed + 1)).unwrap()
    }

    #[test]
    fn separable_probe() {
        let (tr, te) = split(2, 100, 4, 0.1, 1);
        let r = linear_probe(&IdentityEncoder, &tr, &te, &ProbeConfig::default()).unwrap();
        assert!(r.accuracy >= 0.99, "{r:?}");
        let weighted: f64 = r
            .per_class_accuracy
            .iter()
            .zip(te.class_counts())
            .map(|(a, n)| a * n as f64)
            .sum::<f64>()
            / te.len() as f64;
        assert!((weighted - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn zero_encoder_predicts_majority() {
        let d = make_blobs(3, 10, 2, 0.1, &mut Rng::new(2)).unwrap();
        let idx: Vec<usize> = (0..15).collect();
        let tr = d.subset(&idx);
        let zero = |x: &Matrix| Ok(Matrix::zeros(x.rows(), 3));
        let r = linear_probe(&zero, &tr, &d, &ProbeConfig { epochs: 20, ..ProbeConfig::default() }).unwrap();
        assert!((r.accuracy - 10.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn class_mismatch() {
        let (tr, _) = split(2, 10, 3, 0.1, 3);
        let (_, te) = split(3, 10, 3, 0.1, 3);
        assert!(matches!(
            linear_probe(&IdentityEncoder, &tr, &te, &ProbeConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn knn_cases() {
        let (tr, te) = split(3, 40, 5, 0.1, 4);
        assert_eq!(knn_eval(&IdentityEncoder, &tr, &tr, 1).unwrap(), 1.0);
        assert!(knn_eval(&IdentityEncoder, &tr, &te, 5).unwrap() >= 0.99);
        assert!(knn_eval(&IdentityEncoder, &tr, &te, 0).is_err());
        assert!(knn_eval(&IdentityEncoder, &tr, &te, tr.len() + 1).is_err());
    }

    #[test]
    fn ordering_identity_cases() {
        let d = make_blobs(4, 20, 8, 0.1, &mut Rng::new(5)).unwrap();
        let s = similarity_ordering(&IdentityEncoder, &d, &AugmentConfig::IDENTITY, &mut Rng::new(6), 200).unwrap();
        assert_eq!(s.mean_same_instance, 1.0);
        assert!(s.mean_same_class > s.mean_cross_class);
        for v in [s.mean_same_instance, s.mean_same_class, s.mean_cross_class] {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn ordering_rejects_singleton_class() {
        let d = make_blobs(2, 1, 3, 0.1, &mut Rng::new(7)).unwrap();
        assert!(matches!(
            similarity_ordering(&IdentityEncoder, &d, &AugmentConfig::IDENTITY, &mut Rng::new(0), 5),
            Err(Error::Sampling(_))
        ));
    }
}
