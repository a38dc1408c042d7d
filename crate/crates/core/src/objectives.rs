//! The unified pairwise objective and the losses built on it.
//!
//! Every loss here is expressed through per-pair coefficients: a positive
//! pair contributes `-w_p * s` and a negative pair `+w_n * s`, where the
//! coefficients come from a [`WeightScheme`]. Coefficients are treated as
//! constants when differentiating, so `dJ/ds` is `-w_p` on positives and
//! `+w_n` on negatives. With the softmax and InfoNCE schemes that is exactly
//! the gradient of the corresponding log-likelihood loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::labels::{relate, LabelPair, Level, PairRelation};
use crate::numerics::{norm, Matrix};

/// Rule turning a row of similarities into pair coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightScheme {
    /// `w_p = 1`, `w_n = exp(s) / sum over negatives of exp(s')`.
    Softmax,
    /// InfoNCE coefficients, including the `1 / temperature` factor.
    InfoNce { temperature: f64 },
    /// Fixed coefficients.
    Constant { positive: f64, negative: f64 },
}

impl WeightScheme {
    pub fn info_nce(temperature: f64) -> Result<Self> {
        let s = WeightScheme::InfoNce { temperature };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(positive: f64, negative: f64) -> Result<Self> {
        let s = WeightScheme::Constant { positive, negative };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightScheme::Softmax => Ok(()),
            WeightScheme::InfoNce { temperature } => {
                if temperature > 0.0 && temperature.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Domain(format!("temperature must be positive, got {temperature}")))
                }
            }
            WeightScheme::Constant { positive, negative } => {
                if positive >= 0.0 && negative >= 0.0 && positive.is_finite() && negative.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Domain(format!(
                        "constant weights must be finite and nonnegative, got ({positive}, {negative})"
                    )))
                }
            }
        }
    }
}

/// Similarities of one anchor against a set of candidates, with the label
/// relation of each pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    anchor: usize,
    sims: Vec<f64>,
    relations: Vec<PairRelation>,
}

impl SimilarityRow {
    pub fn new(anchor: usize, sims: Vec<f64>, relations: Vec<PairRelation>) -> Result<Self> {
        if sims.len() != relations.len() {
            return Err(Error::shape(
                "SimilarityRow::new",
                format!("{} relations", sims.len()),
                format!("{}", relations.len()),
            ));
        }
        if let Some(j) = sims.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("similarity row {anchor}"),
                row: anchor,
                col: j,
            });
        }
        Ok(SimilarityRow {
            anchor,
            sims,
            relations,
        })
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn sims(&self) -> &[f64] {
        &self.sims
    }

    pub fn relations(&self) -> &[PairRelation] {
        &self.relations
    }

    pub fn len(&self) -> usize {
        self.sims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sims.is_empty()
    }
}

/// Per-pair coefficients aligned with a [`SimilarityRow`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairWeights {
    weights: Vec<f64>,
    positive: Vec<bool>,
}

impl PairWeights {
    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn is_positive(&self, j: usize) -> bool {
        self.positive[j]
    }

    /// `w_p` of each positive pair, in row order.
    pub fn positive_weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().zip(&self.positive).filter(|(_, &p)| p).map(|(&w, _)| w)
    }

    /// `w_n` of each negative pair, in row order.
    pub fn negative_weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().zip(&self.positive).filter(|(_, &p)| !p).map(|(&w, _)| w)
    }

    /// `dJ/ds` for every pair: `-w_p` or `+w_n`.
    pub fn sim_gradient(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.positive)
            .map(|(&w, &p)| if p { -w } else { w })
            .collect()
    }
}

fn positives_mask(row: &SimilarityRow, level: Level) -> Vec<bool> {
    row.relations.iter().map(|r| r.is_positive(level)).collect()
}

/// Coefficients of `scheme` for every pair of `row`, judged at `level`.
///
/// InfoNCE with several positives sums each negative's coefficient over
/// the per-positive terms, which keeps the coefficients equal to the
/// gradient of the summed InfoNCE losses. The softmax negative
/// coefficient does not depend on the positive.
pub fn pair_weights(scheme: WeightScheme, row: &SimilarityRow, level: Level) -> Result<PairWeights> {
    scheme.validate()?;
    let positive = positives_mask(row, level);
    let n_pos = positive.iter().filter(|&&p| p).count();
    let mut weights = vec![0.0; row.len()];
    match scheme {
        WeightScheme::Constant { positive: wp, negative: wn } => {
            for (w, &p) in weights.iter_mut().zip(&positive) {
                *w = if p { wp } else { wn };
            }
        }
        WeightScheme::Softmax => {
            if n_pos == 0 {
                return Err(Error::DegenerateRow {
                    row: row.anchor,
                    reason: "no positive pair",
                });
            }
            let max_neg = row
                .sims
                .iter()
                .zip(&positive)
                .filter(|(_, &p)| !p)
                .fold(f64::NEG_INFINITY, |m, (&s, _)| m.max(s));
            let mut total = 0.0;
            for ((w, &s), &p) in weights.iter_mut().zip(&row.sims).zip(&positive) {
                if p {
                    *w = 1.0;
                } else {
                    *w = libm::exp(s - max_neg);
                    total += *w;
                }
            }
            for (w, &p) in weights.iter_mut().zip(&positive) {
                if !p {
                    *w /= total;
                }
            }
        }
        WeightScheme::InfoNce { temperature } => {
            if n_pos == 0 {
                return Err(Error::DegenerateRow {
                    row: row.anchor,
                    reason: "no positive pair",
                });
            }
            let inv_t = 1.0 / temperature;
            let shift = row.sims.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * inv_t));
            let exps: Vec<f64> = row.sims.iter().map(|&s| libm::exp(s * inv_t - shift)).collect();
            let neg_total: f64 = exps.iter().zip(&positive).filter(|(_, &p)| !p).map(|(e, _)| e).sum();
            for (j, &pj) in positive.iter().enumerate() {
                if !pj {
                    continue;
                }
                let denom = exps[j] + neg_total;
                weights[j] = inv_t * neg_total / denom;
                for (k, &pk) in positive.iter().enumerate() {
                    if !pk {
                        weights[k] += inv_t * exps[k] / denom;
                    }
                }
            }
        }
    }
    Ok(PairWeights { weights, positive })
}

/// Loss value with per-row, per-pair similarity gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad_sims: Vec<Vec<f64>>,
}

impl LossReport {
    /// `dJ/dy` for the anchor of row `row` when the candidates are the fixed
    /// rows of `prototypes` and `s(y, p) = y^T p`.
    pub fn anchor_gradient(&self, row: usize, prototypes: &Matrix) -> Result<Vec<f64>> {
        let g = self
            .grad_sims
            .get(row)
            .ok_or_else(|| Error::shape("anchor_gradient", format!("row < {}", self.grad_sims.len()), format!("{row}")))?;
        prototypes.apply_transposed(g)
    }
}

/// Unified objective: sum over pairs of `-w_p * I * s + w_n * (1 - I) * s`.
pub fn unified_loss(rows: &[SimilarityRow], scheme: WeightScheme, level: Level) -> Result<LossReport> {
    let mut value = 0.0;
    let mut grad_sims = Vec::with_capacity(rows.len());
    for row in rows {
        let g = pair_weights(scheme, row, level)?.sim_gradient();
        value += g.iter().zip(&row.sims).map(|(a, b)| a * b).sum::<f64>();
        grad_sims.push(g);
    }
    Ok(LossReport { value, grad_sims })
}

/// The four-term naive sum of self and full supervision on one set of
/// similarities. On a same-class, different-instance pair the summed
/// gradient is `w_n^self - w_p^full`.
pub fn naive_combined_loss(
    rows: &[SimilarityRow],
    scheme_self: WeightScheme,
    scheme_full: WeightScheme,
) -> Result<LossReport> {
    let inst = unified_loss(rows, scheme_self, Level::Instance)?;
    let class = unified_loss(rows, scheme_full, Level::Class)?;
    let grad_sims = inst
        .grad_sims
        .into_iter()
        .zip(class.grad_sims)
        .map(|(a, b)| a.into_iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    Ok(LossReport {
        value: inst.value + class.value,
        grad_sims,
    })
}

/// Log-likelihood form of a scheme on one row, whose similarity gradient
/// equals [`PairWeights::sim_gradient`].
///
/// * Softmax: `-sum_pos s_p + log sum_neg exp(s_n)` (the log term is 0 when
///   the row has no negatives).
/// * InfoNCE: `sum_pos -log(exp(s_p/t) / (exp(s_p/t) + sum_neg exp(s_n/t)))`.
/// * Constant: the linear surrogate itself.
pub fn scheme_objective(scheme: WeightScheme, row: &SimilarityRow, level: Level) -> Result<f64> {
    scheme.validate()?;
    let positive = positives_mask(row, level);
    let n_pos = positive.iter().filter(|&&p| p).count();
    match scheme {
        WeightScheme::Constant { .. } => {
            let w = pair_weights(scheme, row, level)?;
            Ok(w.sim_gradient().iter().zip(&row.sims).map(|(g, s)| g * s).sum())
        }
        WeightScheme::Softmax => {
            if n_pos == 0 {
                return Err(Error::DegenerateRow {
                    row: row.anchor,
                    reason: "no positive pair",
                });
            }
            let pos: f64 = row.sims.iter().zip(&positive).filter(|(_, &p)| p).map(|(s, _)| s).sum();
            let negs: Vec<f64> = row.sims.iter().zip(&positive).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
            Ok(-pos + if negs.is_empty() { 0.0 } else { log_sum_exp(&negs) })
        }
        WeightScheme::InfoNce { temperature } => {
            if n_pos == 0 {
                return Err(Error::DegenerateRow {
                    row: row.anchor,
                    reason: "no positive pair",
                });
            }
            let scaled: Vec<f64> = row.sims.iter().map(|s| s / temperature).collect();
            let negs: Vec<f64> = scaled.iter().zip(&positive).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
            let mut total = 0.0;
            for (&t, &p) in scaled.iter().zip(&positive) {
                if p {
                    let mut terms = negs.clone();
                    terms.push(t);
                    total += log_sum_exp(&terms) - t;
                }
            }
            Ok(total)
        }
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + libm::log(values.iter().map(|&v| libm::exp(v - m)).sum::<f64>())
}

/// `w_n^self * alpha - w_p^full * beta`. Negative values attract the pair,
/// positive values repel it.
pub fn adaptive_weight(w_n_self: f64, alpha: f64, w_p_full: f64, beta: f64) -> Result<f64> {
    if ![w_n_self, alpha, w_p_full, beta].iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("adaptive weight inputs must be finite".into()));
    }
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Domain(format!(
            "modulation factors are squared norms and must be nonnegative, got alpha={alpha}, beta={beta}"
        )));
    }
    Ok(w_n_self * alpha - w_p_full * beta)
}

/// Query/key similarity matrix for a batch, optionally on L2-normalised
/// embeddings, with the bookkeeping needed to push similarity gradients
/// back to the raw queries. Keys are constants.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    queries: Matrix,
    keys: Matrix,
    query_norms: Option<Vec<f64>>,
    relations: Vec<Vec<PairRelation>>,
}

impl ContrastiveBatch {
    pub fn new(queries: &Matrix, keys: &Matrix, labels: &[LabelPair], normalize: bool) -> Result<Self> {
        if queries.shape() != keys.shape() {
            return Err(Error::shape(
                "ContrastiveBatch::new",
                format!("keys {}x{}", queries.rows(), queries.cols()),
                format!("{}x{}", keys.rows(), keys.cols()),
            ));
        }
        if labels.len() != queries.rows() {
            return Err(Error::shape(
                "ContrastiveBatch::new",
                format!("{} labels", queries.rows()),
                format!("{}", labels.len()),
            ));
        }
        let (q, query_norms, k) = if normalize {
            let (q, qn) = l2_normalize_rows(queries, "query")?;
            let (k, _) = l2_normalize_rows(keys, "key")?;
            (q, Some(qn), k)
        } else {
            (queries.clone(), None, keys.clone())
        };
        let mut relations = Vec::with_capacity(labels.len());
        for &a in labels {
            relations.push(labels.iter().map(|&b| relate(a, b)).collect::<Result<Vec<_>>>()?);
        }
        Ok(ContrastiveBatch {
            queries: q,
            keys: k,
            query_norms,
            relations,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.rows() == 0
    }

    pub fn relations(&self) -> &[Vec<PairRelation>] {
        &self.relations
    }

    /// One row per query: similarities against every key in the batch.
    pub fn rows(&self) -> Result<Vec<SimilarityRow>> {
        let sims = self.queries.matmul_transposed(&self.keys)?;
        (0..sims.rows())
            .map(|i| SimilarityRow::new(i, sims.row(i).to_vec(), self.relations[i].clone()))
            .collect()
    }

    /// Gradient with respect to the raw (unnormalised) queries, given
    /// `dJ/ds` for each row.
    pub fn query_gradient(&self, grad_sims: &[Vec<f64>]) -> Result<Matrix> {
        let n = self.len();
        let flat: Vec<f64> = grad_sims.iter().flat_map(|r| r.iter().copied()).collect();
        let g = Matrix::from_vec(n, n, flat)?;
        let mut out = g.matmul(&self.keys)?;
        if let Some(norms) = &self.query_norms {
            for i in 0..n {
                let q = self.queries.row(i);
                let gi = out.row(i);
                let proj: f64 = q.iter().zip(gi).map(|(a, b)| a * b).sum();
                let inv = 1.0 / norms[i];
                let updated: Vec<f64> = gi.iter().zip(q).map(|(&g, &qv)| (g - qv * proj) * inv).collect();
                out.row_mut(i).copy_from_slice(&updated);
            }
        }
        Ok(out)
    }
}

fn l2_normalize_rows(m: &Matrix, what: &str) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !n.is_finite() {
            return Err(Error::NonFinite {
                context: format!("norm of {what} {i}"),
                row: i,
                col: 0,
            });
        }
        if n == 0.0 {
            return Err(Error::DegenerateBatch(format!("{what} {i} has norm 0 and cannot be normalised")));
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// Value and raw-query gradient of a batch-averaged contrastive term.
#[derive(Debug, Clone)]
pub struct SelfTerm {
    pub value: f64,
    pub grad_queries: Matrix,
}

/// Batch-mean InfoNCE with online queries against target keys. The
/// positive of query `i` is every key with the same instance id; all
/// other keys in the batch are negatives.
pub fn info_nce_term(
    queries: &Matrix,
    keys: &Matrix,
    labels: &[LabelPair],
    temperature: f64,
    normalize: bool,
) -> Result<SelfTerm> {
    if queries.rows() < 2 {
        return Err(Error::DegenerateBatch("InfoNCE needs at least two samples for negatives".into()));
    }
    let scheme = WeightScheme::info_nce(temperature)?;
    let batch = ContrastiveBatch::new(queries, keys, labels, normalize)?;
    let rows = batch.rows()?;
    let n = rows.len() as f64;
    let mut value = 0.0;
    for row in &rows {
        value += scheme_objective(scheme, row, Level::Instance)?;
    }
    let report = unified_loss(&rows, scheme, Level::Instance)?;
    let scaled: Vec<Vec<f64>> = report
        .grad_sims
        .iter()
        .map(|r| r.iter().map(|g| g / n).collect())
        .collect();
    Ok(SelfTerm {
        value: value / n,
        grad_queries: batch.query_gradient(&scaled)?,
    })
}

/// Value and logit gradient of batch-mean softmax cross-entropy.
#[derive(Debug, Clone)]
pub struct FullTerm {
    pub value: f64,
    pub grad_logits: Matrix,
}

/// Standard softmax cross-entropy over class logits (the denominator runs
/// over every class), averaged over the batch.
pub fn softmax_ce_term(logits: &Matrix, labels: &[LabelPair]) -> Result<FullTerm> {
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "softmax_ce_term",
            format!("{} labels", logits.rows()),
            format!("{}", labels.len()),
        ));
    }
    if logits.rows() == 0 {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    let n = logits.rows() as f64;
    let c = logits.cols();
    let mut grad = Matrix::zeros(logits.rows(), c);
    let mut value = 0.0;
    for (i, label) in labels.iter().enumerate() {
        if label.class_id >= c {
            return Err(Error::Label(format!(
                "class id {} out of range for {c} class outputs",
                label.class_id
            )));
        }
        let z = logits.row(i);
        let lse = log_sum_exp(z);
        value += lse - z[label.class_id];
        let g = grad.row_mut(i);
        for (gj, &zj) in g.iter_mut().zip(z) {
            *gj = libm::exp(zj - lse) / n;
        }
        g[label.class_id] -= 1.0 / n;
    }
    Ok(FullTerm {
        value: value / n,
        grad_logits: grad,
    })
}

/// Per-pair `dJ/ds` of one batch, kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradients {
    pub relations: Vec<Vec<PairRelation>>,
    pub grad_sims: Vec<Vec<f64>>,
}

impl PairGradients {
    /// Largest `|dJ/ds|` over same-class, different-instance pairs, or
    /// `None` when the batch has no such pair.
    pub fn max_abs_conflicting(&self) -> Option<f64> {
        let mut out: Option<f64> = None;
        for (rels, grads) in self.relations.iter().zip(&self.grad_sims) {
            for (r, g) in rels.iter().zip(grads) {
                if r.is_conflicting() {
                    out = Some(out.map_or(g.abs(), |m| m.max(g.abs())));
                }
            }
        }
        out
    }
}

/// Both supervision signals applied to the same query/key similarities.
#[derive(Debug, Clone)]
pub struct NaiveTerm {
    pub self_value: f64,
    pub full_value: f64,
    pub grad_queries: Matrix,
    pub pairs: PairGradients,
}

/// Batch-mean naive combination on one representation: instance-level
/// scheme and class-level scheme on the same similarity rows.
pub fn naive_pair_term(
    queries: &Matrix,
    keys: &Matrix,
    labels: &[LabelPair],
    scheme_self: WeightScheme,
    scheme_full: WeightScheme,
    normalize: bool,
) -> Result<NaiveTerm> {
    if queries.rows() < 2 {
        return Err(Error::DegenerateBatch("pairwise terms need at least two samples".into()));
    }
    let batch = ContrastiveBatch::new(queries, keys, labels, normalize)?;
    let rows = batch.rows()?;
    let n = rows.len() as f64;
    let mut self_value = 0.0;
    let mut full_value = 0.0;
    for row in &rows {
        self_value += scheme_objective(scheme_self, row, Level::Instance)?;
        full_value += scheme_objective(scheme_full, row, Level::Class)?;
    }
    let report = naive_combined_loss(&rows, scheme_self, scheme_full)?;
    let scaled: Vec<Vec<f64>> = report
        .grad_sims
        .iter()
        .map(|r| r.iter().map(|g| g / n).collect())
        .collect();
    Ok(NaiveTerm {
        self_value: self_value / n,
        full_value: full_value / n,
        grad_queries: batch.query_gradient(&scaled)?,
        pairs: PairGradients {
            relations: batch.relations().to_vec(),
            grad_sims: report.grad_sims,
        },
    })
}

/// Settings of the hierarchical objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperaLossConfig {
    pub temperature: f64,
    /// L2-normalise queries and keys before the InfoNCE similarity.
    pub normalize: bool,
    /// Multiplier on the class-level term; 1 gives the plain sum.
    pub full_coef: f64,
}

impl Default for OperaLossConfig {
    fn default() -> Self {
        OperaLossConfig {
            temperature: 0.2,
            normalize: true,
            full_coef: 1.0,
        }
    }
}

/// One online-query/target-key pairing of the instance-level term.
#[derive(Debug, Clone, Copy)]
pub struct QueryKeyPair<'a> {
    pub queries: &'a Matrix,
    pub keys: &'a Matrix,
}

/// Output of [`opera_loss`]. Gradients are with respect to the online
/// queries (one per pairing) and the class logits (one per view).
#[derive(Debug, Clone)]
pub struct OperaLoss {
    pub value: f64,
    pub self_value: f64,
    pub full_value: f64,
    pub grad_queries: Vec<Matrix>,
    pub grad_logits: Vec<Matrix>,
}

/// InfoNCE on the instance-level outputs plus softmax cross-entropy on the
/// class-level outputs. Each term is averaged over the batch and over the
/// supplied pairings/views.
pub fn opera_loss(
    pairs: &[QueryKeyPair<'_>],
    class_logits: &[&Matrix],
    labels: &[LabelPair],
    cfg: &OperaLossConfig,
) -> Result<OperaLoss> {
    if pairs.is_empty() && class_logits.is_empty() {
        return Err(Error::Config("opera_loss needs at least one term".into()));
    }
    if !(cfg.full_coef >= 0.0 && cfg.full_coef.is_finite()) {
        return Err(Error::Domain(format!("full_coef must be nonnegative, got {}", cfg.full_coef)));
    }
    let mut self_value = 0.0;
    let mut grad_queries = Vec::with_capacity(pairs.len());
    let pair_scale = 1.0 / pairs.len().max(1) as f64;
    for p in pairs {
        let term = info_nce_term(p.queries, p.keys, labels, cfg.temperature, cfg.normalize)?;
        self_value += pair_scale * term.value;
        grad_queries.push(term.grad_queries.scale(pair_scale));
    }
    let mut full_value = 0.0;
    let mut grad_logits = Vec::with_capacity(class_logits.len());
    let view_scale = cfg.full_coef / class_logits.len().max(1) as f64;
    for logits in class_logits {
        let term = softmax_ce_term(logits, labels)?;
        full_value += view_scale * term.value;
        grad_logits.push(term.grad_logits.scale(view_scale));
    }
    Ok(OperaLoss {
        value: self_value + full_value,
        self_value,
        full_value,
        grad_queries,
        grad_logits,
    })
}
