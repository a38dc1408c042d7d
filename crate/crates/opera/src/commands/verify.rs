//! Numerical checks of the gradient identities, the linear-hierarchy
//! equivalence and its orderings, and backprop through the full model.

use std::io::Write;

use opera_core::labels::{Level, PairRelation};
use opera_core::model::{Arrangement, HierarchyModel, ModelConfig, Mode};
use opera_core::numerics::finite_diff_grad;
use opera_core::objectives::{naive_combined_loss, unified_loss, OperaLossConfig, SimilarityRow, WeightScheme};
use opera_core::theory::{verify_corollary1, verify_proposition1, ConstantWeights, LinearHierarchy};
use opera_core::training::{online_step, LossSettings, Objective, ViewBatch};
use opera_core::{LabelPair, Matrix, Rng};
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    /// Added to every analytic similarity gradient before comparison; only
    /// for exercising the failure path.
    pub perturb_gradient: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            trials: 100,
            seed: 0,
            perturb_gradient: 0.0,
        }
    }
}

/// One JSON line of `opera verify`.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub check: &'static str,
    pub pass: bool,
    pub trials: usize,
    /// Largest observed relative error, or the number of violations for
    /// counting checks.
    pub worst: f64,
    pub tolerance: f64,
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if num == 0.0 {
        0.0
    } else {
        num / den.max(f64::MIN_POSITIVE)
    }
}

/// Random similarity row with exactly one positive at `level`.
fn random_row(rng: &mut Rng, len: usize, level: Level) -> (SimilarityRow, usize) {
    let pos = rng.below(len);
    let sims: Vec<f64> = (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let positive = match level {
        Level::Instance => PairRelation::SAME_INSTANCE,
        Level::Class => PairRelation::SAME_CLASS,
    };
    let rels = (0..len)
        .map(|j| if j == pos { positive } else { PairRelation::CROSS_CLASS })
        .collect();
    (SimilarityRow::new(0, sims, rels).expect("lengths match"), pos)
}

/// Softmax cross-entropy whose normaliser runs over the negatives only:
/// `-s_p + log sum_{n != p} exp(s_n)`.
fn softmax_check(opts: &VerifyOptions, rng: &mut Rng) -> CliResult<CheckReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..opts.trials {
        let classes = 2 + rng.below(4);
        let (row, pos) = random_row(rng, classes, Level::Class);
        let mut analytic = unified_loss(std::slice::from_ref(&row), WeightScheme::Softmax, Level::Class)?.grad_sims.remove(0);
        analytic.iter_mut().for_each(|g| *g += opts.perturb_gradient);
        let s = row.sims();
        let z: f64 = (0..classes).filter(|&j| j != pos).map(|j| s[j].exp()).sum();
        let direct: Vec<f64> = (0..classes).map(|j| if j == pos { -1.0 } else { s[j].exp() / z }).collect();
        worst = worst.max(rel_err(&analytic, &direct));
    }
    Ok(CheckReport {
        check: "softmax_gradient_identity",
        pass: worst < 1e-12,
        trials: opts.trials,
        worst,
        tolerance: 1e-12,
    })
}

/// `-log(exp(s_p/t) / sum_j exp(s_j/t))` differentiated directly.
fn info_nce_check(opts: &VerifyOptions, rng: &mut Rng) -> CliResult<CheckReport> {
    let mut worst: f64 = 0.0;
    for t in [0.2, 0.5, 1.0] {
        for _ in 0..opts.trials {
            let len = 2 + rng.below(5);
            let (row, pos) = random_row(rng, len, Level::Instance);
            let scheme = WeightScheme::info_nce(t)?;
            let mut analytic = unified_loss(std::slice::from_ref(&row), scheme, Level::Instance)?.grad_sims.remove(0);
            analytic.iter_mut().for_each(|g| *g += opts.perturb_gradient);
            let e: Vec<f64> = row.sims().iter().map(|s| (s / t).exp()).collect();
            let z: f64 = e.iter().sum();
            let direct: Vec<f64> = e
                .iter()
                .enumerate()
                .map(|(j, ej)| (ej / z - if j == pos { 1.0 } else { 0.0 }) / t)
                .collect();
            worst = worst.max(rel_err(&analytic, &direct));
        }
    }
    Ok(CheckReport {
        check: "infonce_gradient_identity",
        pass: worst < 1e-12,
        trials: 3 * opts.trials,
        worst,
        tolerance: 1e-12,
    })
}

fn proposition1_check(opts: &VerifyOptions, rng: &mut Rng) -> CheckReport {
    let mut worst: f64 = 0.0;
    for _ in 0..opts.trials {
        let h = LinearHierarchy::random(rng, 8);
        worst = worst.max(verify_proposition1(&h, rng, 10).max_rel_discrepancy);
    }
    CheckReport {
        check: "proposition1_equivalence",
        pass: worst < 1e-8,
        trials: opts.trials,
        worst,
        tolerance: 1e-8,
    }
}

fn corollary1_check(opts: &VerifyOptions, rng: &mut Rng) -> CheckReport {
    let trials = 10 * opts.trials;
    let mut violations = 0usize;
    for _ in 0..trials {
        let h = LinearHierarchy::random(rng, 8);
        let w = ConstantWeights::random(rng);
        if verify_corollary1(&h, &w, rng, 1).is_err() {
            violations += 1;
        }
    }
    CheckReport {
        check: "corollary1_ordering",
        pass: violations == 0,
        trials,
        worst: violations as f64,
        tolerance: 0.0,
    }
}

/// Matched constant weights cancel exactly on same-class, different-instance
/// pairs of the naive sum.
fn neutralization_check(opts: &VerifyOptions, rng: &mut Rng) -> CliResult<CheckReport> {
    let mut worst: f64 = 0.0;
    let mut seen = 0usize;
    for _ in 0..opts.trials {
        let w = rng.uniform(0.1, 3.0);
        let scheme = WeightScheme::constant(w, w)?;
        let len = 3 + rng.below(5);
        let rels: Vec<PairRelation> = (0..len)
            .map(|j| match (j, rng.below(2)) {
                (0, _) => PairRelation::SAME_INSTANCE,
                (_, 0) => PairRelation::SAME_CLASS,
                _ => PairRelation::CROSS_CLASS,
            })
            .collect();
        let sims = (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let row = SimilarityRow::new(0, sims, rels.clone())?;
        let g = naive_combined_loss(&[row], scheme, scheme)?.grad_sims.remove(0);
        for (r, gv) in rels.iter().zip(&g) {
            if r.is_conflicting() {
                seen += 1;
                worst = worst.max(gv.abs());
            }
        }
    }
    Ok(CheckReport {
        check: "naive_neutralization",
        pass: worst == 0.0 && seen > 0,
        trials: seen,
        worst,
        tolerance: 0.0,
    })
}

fn tiny_model(rng: &mut Rng) -> HierarchyModel {
    let cfg = ModelConfig {
        input_dim: 4,
        backbone_widths: vec![6],
        projector_hidden: 6,
        embed_dim: 3,
        predictor_hidden: 5,
        class_hidden: 5,
        num_classes: 3,
        arrangement: Arrangement::C,
        bn_eps: 1e-5,
    };
    HierarchyModel::new(&cfg, rng).expect("fixed valid widths")
}

/// Backprop of the hierarchical objective through the whole online
/// network against central differences, at points away from ReLU kinks.
fn model_gradient_check(opts: &VerifyOptions, rng: &mut Rng) -> CliResult<CheckReport> {
    let seeds = opts.trials.clamp(1, 5);
    let labels: Vec<LabelPair> = (0..6).map(|i| LabelPair::new(i, i % 3)).collect();
    let settings = LossSettings {
        objective: Objective::Opera,
        opera: OperaLossConfig::default(),
        symmetrize: true,
        full_both_views: true,
        naive_self: WeightScheme::Softmax,
        naive_full: WeightScheme::Softmax,
    };
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < seeds {
        let model = tiny_model(rng);
        let v1 = rng.gaussian_matrix(6, 4, 1.0);
        let v2 = rng.gaussian_matrix(6, 4, 1.0);
        let k1 = rng.gaussian_matrix(6, 3, 1.0);
        let k2 = rng.gaussian_matrix(6, 3, 1.0);
        let batch = ViewBatch {
            first: &v1,
            second: &v2,
            first_keys: Some(&k1),
            second_keys: Some(&k2),
            labels: &labels,
        };
        let mut probe = model.clone();
        let (_, c1) = probe.forward(&v1, Mode::Train)?;
        let (_, c2) = probe.forward(&v2, Mode::Train)?;
        if model.min_kink_distance(&c1).min(model.min_kink_distance(&c2)) < 1e-3 {
            continue;
        }
        let (_, grads) = online_step(&mut model.clone(), batch, &settings)?;
        let grads = grads.into_tensors();
        let total: f64 = grads.iter().map(|g| g.frobenius_norm().powi(2)).sum::<f64>().sqrt();
        for (idx, g) in grads.iter().enumerate() {
            let base = model.named_params()[idx].1.clone();
            let fd = finite_diff_grad(
                |t: &Matrix| {
                    let mut m = model.clone();
                    *m.params_mut()[idx] = t.clone();
                    online_step(&mut m, batch, &settings).map_or(f64::NAN, |(l, _)| l.total)
                },
                &base,
                1e-5,
            )?;
            let diff = g.sub(&fd)?.frobenius_norm();
            let scale = g.frobenius_norm().max(fd.frobenius_norm()).max(1e-3 * total);
            worst = worst.max(diff / scale);
        }
        done += 1;
    }
    Ok(CheckReport {
        check: "model_gradient",
        pass: worst < 1e-4,
        trials: seeds,
        worst,
        tolerance: 1e-4,
    })
}

pub fn run_checks(opts: &VerifyOptions) -> CliResult<Vec<CheckReport>> {
    if opts.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let mut rng = Rng::new(opts.seed);
    Ok(vec![
        softmax_check(opts, &mut rng)?,
        info_nce_check(opts, &mut rng)?,
        proposition1_check(opts, &mut rng),
        corollary1_check(opts, &mut rng),
        neutralization_check(opts, &mut rng)?,
        model_gradient_check(opts, &mut rng)?,
    ])
}

/// Prints one JSON line per check and fails when any check fails.
pub fn cmd_verify<W: Write>(opts: &VerifyOptions, mut out: W) -> CliResult<()> {
    let reports = run_checks(opts)?;
    for r in &reports {
        let line = serde_json::to_string(r).expect("plain struct serializes");
        writeln!(out, "{line}").map_err(|e| CliError::io("<stdout>", e))?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.check).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
