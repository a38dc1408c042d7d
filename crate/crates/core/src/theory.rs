//! Executable checks of the linear-hierarchy equivalence.
//!
//! With linear maps `g(y) = W_g y` and `h(y) = W_h y`, a pair objective
//! applied on the instance space (`W_g y`) and the class space
//! (`W_h W_g y`) moves `s(y, p)` in the original space exactly as a single
//! pair objective whose coefficient depends on the relation of the pair:
//!
//! | relation                        | coefficient                          |
//! |---------------------------------|--------------------------------------|
//! | same instance                   | `-w_p^self * alpha - w_p^full * beta` |
//! | same class, different instance  | ` w_n^self * alpha - w_p^full * beta` |
//! | different class                 | ` w_n^self * alpha + w_n^full * beta` |
//!
//! with `alpha = |W_g p|^2` and `beta = |W_h W_g p|^2`. The checks below
//! compute `(dJ/dy)^T p` by backpropagating through both maps and compare
//! it with the closed-form coefficient.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::labels::PairRelation;
use crate::numerics::{dot, squared_norm, Matrix, Rng};
use crate::objectives::adaptive_weight;

/// The pair of linear maps `W_g` (instance space) and `W_h` (class space).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHierarchy {
    instance_map: Matrix,
    class_map: Matrix,
}

impl LinearHierarchy {
    pub fn new(instance_map: Matrix, class_map: Matrix) -> Result<Self> {
        if class_map.cols() != instance_map.rows() {
            return Err(Error::shape(
                "LinearHierarchy::new",
                format!("class map with {} columns", instance_map.rows()),
                format!("{}x{}", class_map.rows(), class_map.cols()),
            ));
        }
        Ok(LinearHierarchy {
            instance_map,
            class_map,
        })
    }

    /// Gaussian maps with every dimension drawn from `1..=max_dim`.
    pub fn random(rng: &mut Rng, max_dim: usize) -> Self {
        let d = 1 + rng.below(max_dim);
        let e = 1 + rng.below(max_dim);
        let c = 1 + rng.below(max_dim);
        LinearHierarchy {
            instance_map: rng.gaussian_matrix(e, d, 1.0),
            class_map: rng.gaussian_matrix(c, e, 1.0),
        }
    }

    pub fn instance_map(&self) -> &Matrix {
        &self.instance_map
    }

    pub fn class_map(&self) -> &Matrix {
        &self.class_map
    }

    /// Width of the representation space the maps act on.
    pub fn input_dim(&self) -> usize {
        self.instance_map.cols()
    }

    /// `W_g` scaled by `k`.
    pub fn with_scaled_instance_map(&self, k: f64) -> Self {
        LinearHierarchy {
            instance_map: self.instance_map.scale(k),
            class_map: self.class_map.clone(),
        }
    }
}

/// `(|W_g p|^2, |W_h W_g p|^2)`.
pub fn alpha_beta(hier: &LinearHierarchy, p: &[f64]) -> Result<(f64, f64)> {
    let p_self = hier.instance_map.apply(p)?;
    let p_full = hier.class_map.apply(&p_self)?;
    Ok((squared_norm(&p_self), squared_norm(&p_full)))
}

/// Constant pair coefficients for both supervision levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantWeights {
    pub self_positive: f64,
    pub self_negative: f64,
    pub full_positive: f64,
    pub full_negative: f64,
}

impl ConstantWeights {
    pub fn new(self_positive: f64, self_negative: f64, full_positive: f64, full_negative: f64) -> Result<Self> {
        let w = ConstantWeights {
            self_positive,
            self_negative,
            full_positive,
            full_negative,
        };
        if w.as_array().iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(w)
        } else {
            Err(Error::Domain(format!("pair weights must be finite and nonnegative: {w:?}")))
        }
    }

    pub fn random(rng: &mut Rng) -> Self {
        ConstantWeights {
            self_positive: rng.next_f64(),
            self_negative: rng.next_f64(),
            full_positive: rng.next_f64(),
            full_negative: rng.next_f64(),
        }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.self_positive, self.self_negative, self.full_positive, self.full_negative]
    }

    /// Signed coefficients `(c_self, c_full)` of `s` in each space for a
    /// pair with the given relation.
    fn level_coefficients(&self, relation: PairRelation) -> (f64, f64) {
        let c_self = if relation.same_instance() {
            -self.self_positive
        } else {
            self.self_negative
        };
        let c_full = if relation.same_class() {
            -self.full_positive
        } else {
            self.full_negative
        };
        (c_self, c_full)
    }
}

/// The three relation-dependent coefficients of the equivalent objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalentWeights {
    pub same_instance: f64,
    pub same_class: f64,
    pub cross_class: f64,
}

impl EquivalentWeights {
    pub fn get(&self, relation: PairRelation) -> f64 {
        match (relation.same_instance(), relation.same_class()) {
            (true, _) => self.same_instance,
            (false, true) => self.same_class,
            (false, false) => self.cross_class,
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.same_instance <= self.same_class && self.same_class <= self.cross_class
    }
}

/// Closed-form coefficients from `alpha` and `beta`. `alpha` multiplies the
/// instance-level weights and `beta` the class-level weights.
pub fn equivalent_weights(w: &ConstantWeights, alpha: f64, beta: f64) -> EquivalentWeights {
    EquivalentWeights {
        same_instance: -w.self_positive * alpha - w.full_positive * beta,
        same_class: w.self_negative * alpha - w.full_positive * beta,
        cross_class: w.self_negative * alpha + w.full_negative * beta,
    }
}

/// `dJ/dy` of the two-level pair objective with fixed `p`, obtained by
/// backpropagating `s(W_g y, W_g p)` and `s(W_h W_g y, W_h W_g p)`.
pub fn hierarchical_gradient(
    hier: &LinearHierarchy,
    y: &[f64],
    p: &[f64],
    relation: PairRelation,
    weights: &ConstantWeights,
) -> Result<Vec<f64>> {
    if y.len() != p.len() {
        return Err(Error::shape("hierarchical_gradient", format!("length {}", p.len()), format!("{}", y.len())));
    }
    // forward pass only validates y's shape; the gradient does not depend on y
    hier.instance_map.apply(y)?;
    let (c_self, c_full) = weights.level_coefficients(relation);
    let p_self = hier.instance_map.apply(p)?;
    let p_full = hier.class_map.apply(&p_self)?;
    let d_full: Vec<f64> = p_full.iter().map(|v| c_full * v).collect();
    let mut d_self = hier.class_map.apply_transposed(&d_full)?;
    for (d, v) in d_self.iter_mut().zip(&p_self) {
        *d += c_self * v;
    }
    hier.instance_map.apply_transposed(&d_self)
}

/// Value of the two-level pair objective at `y`.
pub fn hierarchical_objective(
    hier: &LinearHierarchy,
    y: &[f64],
    p: &[f64],
    relation: PairRelation,
    weights: &ConstantWeights,
) -> Result<f64> {
    let (c_self, c_full) = weights.level_coefficients(relation);
    let y_self = hier.instance_map.apply(y)?;
    let p_self = hier.instance_map.apply(p)?;
    let y_full = hier.class_map.apply(&y_self)?;
    let p_full = hier.class_map.apply(&p_self)?;
    Ok(c_self * dot(&y_self, &p_self)? + c_full * dot(&y_full, &p_full)?)
}

/// Outcome of [`verify_proposition1`].
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub max_rel_discrepancy: f64,
    pub trials: usize,
    /// Coefficients of the trial with the largest discrepancy.
    pub coefficients: EquivalentWeights,
}

/// `|a - b|` relative to `scale`; zero when both sides vanish.
fn relative_gap(a: f64, b: f64, scale: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / scale.max(a.abs()).max(b.abs())
    }
}

/// Compares `(dJ/dy)^T p` from backprop against the closed-form coefficient
/// for random `y`, `p` and weights, over all three relations.
///
/// The discrepancy of each comparison is relative to the sum of the
/// magnitudes of the two terms that make up the coefficient, which is the
/// natural scale when they nearly cancel.
pub fn verify_proposition1(hier: &LinearHierarchy, rng: &mut Rng, trials: usize) -> EquivalenceReport {
    let d = hier.input_dim();
    let mut worst = -1.0;
    let mut coefficients = equivalent_weights(&ConstantWeights::random(&mut Rng::new(0)), 0.0, 0.0);
    for _ in 0..trials {
        let y: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let p: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let w = ConstantWeights::random(rng);
        let (alpha, beta) = alpha_beta(hier, &p).expect("shapes fixed by the hierarchy");
        let closed = equivalent_weights(&w, alpha, beta);
        let mut trial_worst: f64 = 0.0;
        for rel in [PairRelation::SAME_INSTANCE, PairRelation::SAME_CLASS, PairRelation::CROSS_CLASS] {
            let g = hierarchical_gradient(hier, &y, &p, rel, &w).expect("shapes fixed by the hierarchy");
            let through_maps = dot(&g, &p).expect("equal lengths");
            let (c_self, c_full) = w.level_coefficients(rel);
            let scale = c_self.abs() * alpha + c_full.abs() * beta;
            trial_worst = trial_worst.max(relative_gap(through_maps, closed.get(rel), scale));
        }
        if trial_worst > worst {
            worst = trial_worst;
            coefficients = closed;
        }
    }
    EquivalenceReport {
        max_rel_discrepancy: worst.max(0.0),
        trials,
        coefficients,
    }
}

/// A draw on which the coefficient ordering failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub trial: usize,
    pub alpha: f64,
    pub beta: f64,
    pub coefficients: EquivalentWeights,
}

/// Checks `w(same instance) <= w(same class) <= w(different class)` for
/// random prototypes `p`.
pub fn verify_corollary1(
    hier: &LinearHierarchy,
    weights: &ConstantWeights,
    rng: &mut Rng,
    trials: usize,
) -> core::result::Result<(), Counterexample> {
    let d = hier.input_dim();
    for trial in 0..trials {
        let p: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let (alpha, beta) = alpha_beta(hier, &p).expect("shapes fixed by the hierarchy");
        let coefficients = equivalent_weights(weights, alpha, beta);
        if !coefficients.is_ordered() {
            return Err(Counterexample {
                trial,
                alpha,
                beta,
                coefficients,
            });
        }
    }
    Ok(())
}

/// Effective weight on a same-class, different-instance pair:
/// `w_n^self * alpha - w_p^full * beta`. A negative value means the
/// similarity of the pair increases under gradient descent.
pub fn verify_corollary2(hier: &LinearHierarchy, w_n_self: f64, w_p_full: f64, p: &[f64]) -> Result<f64> {
    let (alpha, beta) = alpha_beta(hier, p)?;
    adaptive_weight(w_n_self, alpha, w_p_full, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn identity_hier(n: usize) -> LinearHierarchy {
        LinearHierarchy::new(Matrix::identity(n), Matrix::identity(n)).unwrap()
    }

    #[test]
    fn alpha_beta_examples() {
        assert_eq!(alpha_beta(&identity_hier(2), &[0.0, 1.0]).unwrap(), (1.0, 1.0));
        let h = LinearHierarchy::new(Matrix::identity(2).scale(2.0), Matrix::identity(2)).unwrap();
        assert_eq!(alpha_beta(&h, &[1.0, 0.0]).unwrap(), (4.0, 4.0));
        assert!(alpha_beta(&h, &[1.0]).is_err());
        assert!(LinearHierarchy::new(Matrix::zeros(3, 2), Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn zero_instance_map_annihilates() {
        let h = LinearHierarchy::new(Matrix::zeros(3, 4), Matrix::identity(3)).unwrap();
        let w = ConstantWeights::new(0.3, 0.6, 0.2, 0.9).unwrap();
        let p = [1.0, -2.0, 0.5, 3.0];
        for rel in [PairRelation::SAME_INSTANCE, PairRelation::SAME_CLASS, PairRelation::CROSS_CLASS] {
            let g = hierarchical_gradient(&h, &p, &p, rel, &w).unwrap();
            assert!(g.iter().all(|&v| v == 0.0));
        }
        let rep = verify_proposition1(&h, &mut Rng::new(1), 10);
        assert_eq!(rep.max_rel_discrepancy, 0.0);
    }

    #[test]
    fn same_instance_coefficient() {
        let mut rng = Rng::new(4);
        let h = LinearHierarchy::random(&mut rng, 6);
        let w = ConstantWeights::new(1.0, 0.0, 1.0, 0.0).unwrap();
        let p: Vec<f64> = (0..h.input_dim()).map(|_| rng.gaussian()).collect();
        let (a, b) = alpha_beta(&h, &p).unwrap();
        let g = hierarchical_gradient(&h, &p, &p, PairRelation::SAME_INSTANCE, &w).unwrap();
        let got = dot(&g, &p).unwrap();
        let want = -(a + b);
        assert!((got - want).abs() <= 1e-12 * want.abs());
    }

    #[test]
    fn corollary1_worked_example() {
        let w = ConstantWeights::new(0.5, 0.5, 0.3, 0.7).unwrap();
        let c = equivalent_weights(&w, 1.0, 1.0);
        assert!((c.same_instance + 0.8).abs() < 1e-15);
        assert!((c.same_class - 0.2).abs() < 1e-15);
        assert!((c.cross_class - 1.2).abs() < 1e-15);
        assert!(c.is_ordered());
        let z = equivalent_weights(&w, 0.0, 0.0);
        assert!(z.is_ordered());
        assert_eq!((z.same_instance, z.same_class, z.cross_class), (0.0, 0.0, 0.0));
    }

    #[test]
    fn corollary2_examples() {
        let p = [1.0, 0.0];
        assert_eq!(verify_corollary2(&identity_hier(2), 0.5, 0.5, &p).unwrap(), 0.0);
        let h = LinearHierarchy::new(Matrix::identity(2), Matrix::identity(2).scale(2.0)).unwrap();
        assert!((verify_corollary2(&h, 0.5, 0.3, &p).unwrap() + 0.7).abs() < 1e-15);
        let h = LinearHierarchy::new(Matrix::identity(2), Matrix::zeros(2, 2)).unwrap();
        assert_eq!(verify_corollary2(&h, 0.5, 0.3, &p).unwrap(), 0.5);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let h = LinearHierarchy::random(&mut rng, 5);
        let w = ConstantWeights::random(&mut rng);
        let d = h.input_dim();
        let y = rng.gaussian_matrix(1, d, 1.0);
        let p: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        for rel in [PairRelation::SAME_INSTANCE, PairRelation::SAME_CLASS, PairRelation::CROSS_CLASS] {
            let g = hierarchical_gradient(&h, y.as_slice(), &p, rel, &w).unwrap();
            let fd = crate::numerics::finite_diff_grad(
                |m| hierarchical_objective(&h, m.as_slice(), &p, rel, &w).unwrap(),
                &y,
                1e-5,
            )
            .unwrap();
            for (a, b) in g.iter().zip(fd.as_slice()) {
                assert!((a - b).abs() <= 1e-7 * (1.0 + a.abs()));
            }
        }
    }

    proptest! {
        #[test]
        fn alpha_beta_nonnegative_and_homogeneous(seed in any::<u64>(), c in -3.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let h = LinearHierarchy::random(&mut rng, 8);
            let p: Vec<f64> = (0..h.input_dim()).map(|_| rng.gaussian()).collect();
            let (a, b) = alpha_beta(&h, &p).unwrap();
            prop_assert!(a >= 0.0 && b >= 0.0);
            let (a2, b2) = alpha_beta(&h.with_scaled_instance_map(c), &p).unwrap();
            prop_assert!((a2 - c * c * a).abs() <= 1e-12 * (1.0 + a2.abs()));
            prop_assert!((b2 - c * c * b).abs() <= 1e-12 * (1.0 + b2.abs()));
        }

        #[test]
        fn corollary1_holds_for_nonnegative_weights(
            seed in any::<u64>(),
            w in prop::array::uniform4(0.0f64..10.0),
        ) {
            let mut rng = Rng::new(seed);
            let h = LinearHierarchy::random(&mut rng, 8);
            let w = ConstantWeights::new(w[0], w[1], w[2], w[3]).unwrap();
            prop_assert!(verify_corollary1(&h, &w, &mut rng, 5).is_ok());
        }
    }
}
