//! SGD with momentum, the learning-rate schedule and the pretraining loop
//! for the four objective modes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{two_views_batch, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::labels::LabelPair;
use crate::model::{Arrangement, HierarchyModel, ModelConfig, ModelGrads, Mode, OnlineTargetPair, Upstream};
use crate::numerics::{Matrix, Rng};
use crate::objectives::{naive_pair_term, opera_loss, OperaLossConfig, PairGradients, QueryKeyPair, WeightScheme};

/// SGD hyperparameters and per-tensor velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("SGD momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(OptimizerState {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Matrix] {
        &self.velocity
    }
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
///
/// Velocities are created as zeros on the first call. Every gradient is
/// checked before any parameter moves; a non-finite entry is reported under
/// the tensor's name (or its index when `names` is empty).
pub fn sgd_step(state: &mut OptimizerState, params: Vec<&mut Matrix>, grads: &[Matrix], names: &[String]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} gradient tensors", params.len()),
            format!("{}", grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
        if let Some((row, col)) = g.first_non_finite() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("tensor {i}"));
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
                row,
                col,
            });
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    } else if state.velocity.len() != params.len()
        || state.velocity.iter().zip(&params).any(|(v, p)| v.shape() != p.shape())
    {
        return Err(Error::State("optimizer velocity does not match the parameter list".into()));
    }
    for ((p, g), v) in params.into_iter().zip(grads).zip(&mut state.velocity) {
        for ((pv, &gv), vv) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(v.as_mut_slice()) {
            *vv = state.momentum * *vv + gv + state.weight_decay * *pv;
            *pv -= state.lr * *vv;
        }
    }
    Ok(())
}

/// `base_lr * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total: usize) -> Result<f64> {
    if total == 0 || epoch > total {
        return Err(Error::Domain(format!("cosine_lr needs 0 <= epoch <= total, total >= 1; got {epoch}/{total}")));
    }
    Ok(base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * epoch as f64 / total as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

/// Which supervision the loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    /// Class labels only, softmax cross-entropy on the class head.
    Fsl,
    /// Instance discrimination only, InfoNCE on the predictor output.
    Ssl,
    /// Both signals on the same similarities of the predictor output.
    Naive,
    /// InfoNCE on the predictor output plus cross-entropy on the class head.
    Opera,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Fsl => "fsl",
            Objective::Ssl => "ssl",
            Objective::Naive => "naive",
            Objective::Opera => "opera",
        }
    }

    fn uses_keys(&self) -> bool {
        !matches!(self, Objective::Fsl)
    }

    fn uses_class_head(&self) -> bool {
        matches!(self, Objective::Fsl | Objective::Opera)
    }
}

impl core::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fsl" => Ok(Objective::Fsl),
            "ssl" => Ok(Objective::Ssl),
            "naive" => Ok(Objective::Naive),
            "opera" => Ok(Objective::Opera),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Weight family for one side of the naive combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    Softmax,
    InfoNce,
    Constant,
}

impl core::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "softmax" => Ok(SchemeKind::Softmax),
            "infonce" => Ok(SchemeKind::InfoNce),
            "constant" => Ok(SchemeKind::Constant),
            other => Err(Error::Config(format!("unknown weight scheme `{other}`"))),
        }
    }
}

impl SchemeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeKind::Softmax => "softmax",
            SchemeKind::InfoNce => "infonce",
            SchemeKind::Constant => "constant",
        }
    }
}

/// Blob benchmark parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            num_classes: 8,
            per_class: 100,
            dim: 32,
            spread: 0.1,
        }
    }
}

/// Everything a pretraining run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Objective,
    pub arrangement: Arrangement,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    /// Target-network momentum.
    pub target_momentum: f64,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub data: BlobConfig,
    pub augment: AugmentConfig,
    /// L2-normalise embeddings before similarities.
    pub normalize: bool,
    /// Also contrast the second view's queries with the first view's keys.
    pub symmetrize: bool,
    /// Apply the class-level loss to both views rather than the first only.
    pub full_both_views: bool,
    /// Multiplier on the class-level term in `opera` mode.
    pub full_coef: f64,
    pub naive_self: SchemeKind,
    pub naive_full: SchemeKind,
    /// Positive and negative weights of `constant` naive schemes.
    pub naive_wp: f64,
    pub naive_wn: f64,
    pub backbone_widths: Vec<usize>,
    pub projector_hidden: usize,
    pub embed_dim: usize,
    pub predictor_hidden: usize,
    /// `None` picks `max(4 * classes, 32)`.
    pub class_hidden: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Objective::Opera,
            arrangement: Arrangement::C,
            epochs: 200,
            batch_size: 64,
            temperature: 0.2,
            target_momentum: 0.99,
            lr: 0.05,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Schedule::Cosine,
            seed: 0,
            data: BlobConfig::default(),
            augment: AugmentConfig::default(),
            normalize: true,
            symmetrize: false,
            full_both_views: true,
            full_coef: 1.0,
            naive_self: SchemeKind::InfoNce,
            naive_full: SchemeKind::InfoNce,
            naive_wp: 1.0,
            naive_wn: 1.0,
            backbone_widths: vec![64, 64],
            projector_hidden: 64,
            embed_dim: 32,
            predictor_hidden: 64,
            class_hidden: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.target_momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1], got {}", self.target_momentum)));
        }
        if !(self.full_coef >= 0.0 && self.full_coef.is_finite()) {
            return Err(Error::Config(format!("full_coef must be >= 0, got {}", self.full_coef)));
        }
        OptimizerState::new(self.lr, self.sgd_momentum, self.weight_decay)?;
        self.augment.validate()?;
        self.scheme(self.naive_self)?;
        self.scheme(self.naive_full)?;
        Ok(())
    }

    pub fn scheme(&self, kind: SchemeKind) -> Result<WeightScheme> {
        match kind {
            SchemeKind::Softmax => Ok(WeightScheme::Softmax),
            SchemeKind::InfoNce => WeightScheme::info_nce(self.temperature),
            SchemeKind::Constant => WeightScheme::constant(self.naive_wp, self.naive_wn),
        }
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        let mut cfg = ModelConfig::desk(input_dim, num_classes, self.arrangement);
        cfg.backbone_widths = self.backbone_widths.clone();
        cfg.projector_hidden = self.projector_hidden;
        cfg.embed_dim = self.embed_dim;
        cfg.predictor_hidden = self.predictor_hidden;
        if let Some(h) = self.class_hidden {
            cfg.class_hidden = h;
        }
        cfg
    }

    pub fn loss_settings(&self) -> Result<LossSettings> {
        Ok(LossSettings {
            objective: self.mode,
            opera: OperaLossConfig {
                temperature: self.temperature,
                normalize: self.normalize,
                full_coef: self.full_coef,
            },
            symmetrize: self.symmetrize,
            full_both_views: self.full_both_views,
            naive_self: self.scheme(self.naive_self)?,
            naive_full: self.scheme(self.naive_full)?,
        })
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        match self.schedule {
            Schedule::Constant => Ok(self.lr),
            Schedule::Cosine => cosine_lr(self.lr, epoch, self.epochs),
        }
    }
}

/// Per-batch objective wiring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub objective: Objective,
    pub opera: OperaLossConfig,
    pub symmetrize: bool,
    pub full_both_views: bool,
    pub naive_self: WeightScheme,
    pub naive_full: WeightScheme,
}

impl LossSettings {
    /// Whether the second view goes through the online network.
    pub fn needs_second_query(&self) -> bool {
        self.symmetrize || (self.full_both_views && self.objective.uses_class_head())
    }

    /// Target keys required, as (first view, second view).
    pub fn needs_keys(&self) -> (bool, bool) {
        let k = self.objective.uses_keys();
        (k && self.symmetrize, k)
    }
}

/// Loss values of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub self_value: f64,
    pub full_value: f64,
    /// Per-pair similarity gradients of the first pairing (naive mode only).
    pub pairs: Option<PairGradients>,
}

/// Batch of two views with optional target keys.
#[derive(Debug, Clone, Copy)]
pub struct ViewBatch<'a> {
    pub first: &'a Matrix,
    pub second: &'a Matrix,
    pub first_keys: Option<&'a Matrix>,
    pub second_keys: Option<&'a Matrix>,
    pub labels: &'a [LabelPair],
}

/// Forward the online network in training mode, evaluate the objective and
/// backpropagate it to every online parameter.
pub fn online_step(online: &mut HierarchyModel, batch: ViewBatch<'_>, settings: &LossSettings) -> Result<(StepLoss, ModelGrads)> {
    let (o1, c1) = online.forward(batch.first, Mode::Train)?;
    let second = if settings.needs_second_query() {
        Some(online.forward(batch.second, Mode::Train)?)
    } else {
        None
    };
    let (need_k1, need_k2) = settings.needs_keys();
    let missing = |what: &str| Error::State(format!("{what} keys required by this objective"));
    let k2 = if need_k2 { Some(batch.second_keys.ok_or_else(|| missing("second-view"))?) } else { None };
    let k1 = if need_k1 { Some(batch.first_keys.ok_or_else(|| missing("first-view"))?) } else { None };

    let mut up_self: [Option<Matrix>; 2] = [None, None];
    let mut up_full: [Option<Matrix>; 2] = [None, None];
    let loss = match settings.objective {
        Objective::Naive => {
            let k2 = k2.ok_or_else(|| missing("second-view"))?;
            let first = naive_pair_term(&o1.y_self, k2, batch.labels, settings.naive_self, settings.naive_full, settings.opera.normalize)?;
            let mut self_value = first.self_value;
            let mut full_value = first.full_value;
            let mut g1 = first.grad_queries;
            if let (Some((o2, _)), Some(k1)) = (&second, k1) {
                let t = naive_pair_term(&o2.y_self, k1, batch.labels, settings.naive_self, settings.naive_full, settings.opera.normalize)?;
                self_value = 0.5 * (self_value + t.self_value);
                full_value = 0.5 * (full_value + t.full_value);
                g1 = g1.scale(0.5);
                up_self[1] = Some(t.grad_queries.scale(0.5));
            }
            up_self[0] = Some(g1);
            StepLoss {
                total: self_value + full_value,
                self_value,
                full_value,
                pairs: Some(first.pairs),
            }
        }
        objective => {
            let mut pairs = Vec::new();
            if let Some(k2) = k2 {
                pairs.push(QueryKeyPair { queries: &o1.y_self, keys: k2 });
            }
            if let (Some((o2, _)), Some(k1)) = (&second, k1) {
                pairs.push(QueryKeyPair { queries: &o2.y_self, keys: k1 });
            }
            let mut logits: Vec<&Matrix> = Vec::new();
            if objective.uses_class_head() {
                logits.push(&o1.y_full);
                if settings.full_both_views {
                    if let Some((o2, _)) = &second {
                        logits.push(&o2.y_full);
                    }
                }
            }
            let out = opera_loss(&pairs, &logits, batch.labels, &settings.opera)?;
            let mut gq = out.grad_queries.into_iter();
            if k2.is_some() {
                up_self[0] = gq.next();
            }
            up_self[1] = gq.next();
            let mut gl = out.grad_logits.into_iter();
            up_full[0] = gl.next();
            up_full[1] = gl.next();
            StepLoss {
                total: out.value,
                self_value: out.self_value,
                full_value: out.full_value,
                pairs: None,
            }
        }
    };

    let mut grads = online.backward(
        &c1,
        Upstream {
            y_self: up_self[0].as_ref(),
            y_full: up_full[0].as_ref(),
        },
    )?;
    if let Some((_, c2)) = &second {
        if up_self[1].is_some() || up_full[1].is_some() {
            let g2 = online.backward(
                c2,
                Upstream {
                    y_self: up_self[1].as_ref(),
                    y_full: up_full[1].as_ref(),
                },
            )?;
            grads = grads.combine(g2)?;
        }
    }
    Ok((loss, grads))
}

/// Averages over the batches of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_self: f64,
    pub loss_full: f64,
    pub lr: f64,
}

/// What an observer sees after each batch's loss is computed.
#[derive(Debug, Clone, Copy)]
pub struct BatchReport<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub loss: &'a StepLoss,
}

/// Hooks into the training loop. All methods default to no-ops.
pub trait Observer {
    /// Before the first step.
    fn on_start(&mut self, _pair: &OnlineTargetPair) {}
    fn on_batch(&mut self, _report: &BatchReport<'_>) {}
    /// After the optimizer step and the momentum update.
    fn on_step_end(&mut self, _pair: &OnlineTargetPair) {}
    fn on_epoch(&mut self, _metrics: &EpochMetrics) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl Observer for NoObserver {}

/// Trained networks with one metrics entry per epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pair: OnlineTargetPair,
    pub history: Vec<EpochMetrics>,
}

/// Random stream ids derived from the run seed.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = 1;
    pub const LOOP: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const ORDERING: u64 = 4;
    pub const PROBE: u64 = 5;
}

pub fn pretrain(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    pretrain_observed(cfg, data, &mut NoObserver)
}

/// Runs `cfg.epochs` epochs of shuffled minibatches. Each step draws two
/// views per sample, forwards both networks, backpropagates the selected
/// objective into the online network, takes an SGD step and then moves the
/// target towards the online weights. Trailing batches smaller than two
/// samples are skipped.
pub fn pretrain_observed(cfg: &RunConfig, data: &Dataset, observer: &mut dyn Observer) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::DegenerateBatch(format!("need at least 2 samples, got {}", data.len())));
    }
    let settings = cfg.loss_settings()?;
    let mut init = Rng::derive(cfg.seed, streams::INIT);
    let online = HierarchyModel::new(&cfg.model_config(data.dim(), data.num_classes()), &mut init)?;
    let mut pair = OnlineTargetPair::new(online, cfg.target_momentum)?;
    let names: Vec<String> = pair.online.named_params().into_iter().map(|(n, _)| n).collect();
    let mut opt = OptimizerState::new(cfg.lr, cfg.sgd_momentum, cfg.weight_decay)?;
    let mut rng = Rng::derive(cfg.seed, streams::LOOP);
    let mut history = Vec::with_capacity(cfg.epochs);
    observer.on_start(&pair);

    let (need_k1, need_k2) = settings.needs_keys();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch)?;
        opt.lr = lr;
        let order = rng.permutation(data.len());
        let (mut sum_self, mut sum_full, mut batches) = (0.0, 0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let x = data.features().select_rows(idx);
            let labels: Vec<LabelPair> = idx.iter().map(|&i| data.labels()[i]).collect();
            let (v1, v2) = two_views_batch(&x, &cfg.augment, &mut rng)?;
            let diverged = |reason: String| Error::Divergence {
                epoch: epoch + 1,
                last_good_epoch: if epoch == 0 { None } else { Some(epoch) },
                reason,
            };
            // non-finite activations of finite parameters mean the run blew up
            let blown = |e: Error| match e {
                Error::NonFinite { context, .. } => diverged(format!("{context} in batch {b}")),
                other => other,
            };
            let k1 = if need_k1 { Some(pair.target.forward(&v1, Mode::Train)?) } else { None };
            let k2 = if need_k2 { Some(pair.target.forward(&v2, Mode::Train)?) } else { None };
            let batch = ViewBatch {
                first: &v1,
                second: &v2,
                first_keys: k1.as_ref(),
                second_keys: k2.as_ref(),
                labels: &labels,
            };
            let (loss, grads) = online_step(&mut pair.online, batch, &settings).map_err(blown)?;
            if !loss.total.is_finite() {
                return Err(diverged(format!("non-finite loss in batch {b}")));
            }
            observer.on_batch(&BatchReport { epoch: epoch + 1, batch: b, loss: &loss });
            let grads = grads.into_tensors();
            match sgd_step(&mut opt, pair.online.params_mut(), &grads, &names) {
                Err(Error::NonFinite { context, .. }) => return Err(diverged(context)),
                other => other?,
            }
            // finite gradients can still overflow the parameters
            if let Some((name, _)) = pair.online.named_params().into_iter().find(|(_, m)| !m.is_finite()) {
                return Err(diverged(format!("parameter {name} became non-finite in batch {b}")));
            }
            pair.momentum_update()?;
            observer.on_step_end(&pair);
            sum_self += loss.self_value;
            sum_full += loss.full_value;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let loss_self = sum_self / n;
        let loss_full = sum_full / n;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            loss_total: loss_self + loss_full,
            loss_self,
            loss_full,
            lr,
        };
        if !metrics.loss_total.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                last_good_epoch: if epoch == 0 { None } else { Some(epoch) },
                reason: "non-finite epoch loss".into(),
            });
        }
        observer.on_epoch(&metrics);
        history.push(metrics);
    }
    Ok(TrainOutcome { pair, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;

    #[test]
    fn plain_gradient_step() {
        let mut st = OptimizerState::new(0.1, 0.0, 0.0).unwrap();
        let mut p = Matrix::zeros(1, 1);
        sgd_step(&mut st, vec![&mut p], &[Matrix::filled(1, 1, 1.0)], &[]).unwrap();
        assert!((p.get(0, 0) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_decays_velocity() {
        let mut st = OptimizerState::new(0.0, 0.5, 0.0).unwrap();
        let mut p = Matrix::filled(1, 2, 3.0);
        sgd_step(&mut st, vec![&mut p], &[Matrix::filled(1, 2, 2.0)], &[]).unwrap();
        sgd_step(&mut st, vec![&mut p], &[Matrix::zeros(1, 2)], &[]).unwrap();
        assert_eq!(p, Matrix::filled(1, 2, 3.0));
        assert_eq!(st.velocity()[0], Matrix::filled(1, 2, 1.0));
    }

    #[test]
    fn non_finite_gradient_named() {
        let mut st = OptimizerState::new(0.1, 0.9, 0.0).unwrap();
        let mut p = Matrix::zeros(2, 2);
        let mut g = Matrix::zeros(2, 2);
        g.set(1, 0, f64::NAN);
        let err = sgd_step(&mut st, vec![&mut p], &[g], &[String::from("head.weight")]).unwrap_err();
        match err {
            Error::NonFinite { context, row, col } => {
                assert!(context.contains("head.weight"));
                assert_eq!((row, col), (1, 0));
            }
            e => panic!("{e:?}"),
        }
        assert_eq!(p, Matrix::zeros(2, 2));
    }

    #[test]
    fn quadratic_bowl_descends() {
        let mut st = OptimizerState::new(0.1, 0.9, 0.0).unwrap();
        let mut theta = Matrix::from_rows(&[&[3.0, -4.0]]).unwrap();
        let mut prev = theta.frobenius_norm();
        let mut ok = 0;
        for _ in 0..100 {
            let g = theta.clone();
            sgd_step(&mut st, vec![&mut theta], &[g], &[]).unwrap();
            let n = theta.frobenius_norm();
            if n < prev {
                ok += 1;
            }
            prev = n;
        }
        // heavy-ball momentum overshoots on a few steps but the bowl is
        // left far behind
        assert!(ok > 50);
        assert!(prev < 0.5);
        let mut st = OptimizerState::new(0.1, 0.0, 0.0).unwrap();
        let mut theta = Matrix::from_rows(&[&[3.0, -4.0]]).unwrap();
        let mut prev = theta.frobenius_norm();
        for _ in 0..100 {
            let g = theta.clone();
            sgd_step(&mut st, vec![&mut theta], &[g], &[]).unwrap();
            assert!(theta.frobenius_norm() < prev);
            prev = theta.frobenius_norm();
        }
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0.4, 0, 10).unwrap(), 0.4);
        assert!(cosine_lr(0.4, 10, 10).unwrap().abs() < 1e-16);
        assert!((cosine_lr(0.4, 5, 10).unwrap() - 0.2).abs() < 1e-15);
        assert!(cosine_lr(0.4, 11, 10).is_err());
    }

    fn tiny(mode: Objective) -> RunConfig {
        RunConfig {
            mode,
            epochs: 3,
            batch_size: 16,
            backbone_widths: vec![16],
            projector_hidden: 16,
            embed_dim: 8,
            predictor_hidden: 16,
            data: BlobConfig { num_classes: 3, per_class: 12, dim: 6, spread: 0.1 },
            ..RunConfig::default()
        }
    }

    fn blobs(cfg: &RunConfig) -> Dataset {
        let d = cfg.data;
        make_blobs(d.num_classes, d.per_class, d.dim, d.spread, &mut Rng::derive(cfg.seed, streams::DATA)).unwrap()
    }

    #[test]
    fn every_mode_runs_and_is_deterministic() {
        for mode in [Objective::Fsl, Objective::Ssl, Objective::Naive, Objective::Opera] {
            for symmetrize in [false, true] {
                let cfg = RunConfig { symmetrize, ..tiny(mode) };
                let data = blobs(&cfg);
                let a = pretrain(&cfg, &data).unwrap();
                let b = pretrain(&cfg, &data).unwrap();
                assert_eq!(a.history, b.history);
                assert_eq!(a.history.len(), 3);
                for m in &a.history {
                    assert!((m.loss_total - m.loss_self - m.loss_full).abs() < 1e-9);
                    match mode {
                        Objective::Fsl => assert_eq!(m.loss_self, 0.0),
                        Objective::Ssl => assert_eq!(m.loss_full, 0.0),
                        _ => {}
                    }
                }
            }
        }
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let cfg = RunConfig {
            lr: 0.0,
            augment: AugmentConfig::IDENTITY,
            batch_size: 64,
            ..tiny(Objective::Opera)
        };
        let data = blobs(&cfg);
        let before = HierarchyModel::new(
            &cfg.model_config(data.dim(), data.num_classes()),
            &mut Rng::derive(cfg.seed, streams::INIT),
        )
        .unwrap();
        let out = pretrain(&cfg, &data).unwrap();
        assert_eq!(out.pair.online.named_params(), before.named_params());
        let first = out.history[0].loss_total;
        for m in &out.history {
            assert!((m.loss_total - first).abs() < 1e-9, "{} vs {first}", m.loss_total);
        }
    }

    #[test]
    fn naive_matched_constants_neutralize() {
        struct Check(f64, usize);
        impl Observer for Check {
            fn on_batch(&mut self, r: &BatchReport<'_>) {
                if let Some(m) = r.loss.pairs.as_ref().and_then(PairGradients::max_abs_conflicting) {
                    self.0 = self.0.max(m);
                    self.1 += 1;
                }
            }
        }
        let cfg = RunConfig {
            naive_self: SchemeKind::Constant,
            naive_full: SchemeKind::Constant,
            ..tiny(Objective::Naive)
        };
        let mut obs = Check(0.0, 0);
        pretrain_observed(&cfg, &blobs(&cfg), &mut obs).unwrap();
        assert!(obs.1 > 0);
        assert_eq!(obs.0, 0.0);
    }

    #[test]
    fn divergence_reports_epoch() {
        let cfg = RunConfig { lr: 1e200, schedule: Schedule::Constant, ..tiny(Objective::Fsl) };
        match pretrain(&cfg, &blobs(&cfg)) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
