//! MLP building blocks with manual backprop, the hierarchy network and its
//! momentum-updated target copy.
//!
//! Data flow of the online network:
//!
//! ```text
//! x -> backbone -> y -> projector -> z -> predictor -> y_self
//!                  |                 |                  |
//!                  A                 B                  C   -> class head -> y_full
//! ```
//!
//! The arrangement picks which of `y`, `z` or `y_self` feeds the class head.
//! The target network is a copy of backbone and projector only.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Training mode normalises with batch statistics and updates the running
/// estimates; evaluation mode uses the running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where the class head attaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arrangement {
    /// Directly on the backbone output.
    A,
    /// On the projector output, parallel to the predictor.
    B,
    /// After the predictor output (the hierarchical wiring).
    C,
}

impl Arrangement {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arrangement::A => "A",
            Arrangement::B => "B",
            Arrangement::C => "C",
        }
    }
}

impl core::str::FromStr for Arrangement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Arrangement::A),
            "B" | "b" => Ok(Arrangement::B),
            "C" | "c" => Ok(Arrangement::C),
            other => Err(Error::Config(format!("unknown arrangement `{other}`"))),
        }
    }
}

/// Per-feature batch normalisation with affine scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Matrix,
    pub shift: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
    pub eps: f64,
    /// Weight of the current batch in the running estimates.
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(width: usize, eps: f64, momentum: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("batch-norm epsilon must be positive, got {eps}")));
        }
        Ok(BatchNorm {
            scale: Matrix::filled(1, width, 1.0),
            shift: Matrix::zeros(1, width),
            running_mean: Matrix::zeros(1, width),
            running_var: Matrix::filled(1, width, 1.0),
            eps,
            momentum,
        })
    }
}

/// Fully connected layer, optionally followed by batch-norm, then an
/// activation. Layers with batch-norm carry no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    /// `out x in`.
    pub weight: Matrix,
    pub bias: Option<Matrix>,
    pub norm: Option<BatchNorm>,
    pub activation: Activation,
}

/// Activations a layer's backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    input: Matrix,
    normalized: Option<Matrix>,
    inv_std: Option<Vec<f64>>,
    batch_stats: bool,
    pre_activation: Matrix,
}

impl LayerCache {
    /// Input to the activation function, one row per sample.
    pub fn pre_activation(&self) -> &Matrix {
        &self.pre_activation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Option<Matrix>,
    pub scale: Option<Matrix>,
    pub shift: Option<Matrix>,
}

impl MlpLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new(
        input: usize,
        output: usize,
        batch_norm: bool,
        activation: Activation,
        bn_eps: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let limit = libm::sqrt(6.0 / (input + output) as f64);
        Ok(MlpLayer {
            weight: rng.uniform_matrix(output, input, -limit, limit),
            bias: if batch_norm { None } else { Some(Matrix::zeros(1, output)) },
            norm: if batch_norm { Some(BatchNorm::new(output, bn_eps, 0.1)?) } else { None },
            activation,
        })
    }

    /// Plain affine map `x W^T + b` with no normalisation or activation.
    pub fn linear(weight: Matrix, bias: Option<Matrix>) -> Self {
        MlpLayer {
            weight,
            bias,
            norm: None,
            activation: Activation::Identity,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn affine(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "MlpLayer::forward",
                format!("input width {}", self.input_dim()),
                format!("{}", x.cols()),
            ));
        }
        let mut z = x.matmul_transposed(&self.weight)?;
        if let Some(b) = &self.bias {
            for r in 0..z.rows() {
                for (v, &bv) in z.row_mut(r).iter_mut().zip(b.as_slice()) {
                    *v += bv;
                }
            }
        }
        Ok(z)
    }

    fn activate(&self, pre: &Matrix) -> Matrix {
        match self.activation {
            Activation::Identity => pre.clone(),
            Activation::Relu => pre.map(|v| if v > 0.0 { v } else { 0.0 }),
        }
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, LayerCache)> {
        let z = self.affine(x)?;
        let n = z.rows();
        let (pre, normalized, inv_std, batch_stats) = match (&mut self.norm, mode) {
            (None, _) => (z, None, None, false),
            (Some(bn), Mode::Train) => {
                if n < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batch-norm in training mode needs at least 2 samples, got {n}"
                    )));
                }
                let width = z.cols();
                let mut mean = vec![0.0; width];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(z.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; width];
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(z.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + bn.eps)).collect();
                let unbias = n as f64 / (n as f64 - 1.0);
                for j in 0..width {
                    let rm = bn.running_mean.get(0, j);
                    let rv = bn.running_var.get(0, j);
                    bn.running_mean.set(0, j, (1.0 - bn.momentum) * rm + bn.momentum * mean[j]);
                    bn.running_var.set(0, j, (1.0 - bn.momentum) * rv + bn.momentum * var[j] * unbias);
                }
                let (xhat, out) = normalize(&z, &mean, &inv, bn);
                (out, Some(xhat), Some(inv), true)
            }
            (Some(bn), Mode::Eval) => {
                let mean = bn.running_mean.as_slice().to_vec();
                let inv: Vec<f64> = bn
                    .running_var
                    .as_slice()
                    .iter()
                    .map(|v| 1.0 / libm::sqrt(v + bn.eps))
                    .collect();
                let (xhat, out) = normalize(&z, &mean, &inv, bn);
                (out, Some(xhat), Some(inv), false)
            }
        };
        let out = self.activate(&pre);
        Ok((
            out,
            LayerCache {
                input: x.clone(),
                normalized,
                inv_std,
                batch_stats,
                pre_activation: pre,
            },
        ))
    }

    /// Evaluation-mode forward that leaves the layer untouched.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let z = self.affine(x)?;
        let pre = match &self.norm {
            None => z,
            Some(bn) => {
                let inv: Vec<f64> = bn
                    .running_var
                    .as_slice()
                    .iter()
                    .map(|v| 1.0 / libm::sqrt(v + bn.eps))
                    .collect();
                normalize(&z, bn.running_mean.as_slice(), &inv, bn).1
            }
        };
        Ok(self.activate(&pre))
    }

    pub fn backward(&self, cache: &LayerCache, grad_out: &Matrix) -> Result<(LayerGrads, Matrix)> {
        if grad_out.shape() != cache.pre_activation.shape() || cache.input.cols() != self.input_dim() {
            return Err(Error::State(format!(
                "layer cache does not match: gradient {:?}, cached {:?}",
                grad_out.shape(),
                cache.pre_activation.shape()
            )));
        }
        let mut d_pre = grad_out.clone();
        if self.activation == Activation::Relu {
            for (d, &p) in d_pre.as_mut_slice().iter_mut().zip(cache.pre_activation.as_slice()) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let n = d_pre.rows();
        let (dz, scale_grad, shift_grad) = match &self.norm {
            None => (d_pre, None, None),
            Some(bn) => {
                let xhat = cache
                    .normalized
                    .as_ref()
                    .ok_or_else(|| Error::State("batch-norm cache missing".into()))?;
                let inv = cache
                    .inv_std
                    .as_ref()
                    .ok_or_else(|| Error::State("batch-norm cache missing".into()))?;
                let width = d_pre.cols();
                let mut d_scale = Matrix::zeros(1, width);
                let mut d_shift = Matrix::zeros(1, width);
                for r in 0..n {
                    for j in 0..width {
                        let g = d_pre.get(r, j);
                        d_scale.as_mut_slice()[j] += g * xhat.get(r, j);
                        d_shift.as_mut_slice()[j] += g;
                    }
                }
                let mut dz = Matrix::zeros(n, width);
                if cache.batch_stats {
                    let nf = n as f64;
                    for j in 0..width {
                        let gamma = bn.scale.get(0, j);
                        let mut sum_dx = 0.0;
                        let mut sum_dx_xhat = 0.0;
                        for r in 0..n {
                            let dx = d_pre.get(r, j) * gamma;
                            sum_dx += dx;
                            sum_dx_xhat += dx * xhat.get(r, j);
                        }
                        for r in 0..n {
                            let dx = d_pre.get(r, j) * gamma;
                            let v = inv[j] / nf * (nf * dx - sum_dx - xhat.get(r, j) * sum_dx_xhat);
                            dz.set(r, j, v);
                        }
                    }
                } else {
                    for r in 0..n {
                        for j in 0..width {
                            dz.set(r, j, d_pre.get(r, j) * bn.scale.get(0, j) * inv[j]);
                        }
                    }
                }
                (dz, Some(d_scale), Some(d_shift))
            }
        };
        let weight = dz.transposed_matmul(&cache.input)?;
        let bias = self.bias.as_ref().map(|_| {
            let mut b = Matrix::zeros(1, dz.cols());
            for r in 0..n {
                for (bv, &g) in b.as_mut_slice().iter_mut().zip(dz.row(r)) {
                    *bv += g;
                }
            }
            b
        });
        let grad_in = dz.matmul(&self.weight)?;
        Ok((
            LayerGrads {
                weight,
                bias,
                scale: scale_grad,
                shift: shift_grad,
            },
            grad_in,
        ))
    }

    fn params(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![("weight", &self.weight)];
        if let Some(b) = &self.bias {
            out.push(("bias", b));
        }
        if let Some(bn) = &self.norm {
            out.push(("bn.scale", &bn.scale));
            out.push(("bn.shift", &bn.shift));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        if let Some(bn) = &mut self.norm {
            out.push(&mut bn.scale);
            out.push(&mut bn.shift);
        }
        out
    }

    fn buffers(&self) -> Vec<(&'static str, &Matrix)> {
        match &self.norm {
            Some(bn) => vec![("bn.running_mean", &bn.running_mean), ("bn.running_var", &bn.running_var)],
            None => Vec::new(),
        }
    }

    fn buffers_mut(&mut self) -> Vec<&mut Matrix> {
        match &mut self.norm {
            Some(bn) => vec![&mut bn.running_mean, &mut bn.running_var],
            None => Vec::new(),
        }
    }
}

impl LayerGrads {
    fn into_tensors(self) -> impl Iterator<Item = Matrix> {
        core::iter::once(self.weight)
            .chain(self.bias)
            .chain(self.scale)
            .chain(self.shift)
    }
}

fn normalize(z: &Matrix, mean: &[f64], inv: &[f64], bn: &BatchNorm) -> (Matrix, Matrix) {
    let mut xhat = z.clone();
    let mut out = z.clone();
    for r in 0..z.rows() {
        for j in 0..z.cols() {
            let h = (z.get(r, j) - mean[j]) * inv[j];
            xhat.set(r, j, h);
            out.set(r, j, bn.scale.get(0, j) * h + bn.shift.get(0, j));
        }
    }
    (xhat, out)
}

/// Sequence of layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Stack {
    pub layers: Vec<MlpLayer>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StackCache {
    pub layers: Vec<LayerCache>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StackGrads {
    pub layers: Vec<LayerGrads>,
}

impl StackGrads {
    pub fn into_tensors(self) -> Vec<Matrix> {
        self.layers.into_iter().flat_map(LayerGrads::into_tensors).collect()
    }
}

impl Stack {
    pub fn new(layers: Vec<MlpLayer>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::shape(
                    "Stack::new",
                    format!("layer input width {}", w[0].output_dim()),
                    format!("{}", w[1].input_dim()),
                ));
            }
        }
        Ok(Stack { layers })
    }

    /// Hidden layers are linear + batch-norm + ReLU; the last layer is
    /// either the same (`norm_last`) or a biased linear map.
    pub fn mlp(widths: &[usize], norm_last: bool, bn_eps: f64, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least an input and an output width".into()));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, w) in widths.windows(2).enumerate() {
            let last = i == widths.len() - 2;
            let layer = if last && !norm_last {
                MlpLayer::new(w[0], w[1], false, Activation::Identity, bn_eps, rng)?
            } else {
                MlpLayer::new(w[0], w[1], true, Activation::Relu, bn_eps, rng)?
            };
            layers.push(layer);
        }
        Stack::new(layers)
    }

    /// Width the stack accepts; 0 for an empty stack.
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, MlpLayer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, MlpLayer::output_dim)
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, StackCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (out, cache) = layer.forward(&h, mode)?;
            caches.push(cache);
            h = out;
        }
        Ok((h, StackCache { layers: caches }))
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&self, cache: &StackCache, grad_out: &Matrix) -> Result<(StackGrads, Matrix)> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::State(format!(
                "missing forward cache: {} cached layers for {} layers",
                cache.layers.len(),
                self.layers.len()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            let (lg, gin) = layer.backward(c, &g)?;
            grads.push(lg);
            g = gin;
        }
        grads.reverse();
        Ok((StackGrads { layers: grads }, g))
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.params() {
                out.push((format!("{prefix}.{i}.{name}"), m));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(MlpLayer::params_mut).collect()
    }

    pub fn named_buffers(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.buffers() {
                out.push((format!("{prefix}.{i}.{name}"), m));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(MlpLayer::buffers_mut).collect()
    }

    /// Every ReLU pre-activation in `cache`, for kink-distance checks.
    pub fn relu_inputs<'c>(&self, cache: &'c StackCache) -> impl Iterator<Item = f64> + 'c {
        let relu: Vec<bool> = self.layers.iter().map(|l| l.activation == Activation::Relu).collect();
        cache
            .layers
            .iter()
            .zip(relu)
            .filter(|(_, r)| *r)
            .flat_map(|(c, _)| c.pre_activation.as_slice().iter().copied())
    }
}

/// Widths of the desk-scale hierarchy network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Output widths of the backbone layers; the last is the representation width.
    pub backbone_widths: Vec<usize>,
    pub projector_hidden: usize,
    pub embed_dim: usize,
    pub predictor_hidden: usize,
    pub class_hidden: usize,
    pub num_classes: usize,
    pub arrangement: Arrangement,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// Backbone `input -> 64 -> 64`, 64-wide projector and predictor
    /// hidden layers, 32-wide embeddings, class head hidden width
    /// `max(4 * classes, 32)`.
    pub fn desk(input_dim: usize, num_classes: usize, arrangement: Arrangement) -> Self {
        ModelConfig {
            input_dim,
            backbone_widths: vec![64, 64],
            projector_hidden: 64,
            embed_dim: 32,
            predictor_hidden: 64,
            class_hidden: (4 * num_classes).max(32),
            num_classes,
            arrangement,
            bn_eps: 1e-5,
        }
    }

    pub fn representation_dim(&self) -> usize {
        self.backbone_widths.last().copied().unwrap_or(self.input_dim)
    }

    fn class_input_dim(&self) -> usize {
        match self.arrangement {
            Arrangement::A => self.representation_dim(),
            Arrangement::B | Arrangement::C => self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.projector_hidden,
            self.embed_dim,
            self.predictor_hidden,
            self.class_hidden,
            self.num_classes,
        ];
        if dims.contains(&0) || self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return Err(Error::Config(format!("all model widths must be positive: {self:?}")));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config("bn_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Outputs of one online forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyOutput {
    /// Backbone representation.
    pub y: Matrix,
    /// Projector output.
    pub projection: Matrix,
    /// Predictor output (instance-level proxy).
    pub y_self: Matrix,
    /// Class-head output (class-level proxy).
    pub y_full: Matrix,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelCache {
    backbone: StackCache,
    projector: StackCache,
    predictor: StackCache,
    class_head: StackCache,
}

impl ModelCache {
    pub fn stacks(&self) -> [&StackCache; 4] {
        [&self.backbone, &self.projector, &self.predictor, &self.class_head]
    }
}

/// Upstream gradients into the two proxy outputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upstream<'a> {
    pub y_self: Option<&'a Matrix>,
    pub y_full: Option<&'a Matrix>,
}

/// Parameter gradients, ordered like [`HierarchyModel::named_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub backbone: StackGrads,
    pub projector: StackGrads,
    pub predictor: StackGrads,
    pub class_head: StackGrads,
}

impl ModelGrads {
    pub fn into_tensors(self) -> Vec<Matrix> {
        let mut out = self.backbone.into_tensors();
        out.extend(self.projector.into_tensors());
        out.extend(self.predictor.into_tensors());
        out.extend(self.class_head.into_tensors());
        out
    }

    /// Sum of two gradient sets of the same model.
    pub fn combine(self, other: ModelGrads) -> Result<ModelGrads> {
        fn add(a: StackGrads, b: StackGrads) -> Result<StackGrads> {
            let layers = a
                .layers
                .into_iter()
                .zip(b.layers)
                .map(|(x, y)| {
                    let opt = |p: Option<Matrix>, q: Option<Matrix>| -> Result<Option<Matrix>> {
                        match (p, q) {
                            (Some(p), Some(q)) => Ok(Some(p.add(&q)?)),
                            (None, None) => Ok(None),
                            _ => Err(Error::State("gradient layouts differ".into())),
                        }
                    };
                    Ok(LayerGrads {
                        weight: x.weight.add(&y.weight)?,
                        bias: opt(x.bias, y.bias)?,
                        scale: opt(x.scale, y.scale)?,
                        shift: opt(x.shift, y.shift)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(StackGrads { layers })
        }
        Ok(ModelGrads {
            backbone: add(self.backbone, other.backbone)?,
            projector: add(self.projector, other.projector)?,
            predictor: add(self.predictor, other.predictor)?,
            class_head: add(self.class_head, other.class_head)?,
        })
    }
}

/// Online network: backbone, projector, predictor and class head.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyModel {
    pub backbone: Stack,
    pub projector: Stack,
    pub predictor: Stack,
    pub class_head: Stack,
    arrangement: Arrangement,
}

impl HierarchyModel {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut widths = vec![cfg.input_dim];
        widths.extend_from_slice(&cfg.backbone_widths);
        let backbone = Stack::mlp(&widths, true, cfg.bn_eps, rng)?;
        let rep = cfg.representation_dim();
        let projector = Stack::mlp(&[rep, cfg.projector_hidden, cfg.embed_dim], false, cfg.bn_eps, rng)?;
        let predictor = Stack::mlp(&[cfg.embed_dim, cfg.predictor_hidden, cfg.embed_dim], false, cfg.bn_eps, rng)?;
        let class_head = Stack::mlp(&[cfg.class_input_dim(), cfg.class_hidden, cfg.num_classes], false, cfg.bn_eps, rng)?;
        HierarchyModel::from_parts(backbone, projector, predictor, class_head, cfg.arrangement)
    }

    /// Assembles a model from explicit stacks, checking that the widths
    /// chain for the chosen arrangement.
    pub fn from_parts(
        backbone: Stack,
        projector: Stack,
        predictor: Stack,
        class_head: Stack,
        arrangement: Arrangement,
    ) -> Result<Self> {
        let check = |what: &'static str, want: usize, got: usize| -> Result<()> {
            if want != got {
                Err(Error::shape(what, format!("width {want}"), format!("{got}")))
            } else {
                Ok(())
            }
        };
        check("projector input", backbone.output_dim(), projector.input_dim())?;
        check("predictor input", projector.output_dim(), predictor.input_dim())?;
        let attach = match arrangement {
            Arrangement::A => backbone.output_dim(),
            Arrangement::B => projector.output_dim(),
            Arrangement::C => predictor.output_dim(),
        };
        check("class head input", attach, class_head.input_dim())?;
        Ok(HierarchyModel {
            backbone,
            projector,
            predictor,
            class_head,
            arrangement,
        })
    }

    pub fn arrangement(&self) -> Arrangement {
        self.arrangement
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.class_head.output_dim()
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(HierarchyOutput, ModelCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "HierarchyModel::forward",
                format!("input width {}", self.input_dim()),
                format!("{}", x.cols()),
            ));
        }
        let (y, backbone) = self.backbone.forward(x, mode)?;
        let (projection, projector) = self.projector.forward(&y, mode)?;
        let (y_self, predictor) = self.predictor.forward(&projection, mode)?;
        let head_in = match self.arrangement {
            Arrangement::A => &y,
            Arrangement::B => &projection,
            Arrangement::C => &y_self,
        };
        let (y_full, class_head) = self.class_head.forward(head_in, mode)?;
        Ok((
            HierarchyOutput {
                y,
                projection,
                y_self,
                y_full,
            },
            ModelCache {
                backbone,
                projector,
                predictor,
                class_head,
            },
        ))
    }

    /// Evaluation-mode forward without touching any state.
    pub fn infer(&self, x: &Matrix) -> Result<HierarchyOutput> {
        let y = self.backbone.infer(x)?;
        let projection = self.projector.infer(&y)?;
        let y_self = self.predictor.infer(&projection)?;
        let head_in = match self.arrangement {
            Arrangement::A => &y,
            Arrangement::B => &projection,
            Arrangement::C => &y_self,
        };
        let y_full = self.class_head.infer(head_in)?;
        Ok(HierarchyOutput {
            y,
            projection,
            y_self,
            y_full,
        })
    }

    /// Frozen backbone features.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.backbone.infer(x)
    }

    pub fn backward(&self, cache: &ModelCache, upstream: Upstream<'_>) -> Result<ModelGrads> {
        let batch = cache
            .backbone
            .layers
            .first()
            .map(|c| c.input.rows())
            .ok_or_else(|| Error::State("missing forward cache".into()))?;
        let zeros = |w: usize| Matrix::zeros(batch, w);
        let d_full = upstream.y_full.cloned().unwrap_or_else(|| zeros(self.class_head.output_dim()));
        let (class_head, d_head_in) = self.class_head.backward(&cache.class_head, &d_full)?;

        let mut d_self = upstream.y_self.cloned().unwrap_or_else(|| zeros(self.predictor.output_dim()));
        if self.arrangement == Arrangement::C {
            d_self = d_self.add(&d_head_in)?;
        }
        let (predictor, mut d_proj) = self.predictor.backward(&cache.predictor, &d_self)?;
        if self.arrangement == Arrangement::B {
            d_proj = d_proj.add(&d_head_in)?;
        }
        let (projector, mut d_y) = self.projector.backward(&cache.projector, &d_proj)?;
        if self.arrangement == Arrangement::A {
            d_y = d_y.add(&d_head_in)?;
        }
        let (backbone, _) = self.backbone.backward(&cache.backbone, &d_y)?;
        Ok(ModelGrads {
            backbone,
            projector,
            predictor,
            class_head,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.backbone.named_params("backbone");
        out.extend(self.projector.named_params("projector"));
        out.extend(self.predictor.named_params("predictor"));
        out.extend(self.class_head.named_params("class_head"));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.backbone.params_mut();
        out.extend(self.projector.params_mut());
        out.extend(self.predictor.params_mut());
        out.extend(self.class_head.params_mut());
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.backbone.named_buffers("backbone");
        out.extend(self.projector.named_buffers("projector"));
        out.extend(self.predictor.named_buffers("predictor"));
        out.extend(self.class_head.named_buffers("class_head"));
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.backbone.buffers_mut();
        out.extend(self.projector.buffers_mut());
        out.extend(self.predictor.buffers_mut());
        out.extend(self.class_head.buffers_mut());
        out
    }

    /// Smallest `|pre-activation|` over every ReLU in a forward cache.
    pub fn min_kink_distance(&self, cache: &ModelCache) -> f64 {
        let stacks = [&self.backbone, &self.projector, &self.predictor, &self.class_head];
        stacks
            .iter()
            .zip(cache.stacks())
            .flat_map(|(s, c)| s.relu_inputs(c))
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Backbone and projector copy that only moves by momentum updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNetwork {
    pub backbone: Stack,
    pub projector: Stack,
}

impl TargetNetwork {
    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        let (y, _) = self.backbone.forward(x, mode)?;
        Ok(self.projector.forward(&y, mode)?.0)
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.backbone.named_params("backbone");
        out.extend(self.projector.named_params("projector"));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.backbone.params_mut();
        out.extend(self.projector.params_mut());
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.backbone.named_buffers("backbone");
        out.extend(self.projector.named_buffers("projector"));
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.backbone.buffers_mut();
        out.extend(self.projector.buffers_mut());
        out
    }
}

/// Online network with its exponential-moving-average target.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineTargetPair {
    pub online: HierarchyModel,
    pub target: TargetNetwork,
    momentum: f64,
}

impl OnlineTargetPair {
    /// Target starts as an exact copy of the online backbone and projector.
    pub fn new(online: HierarchyModel, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        let target = TargetNetwork {
            backbone: online.backbone.clone(),
            projector: online.projector.clone(),
        };
        Ok(OnlineTargetPair {
            online,
            target,
            momentum,
        })
    }

    pub fn from_parts(online: HierarchyModel, target: TargetNetwork, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        let pair = OnlineTargetPair {
            online,
            target,
            momentum,
        };
        pair.check_shapes()?;
        Ok(pair)
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    fn online_shared(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.online.backbone.named_params("backbone");
        out.extend(self.online.projector.named_params("projector"));
        out
    }

    fn check_shapes(&self) -> Result<()> {
        let online = self.online_shared();
        let target = self.target.named_params();
        if online.len() != target.len() {
            return Err(Error::State(format!(
                "target has {} tensors, online backbone+projector has {}",
                target.len(),
                online.len()
            )));
        }
        for ((name, o), (_, t)) in online.iter().zip(&target) {
            if o.shape() != t.shape() {
                return Err(Error::State(format!(
                    "shape drift in {name}: online {:?}, target {:?}",
                    o.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// `target <- m * target + (1 - m) * online` for every parameter tensor.
    pub fn momentum_update(&mut self) -> Result<()> {
        self.check_shapes()?;
        let m = self.momentum;
        let online: Vec<Matrix> = self.online_shared().into_iter().map(|(_, t)| t.clone()).collect();
        for (t, o) in self.target.params_mut().into_iter().zip(&online) {
            for (tv, &ov) in t.as_mut_slice().iter_mut().zip(o.as_slice()) {
                *tv = m * *tv + (1.0 - m) * ov;
            }
        }
        Ok(())
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::Domain(format!("momentum must lie in [0, 1], got {m}")))
    }
}
