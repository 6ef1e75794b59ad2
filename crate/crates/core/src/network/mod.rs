//! Implication-structured networks: a stack of masked BIR layers (each
//! followed by BatchNorm, ReLU and inverted dropout) and a dense head.
//!
//! Gradients are derived by hand for this fixed architecture. Masked weight
//! positions are not stored at all, so they carry neither value nor
//! gradient nor optimizer state; [`BirLayer::dense_weights`] and
//! [`Gradients::dense_weight_grad`] materialize the full `h × d` views.

mod layer;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use layer::{
    build_bir_layer, BatchNorm, BirLayer, Connectivity, DenseHead, DenseLayer, HeadConfig,
    BIR_INIT_SCALE, BN_EPS, BN_MOMENTUM,
};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use layer::scatter_dense;

/// A complete model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BirNetwork {
    pub input_dim: usize,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub layers: Vec<BirLayer>,
    pub head: DenseHead,
    /// Set once the trainer has run.
    pub trained: bool,
}

/// Forward-pass behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics with running-average update, dropout on.
    Train,
    /// Running statistics, no dropout. Deterministic.
    Eval,
}

/// Fine-grained forward options; [`Mode`] covers the usual cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Normalize with statistics of the current batch instead of the
    /// running estimates.
    pub batch_stats: bool,
    pub dropout: bool,
}

impl Mode {
    pub fn options(self) -> ForwardOptions {
        match self {
            Mode::Train => ForwardOptions {
                batch_stats: true,
                dropout: true,
            },
            Mode::Eval => ForwardOptions {
                batch_stats: false,
                dropout: false,
            },
        }
    }
}

/// Intermediate values of one BIR layer needed by the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Matrix,
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    /// BN output, before ReLU.
    pub pre_activation: Matrix,
    /// Post-ReLU output before dropout.
    pub activation: Matrix,
    /// Per-entry dropout multiplier (0 or `1 / (1 − rate)`).
    pub dropout_scale: Option<Matrix>,
    pub output: Matrix,
}

/// Everything recorded by [`BirNetwork::forward_with`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub options: ForwardOptions,
    pub layers: Vec<LayerCache>,
    /// Input to each head layer.
    pub head_inputs: Vec<Matrix>,
    /// Pre-ReLU output of each hidden head layer.
    pub head_pre: Vec<Matrix>,
    pub logits: Matrix,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }
}

/// Gradient of one BIR layer, laid out like the layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Gradient for every trainable parameter of a [`BirNetwork`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    /// `(weights, bias)` per head layer.
    pub head: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    /// Buffers in the same order as [`BirNetwork::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for g in &self.layers {
            out.extend([&g.weights[..], &g.bias[..], &g.gamma[..], &g.beta[..]]);
        }
        for (w, b) in &self.head {
            out.extend([&w[..], &b[..]]);
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for g in &mut self.layers {
            out.push(&mut g.weights[..]);
            out.push(&mut g.bias[..]);
            out.push(&mut g.gamma[..]);
            out.push(&mut g.beta[..]);
        }
        for (w, b) in &mut self.head {
            out.push(&mut w[..]);
            out.push(&mut b[..]);
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Dense `h × d` gradient of layer `l`'s weight matrix, zero wherever
    /// the mask is off.
    pub fn dense_weight_grad(&self, net: &BirNetwork, l: usize) -> Vec<f64> {
        scatter_dense(&net.layers[l], &self.layers[l].weights)
    }
}

/// Parameter accounting for a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamAccounting {
    /// Total units over all BIR layers.
    pub width: usize,
    /// Mask-allowed weights plus unit biases over all BIR layers.
    pub bir_active: usize,
    /// `bir_active` plus BatchNorm scale/shift plus every head parameter.
    pub total_active: usize,
}

/// Parameter accounting: BIR layers contribute their mask-allowed weights and
/// biases; the total adds BatchNorm parameters and the dense head.
pub fn active_param_count(net: &BirNetwork) -> ParamAccounting {
    let width = net.layers.iter().map(BirLayer::width).sum();
    let bir_active = net
        .layers
        .iter()
        .map(|l| l.active_weight_count() + l.width())
        .sum::<usize>();
    let bn: usize = net.layers.iter().map(|l| 2 * l.width()).sum();
    ParamAccounting {
        width,
        bir_active,
        total_active: bir_active + bn + net.head.param_count(),
    }
}

/// Accounting of the dense counterpart of `net`, computed from shapes alone.
pub fn matched_param_count(net: &BirNetwork) -> ParamAccounting {
    let width = net.layers.iter().map(BirLayer::width).sum();
    let bir_active = net
        .layers
        .iter()
        .map(|l| l.width() * l.input_dim + l.width())
        .sum::<usize>();
    let bn: usize = net.layers.iter().map(|l| 2 * l.width()).sum();
    ParamAccounting {
        width,
        bir_active,
        total_active: bir_active + bn + net.head.param_count(),
    }
}

fn relu_in_place(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

impl BirNetwork {
    /// Assembles a network, checking that layer widths chain into the head.
    pub fn new(
        feature_names: Vec<String>,
        class_names: Vec<String>,
        layers: Vec<BirLayer>,
        head: DenseHead,
    ) -> Result<Self> {
        let net = Self {
            input_dim: feature_names.len(),
            feature_names,
            class_names,
            layers,
            head,
            trained: false,
        };
        net.validate()?;
        Ok(net)
    }

    /// Structural consistency check, also run after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.feature_names.len() != self.input_dim {
            return Err(Error::Format("feature name count differs from input width".into()));
        }
        let mut prev = self.input_dim;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.input_dim != prev {
                return Err(Error::Format(format!(
                    "layer {l} expects {} inputs but receives {prev}",
                    layer.input_dim
                )));
            }
            layer.validate()?;
            prev = layer.width();
        }
        if self.head.layers.is_empty() {
            return Err(Error::Format("network has no head".into()));
        }
        for hl in &self.head.layers {
            if hl.in_dim != prev || hl.weights.len() != hl.in_dim * hl.out_dim || hl.bias.len() != hl.out_dim {
                return Err(Error::Format("head layer shapes do not chain".into()));
            }
            prev = hl.out_dim;
        }
        if prev != self.class_names.len() {
            return Err(Error::Format(format!(
                "head emits {prev} logits for {} classes",
                self.class_names.len()
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Names of the inputs seen by layer `l`: raw feature names for layer 0,
    /// synthesized unit names `L{l}/u{k}:{type}({src},{tgt})` above it.
    pub fn input_names(&self, l: usize) -> Vec<String> {
        let mut names = self.feature_names.clone();
        for (depth, layer) in self.layers.iter().enumerate().take(l) {
            names = layer
                .bindings
                .iter()
                .enumerate()
                .map(|(k, b)| {
                    format!(
                        "L{depth}/u{k}:{}({},{})",
                        b.btype, names[b.source], names[b.target]
                    )
                })
                .collect();
        }
        names
    }

    /// Forward pass with explicit options. `rng` is required when dropout
    /// is enabled and is otherwise untouched.
    pub fn forward_with(
        &self,
        x: &Matrix,
        opts: ForwardOptions,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardCache> {
        if x.cols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "network input width",
                expected: self.input_dim,
                found: x.cols(),
            });
        }
        let m = x.rows();
        if opts.batch_stats && m < 2 {
            return Err(Error::invalid("batch statistics need at least 2 rows"));
        }
        let mut rng = rng;
        if opts.dropout && rng.is_none() && self.layers.iter().any(|l| l.dropout > 0.0) {
            return Err(Error::invalid("dropout requires a random source"));
        }

        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let h = layer.width();
            let z = layer.linear(&current);
            let (mean, var) = if opts.batch_stats {
                batch_moments(&z)
            } else {
                (layer.bn.running_mean.clone(), layer.bn.running_var.clone())
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + layer.bn.eps).sqrt()).collect();
            let mut normalized = z;
            let mut pre = Matrix::zeros(m, h);
            for r in 0..m {
                let nr = normalized.row_mut(r);
                let pr = pre.row_mut(r);
                for k in 0..h {
                    nr[k] = (nr[k] - mean[k]) * inv_std[k];
                    pr[k] = layer.bn.gamma[k] * nr[k] + layer.bn.beta[k];
                }
            }
            let mut activation = pre.clone();
            relu_in_place(&mut activation);

            let (output, dropout_scale) = if opts.dropout && layer.dropout > 0.0 {
                let rng = rng.as_deref_mut().expect("checked above");
                let keep = 1.0 - layer.dropout;
                let mut scale = Matrix::zeros(m, h);
                for v in scale.as_mut_slice() {
                    if rng.random::<f64>() < keep {
                        *v = 1.0 / keep;
                    }
                }
                let mut out = activation.clone();
                for (o, s) in out.as_mut_slice().iter_mut().zip(scale.as_slice()) {
                    *o *= s;
                }
                (out, Some(scale))
            } else {
                (activation.clone(), None)
            };

            let next = output.clone();
            caches.push(LayerCache {
                input: std::mem::replace(&mut current, next),
                normalized,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                pre_activation: pre,
                activation,
                dropout_scale,
                output,
            });
        }

        let mut head_inputs = Vec::with_capacity(self.head.layers.len());
        let mut head_pre = Vec::new();
        let last = self.head.layers.len() - 1;
        for (i, hl) in self.head.layers.iter().enumerate() {
            let mut y = hl.apply(&current);
            head_inputs.push(std::mem::replace(&mut current, Matrix::zeros(0, 0)));
            if i < last {
                head_pre.push(y.clone());
                relu_in_place(&mut y);
            }
            current = y;
        }
        Ok(ForwardCache {
            options: opts,
            layers: caches,
            head_inputs,
            head_pre,
            logits: current,
        })
    }

    /// Forward pass in `mode`. Train mode updates the BatchNorm running
    /// statistics (momentum `BN_MOMENTUM`, unbiased batch variance).
    pub fn forward(
        &mut self,
        x: &Matrix,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Matrix, ForwardCache)> {
        let cache = self.forward_with(x, mode.options(), Some(rng))?;
        if mode == Mode::Train {
            let m = x.rows() as f64;
            for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
                let mom = layer.bn.momentum;
                for k in 0..layer.width() {
                    layer.bn.running_mean[k] = (1.0 - mom) * layer.bn.running_mean[k] + mom * c.batch_mean[k];
                    let unbiased = c.batch_var[k] * m / (m - 1.0);
                    layer.bn.running_var[k] = (1.0 - mom) * layer.bn.running_var[k] + mom * unbiased;
                }
            }
        }
        Ok((cache.logits.clone(), cache))
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_with(x, Mode::Eval.options(), None)?.logits)
    }

    /// Post-ReLU output of every BIR layer, without dropout.
    pub fn layer_activations(&self, x: &Matrix, batch_stats: bool) -> Result<Vec<Matrix>> {
        let opts = ForwardOptions {
            batch_stats,
            dropout: false,
        };
        Ok(self
            .forward_with(x, opts, None)?
            .layers
            .into_iter()
            .map(|c| c.activation)
            .collect())
    }

    /// Gradients of a scalar loss given `d loss / d logits`, using the
    /// intermediate values in `cache`.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Matrix) -> Result<Gradients> {
        let m = cache.batch_size();
        let shapes_ok = cache.layers.len() == self.layers.len()
            && cache.head_inputs.len() == self.head.layers.len()
            && cache
                .layers
                .iter()
                .zip(&self.layers)
                .all(|(c, l)| c.input.cols() == l.input_dim && c.output.cols() == l.width() && c.output.rows() == m)
            && cache
                .head_inputs
                .iter()
                .zip(&self.head.layers)
                .all(|(x, hl)| x.cols() == hl.in_dim);
        if !shapes_ok {
            return Err(Error::invalid("forward cache does not match this network"));
        }
        if d_logits.rows() != m || d_logits.cols() != self.head.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "logit gradient",
                expected: m * self.head.output_dim(),
                found: d_logits.rows() * d_logits.cols(),
            });
        }

        // head
        let mut head_grads = vec![(Vec::new(), Vec::new()); self.head.layers.len()];
        let mut delta = d_logits.clone();
        for i in (0..self.head.layers.len()).rev() {
            let hl = &self.head.layers[i];
            let x = &cache.head_inputs[i];
            let mut gw = vec![0.0; hl.weights.len()];
            let mut gb = vec![0.0; hl.out_dim];
            let mut dx = Matrix::zeros(m, hl.in_dim);
            for r in 0..m {
                let dr = delta.row(r);
                let xr = x.row(r);
                let dxr = dx.row_mut(r);
                for (o, &g) in dr.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    let w = &hl.weights[o * hl.in_dim..(o + 1) * hl.in_dim];
                    let gwo = &mut gw[o * hl.in_dim..(o + 1) * hl.in_dim];
                    for ((gwi, &xi), (dxi, &wi)) in gwo.iter_mut().zip(xr).zip(dxr.iter_mut().zip(w)) {
                        *gwi += g * xi;
                        *dxi += g * wi;
                    }
                }
            }
            head_grads[i] = (gw, gb);
            if i > 0 {
                let pre = &cache.head_pre[i - 1];
                for (d, &p) in dx.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = dx;
        }

        // BIR layers
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let c = &cache.layers[l];
            let h = layer.width();
            if let Some(scale) = &c.dropout_scale {
                for (d, s) in delta.as_mut_slice().iter_mut().zip(scale.as_slice()) {
                    *d *= s;
                }
            }
            for (d, &p) in delta.as_mut_slice().iter_mut().zip(c.pre_activation.as_slice()) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
            let mut g_gamma = vec![0.0; h];
            let mut g_beta = vec![0.0; h];
            for r in 0..m {
                let dr = delta.row(r);
                let nr = c.normalized.row(r);
                for k in 0..h {
                    g_gamma[k] += dr[k] * nr[k];
                    g_beta[k] += dr[k];
                }
            }
            // d loss / d z
            let mut dz = delta;
            if cache.options.batch_stats {
                let mf = m as f64;
                for r in 0..m {
                    let nr = c.normalized.row(r);
                    let dzr = dz.row_mut(r);
                    for k in 0..h {
                        let g = layer.bn.gamma[k];
                        dzr[k] = g * c.inv_std[k] / mf * (mf * dzr[k] - g_beta[k] - nr[k] * g_gamma[k]);
                    }
                }
            } else {
                for r in 0..m {
                    let dzr = dz.row_mut(r);
                    for k in 0..h {
                        dzr[k] *= layer.bn.gamma[k] * c.inv_std[k];
                    }
                }
            }

            let mut gw = vec![0.0; layer.weights.len()];
            let mut gb = vec![0.0; h];
            let need_dx = l > 0;
            let mut dx = Matrix::zeros(if need_dx { m } else { 0 }, layer.input_dim);
            for r in 0..m {
                let xr = c.input.row(r);
                let dzr = dz.row(r);
                match &layer.connectivity {
                    Connectivity::Pairs(pairs) => {
                        for (k, &[a, b]) in pairs.iter().enumerate() {
                            let g = dzr[k];
                            gb[k] += g;
                            gw[2 * k] += g * xr[a];
                            gw[2 * k + 1] += g * xr[b];
                        }
                        if need_dx {
                            let dxr = dx.row_mut(r);
                            for (k, &[a, b]) in pairs.iter().enumerate() {
                                dxr[a] += dzr[k] * layer.weights[2 * k];
                                dxr[b] += dzr[k] * layer.weights[2 * k + 1];
                            }
                        }
                    }
                    Connectivity::Dense => {
                        let d = layer.input_dim;
                        for k in 0..h {
                            let g = dzr[k];
                            gb[k] += g;
                            if g == 0.0 {
                                continue;
                            }
                            for (gwi, &xi) in gw[k * d..(k + 1) * d].iter_mut().zip(xr) {
                                *gwi += g * xi;
                            }
                            if need_dx {
                                let w = &layer.weights[k * d..(k + 1) * d];
                                for (dxi, &wi) in dx.row_mut(r).iter_mut().zip(w) {
                                    *dxi += g * wi;
                                }
                            }
                        }
                    }
                }
            }
            layer_grads.push(LayerGrads {
                weights: gw,
                bias: gb,
                gamma: g_gamma,
                beta: g_beta,
            });
            delta = dx;
        }
        layer_grads.reverse();
        Ok(Gradients {
            layers: layer_grads,
            head: head_grads,
        })
    }

    /// Trainable buffers: per BIR layer weights, bias, BN scale, BN shift;
    /// then weights and bias per head layer.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weights[..]);
            out.push(&mut l.bias[..]);
            out.push(&mut l.bn.gamma[..]);
            out.push(&mut l.bn.beta[..]);
        }
        for hl in &mut self.head.layers {
            out.push(&mut hl.weights[..]);
            out.push(&mut hl.bias[..]);
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.extend([&l.weights[..], &l.bias[..], &l.bn.gamma[..], &l.bn.beta[..]]);
        }
        for hl in &self.head.layers {
            out.extend([&hl.weights[..], &hl.bias[..]]);
        }
        out
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.width()],
                    gamma: vec![0.0; l.width()],
                    beta: vec![0.0; l.width()],
                })
                .collect(),
            head: self
                .head
                .layers
                .iter()
                .map(|hl| (vec![0.0; hl.weights.len()], vec![0.0; hl.bias.len()]))
                .collect(),
        }
    }

    /// Dense counterpart with the same depth, widths, BatchNorm, dropout and
    /// head shape. Every layer is fully connected with Kaiming-normal
    /// weights; BatchNorm and the head are freshly initialized.
    pub fn to_matched_mlp(&self, seed: u64) -> BirNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let d = l.input_dim;
                let normal = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("positive std");
                BirLayer {
                    input_dim: d,
                    connectivity: Connectivity::Dense,
                    weights: (0..l.width() * d).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; l.width()],
                    bn: BatchNorm::new(l.width()),
                    bindings: l.bindings.clone(),
                    dropout: l.dropout,
                }
            })
            .collect();
        let head_in = self.layers.last().map_or(self.input_dim, BirLayer::width);
        let head = DenseHead::new(
            head_in,
            self.n_classes(),
            &HeadConfig {
                hidden: self.head.hidden_widths(),
            },
            &mut rng,
        );
        BirNetwork {
            input_dim: self.input_dim,
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
            layers,
            head,
            trained: false,
        }
    }

    /// Layer `l` with eval-mode BatchNorm folded into the linear map:
    /// `(active weights, bias)`.
    pub(crate) fn folded_layer(&self, l: usize) -> (Vec<f64>, Vec<f64>) {
        let layer = &self.layers[l];
        let (scale, shift) = layer.bn.eval_affine();
        let per_unit = layer.fan_in();
        let weights = layer
            .weights
            .chunks(per_unit)
            .zip(&scale)
            .flat_map(|(w, s)| w.iter().map(move |v| v * s))
            .collect();
        let bias = layer
            .bias
            .iter()
            .zip(scale.iter().zip(&shift))
            .map(|(b, (s, t))| s * b + t)
            .collect();
        (weights, bias)
    }
}

fn batch_moments(z: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (m, h) = (z.rows(), z.cols());
    let mut mean = vec![0.0; h];
    for r in 0..m {
        for (acc, v) in mean.iter_mut().zip(z.row(r)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; h];
    for r in 0..m {
        for ((acc, v), mu) in var.iter_mut().zip(z.row(r)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    (mean, var)
}

#[cfg(test)]
mod tests;
