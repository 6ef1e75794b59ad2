use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mining::Implication;

/// Magnitude multiplier for the initial `|N(0, 1)|` weights of BIR units.
pub const BIR_INIT_SCALE: f64 = 0.5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Which input columns each unit reads. `Pairs` is the implication mask
/// (exactly two columns per unit); `Dense` connects every unit to every
/// input and is used by the matched dense baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Connectivity {
    Pairs(Vec<[usize; 2]>),
    Dense,
}

/// Batch normalization over a layer's units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// `(scale, shift)` such that eval-mode BN is `y = scale · z + shift`.
    pub fn eval_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = scale
            .iter()
            .zip(&self.running_mean)
            .zip(&self.beta)
            .map(|((s, m), b)| b - s * m)
            .collect();
        (scale, shift)
    }
}

/// A masked linear layer followed by BatchNorm, ReLU and dropout. Unit `k`
/// is bound to `bindings[k]` and, under `Pairs` connectivity, reads only
/// that implication's source and target columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BirLayer {
    pub input_dim: usize,
    pub connectivity: Connectivity,
    /// Mask-allowed weights only, row-major: two per unit for `Pairs`
    /// (source then target), `input_dim` per unit for `Dense`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn: BatchNorm,
    pub bindings: Vec<Implication>,
    pub dropout: f64,
}

impl BirLayer {
    pub fn width(&self) -> usize {
        self.bias.len()
    }

    pub fn fan_in(&self) -> usize {
        match self.connectivity {
            Connectivity::Pairs(_) => 2,
            Connectivity::Dense => self.input_dim,
        }
    }

    pub fn active_weight_count(&self) -> usize {
        self.weights.len()
    }

    /// Active weights over the nominal `h × d`.
    pub fn active_weight_fraction(&self) -> f64 {
        self.active_weight_count() as f64 / (self.width() * self.input_dim) as f64
    }

    /// Row-major `h × d` mask.
    pub fn mask(&self) -> Vec<bool> {
        let (h, d) = (self.width(), self.input_dim);
        match &self.connectivity {
            Connectivity::Dense => vec![true; h * d],
            Connectivity::Pairs(pairs) => {
                let mut m = vec![false; h * d];
                for (k, &[a, b]) in pairs.iter().enumerate() {
                    m[k * d + a] = true;
                    m[k * d + b] = true;
                }
                m
            }
        }
    }

    /// Row-major `h × d` matrix `W ⊙ M`.
    pub fn dense_weights(&self) -> Vec<f64> {
        scatter_dense(self, &self.weights)
    }

    /// `z = (W ⊙ M) x + b` for every row of `x`.
    pub fn linear(&self, x: &Matrix) -> Matrix {
        let h = self.width();
        let mut z = Matrix::zeros(x.rows(), h);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let zr = z.row_mut(r);
            match &self.connectivity {
                Connectivity::Pairs(pairs) => {
                    for (k, &[a, b]) in pairs.iter().enumerate() {
                        zr[k] = self.weights[2 * k] * xr[a] + self.weights[2 * k + 1] * xr[b] + self.bias[k];
                    }
                }
                Connectivity::Dense => {
                    let d = self.input_dim;
                    for k in 0..h {
                        let w = &self.weights[k * d..(k + 1) * d];
                        zr[k] = dot(w, xr) + self.bias[k];
                    }
                }
            }
        }
        z
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let h = self.bias.len();
        let expect = match &self.connectivity {
            Connectivity::Pairs(pairs) => {
                if pairs.len() != h {
                    return Err(Error::Format(format!(
                        "layer has {} index pairs for {h} units",
                        pairs.len()
                    )));
                }
                if pairs.iter().flatten().any(|&c| c >= self.input_dim) {
                    return Err(Error::Format("mask index beyond input width".into()));
                }
                2 * h
            }
            Connectivity::Dense => h * self.input_dim,
        };
        let lens = [
            self.bn.gamma.len(),
            self.bn.beta.len(),
            self.bn.running_mean.len(),
            self.bn.running_var.len(),
            self.bindings.len(),
        ];
        if self.weights.len() != expect || lens.iter().any(|&l| l != h) {
            return Err(Error::Format("layer parameter lengths disagree".into()));
        }
        Ok(())
    }
}

pub(crate) fn scatter_dense(layer: &BirLayer, active: &[f64]) -> Vec<f64> {
    match &layer.connectivity {
        Connectivity::Dense => active.to_vec(),
        Connectivity::Pairs(pairs) => {
            let d = layer.input_dim;
            let mut w = vec![0.0; layer.width() * d];
            for (k, &[a, b]) in pairs.iter().enumerate() {
                w[k * d + a] = active[2 * k];
                w[k * d + b] = active[2 * k + 1];
            }
            w
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds one BIR layer from an ordered implication list over `d` inputs.
/// Each unit gets two weights of magnitude `BIR_INIT_SCALE · |N(0, 1)|`
/// whose signs follow the implication type: T0/T4 `(+, +)`, T1 `(−, −)`,
/// T2/T5 `(+, −)`, T3 `(−, +)`.
pub fn build_bir_layer(
    spec: &[Implication],
    d: usize,
    dropout: f64,
    rng: &mut dyn RngCore,
) -> Result<BirLayer> {
    if spec.is_empty() {
        return Err(Error::invalid("cannot build a BIR layer from no implications"));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::invalid(format!("dropout {dropout} not in [0, 1)")));
    }
    let mut pairs = Vec::with_capacity(spec.len());
    let mut weights = Vec::with_capacity(2 * spec.len());
    for imp in spec {
        if imp.source >= d || imp.target >= d {
            return Err(Error::invalid(format!(
                "implication ({}, {}) out of range for {d} inputs",
                imp.source, imp.target
            )));
        }
        if imp.source == imp.target {
            return Err(Error::invalid("implication source equals target"));
        }
        pairs.push([imp.source, imp.target]);
        let (ss, st) = imp.btype.weight_signs();
        let ms: f64 = rng.sample(StandardNormal);
        let mt: f64 = rng.sample(StandardNormal);
        weights.push(ss * BIR_INIT_SCALE * ms.abs());
        weights.push(st * BIR_INIT_SCALE * mt.abs());
    }
    let h = spec.len();
    Ok(BirLayer {
        input_dim: d,
        connectivity: Connectivity::Pairs(pairs),
        weights,
        bias: vec![0.0; h],
        bn: BatchNorm::new(h),
        bindings: spec.to_vec(),
        dropout,
    })
}

/// Dense layer `y = W x + b`, `W` row-major `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    /// Kaiming-normal weights, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut dyn RngCore) -> Self {
        let std = (2.0 / in_dim.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weights = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows(), self.out_dim);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            for (o, out) in yr.iter_mut().enumerate() {
                *out = dot(&self.weights[o * self.in_dim..(o + 1) * self.in_dim], xr) + self.bias[o];
            }
        }
        y
    }
}

/// Hidden widths of the dense classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: vec![32] }
    }
}

/// Dense layers with ReLU between them; the last layer emits class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseHead {
    pub layers: Vec<DenseLayer>,
}

impl DenseHead {
    pub fn new(input: usize, classes: usize, cfg: &HeadConfig, rng: &mut dyn RngCore) -> Self {
        let mut layers = Vec::with_capacity(cfg.hidden.len() + 1);
        let mut prev = input;
        for &w in cfg.hidden.iter().chain(std::iter::once(&classes)) {
            layers.push(DenseLayer::new(prev, w, rng));
            prev = w;
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.out_dim).collect()
    }
}
