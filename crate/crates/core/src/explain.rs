//! Reading a trained network back out: per-class rules from first-layer
//! unit activity on held-out rows, and per-instance relevance traces by
//! ε-rule layer-wise relevance propagation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binarize::BinaryMatrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mining::Implication;
use crate::network::{BirNetwork, Connectivity};

/// Default support floor for reported rules.
pub const DEFAULT_MIN_SUPPORT: usize = 10;
/// Stabilizer of the ε-rule.
pub const LRP_EPSILON: f64 = 1e-6;

/// `rows × units` activity of the first BIR layer in eval mode: a unit is
/// active when its post-ReLU output is positive.
pub fn unit_activity(net: &BirNetwork, x: &Matrix) -> Result<BinaryMatrix> {
    if net.depth() == 0 {
        return Err(Error::invalid("network has no BIR layer"));
    }
    let acts = net.layer_activations(x, false)?;
    let a0 = &acts[0];
    Ok(BinaryMatrix::from_fn(a0.rows(), a0.cols(), |i, k| a0.get(i, k) > 0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRecord {
    pub unit: usize,
    pub implication: Implication,
    /// The implication over feature names, e.g. `A → ¬B`.
    pub rule: String,
    pub class: usize,
    pub class_name: String,
    pub precision: f64,
    pub recall: f64,
    pub lift: f64,
    /// Held-out rows on which the unit is active.
    pub support: usize,
}

/// Scores every first-layer unit against every class present in the
/// held-out labels. Units active on fewer than `min_support` rows are left
/// out. Sorted by class, then precision and lift (both descending), then
/// unit index.
pub fn extract_rules(
    net: &BirNetwork,
    x: &Matrix,
    labels: &[usize],
    min_support: usize,
) -> Result<Vec<RuleRecord>> {
    if x.rows() == 0 {
        return Err(Error::invalid("held-out set is empty"));
    }
    if labels.len() != x.rows() {
        return Err(Error::DimensionMismatch {
            what: "held-out labels",
            expected: x.rows(),
            found: labels.len(),
        });
    }
    let k = net.n_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let active = unit_activity(net, x)?;
    let n = x.rows();
    let mut class_count = vec![0usize; k];
    for &y in labels {
        class_count[y] += 1;
    }
    let layer = &net.layers[0];
    let mut out = Vec::new();
    for u in 0..layer.width() {
        let mut hits = vec![0usize; k];
        let mut support = 0;
        for (i, &y) in labels.iter().enumerate() {
            if active.get(i, u) {
                hits[y] += 1;
                support += 1;
            }
        }
        if support < min_support.max(1) {
            continue;
        }
        let binding = &layer.bindings[u];
        let rule = binding.render(&net.feature_names);
        for c in (0..k).filter(|&c| class_count[c] > 0) {
            let precision = hits[c] as f64 / support as f64;
            let prevalence = class_count[c] as f64 / n as f64;
            out.push(RuleRecord {
                unit: u,
                implication: binding.clone(),
                rule: rule.clone(),
                class: c,
                class_name: net.class_names[c].clone(),
                precision,
                recall: hits[c] as f64 / class_count[c] as f64,
                lift: precision / prevalence,
                support,
            });
        }
    }
    out.sort_by(|a, b| {
        a.class
            .cmp(&b.class)
            .then(b.precision.total_cmp(&a.precision))
            .then(b.lift.total_cmp(&a.lift))
            .then(a.unit.cmp(&b.unit))
    });
    Ok(out)
}

pub fn rules_to_csv(rules: &[RuleRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["class", "unit", "rule", "type", "precision", "recall", "lift", "support"])
        .map_err(csv_err)?;
    for r in rules {
        w.write_record([
            r.class_name.clone(),
            r.unit.to_string(),
            r.rule.clone(),
            r.implication.btype.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.lift.to_string(),
            r.support.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_rules_csv(rules: &[RuleRecord], path: &Path) -> Result<()> {
    std::fs::write(path, rules_to_csv(rules)?).map_err(|e| Error::io(path, e))
}

/// A linear map stored by output row: `z_j = Σ w_ji a_i + b_j`.
struct SparseLinear {
    rows: Vec<Vec<(usize, f64)>>,
    bias: Vec<f64>,
}

impl SparseLinear {
    fn apply(&self, a: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().map(|&(i, w)| w * a[i]).sum::<f64>() + b)
            .collect()
    }
}

fn stabilized(z: f64) -> f64 {
    if z >= 0.0 {
        z + LRP_EPSILON
    } else {
        z - LRP_EPSILON
    }
}

/// Every stage of the eval-mode network as a linear map: BIR layers with
/// BatchNorm folded in, then the head layers. ReLU follows all but the last.
fn stages(net: &BirNetwork) -> Vec<SparseLinear> {
    let mut out = Vec::new();
    for l in 0..net.depth() {
        let layer = &net.layers[l];
        let (w, bias) = net.folded_layer(l);
        let rows = match &layer.connectivity {
            Connectivity::Pairs(pairs) => pairs
                .iter()
                .enumerate()
                .map(|(k, &[a, b])| vec![(a, w[2 * k]), (b, w[2 * k + 1])])
                .collect(),
            Connectivity::Dense => w
                .chunks(layer.input_dim)
                .map(|r| r.iter().copied().enumerate().collect())
                .collect(),
        };
        out.push(SparseLinear { rows, bias });
    }
    for hl in &net.head.layers {
        let rows = hl
            .weights
            .chunks(hl.in_dim)
            .map(|r| r.iter().copied().enumerate().collect())
            .collect();
        out.push(SparseLinear {
            rows,
            bias: hl.bias.clone(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRelevance {
    pub unit: usize,
    pub binding: String,
    pub relevance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceTrace {
    pub instance: String,
    pub predicted: usize,
    pub predicted_name: String,
    pub target: usize,
    pub target_name: String,
    /// Softmax probability of the target class.
    pub probability: f64,
    pub target_logit: f64,
    /// Relevance of each BIR layer's units, layer 0 first.
    pub layers: Vec<Vec<UnitRelevance>>,
    /// Relevance of each input feature.
    pub inputs: Vec<f64>,
    /// One unit per BIR layer, layer 0 first: the most relevant top-layer
    /// unit followed downward by its strongest contributing input unit.
    pub chain: Vec<usize>,
    /// Set when the network was never trained.
    pub untrained: bool,
}

impl RelevanceTrace {
    /// Chain notation, e.g. `A → B ⇝ L0/u3 ↔ L0/u9 ⇝ class = X (0.70)`.
    pub fn chain_text(&self) -> String {
        let mut parts: Vec<String> = self
            .chain
            .iter()
            .enumerate()
            .map(|(l, &u)| self.layers[l][u].binding.clone())
            .collect();
        parts.push(format!("class = {} ({:.2})", self.target_name, self.probability));
        parts.join(" ⇝ ")
    }

    /// Human-readable report with the chain and the `top` most relevant
    /// units of every layer.
    pub fn to_text(&self, top: usize) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "instance: {}", self.instance);
        if self.untrained {
            let _ = writeln!(s, "warning: network is untrained");
        }
        let _ = writeln!(s, "predicted: {}", self.predicted_name);
        let _ = writeln!(
            s,
            "target: {} (p = {:.4}, logit = {:.6})",
            self.target_name, self.probability, self.target_logit
        );
        let _ = writeln!(s, "chain: {}", self.chain_text());
        for (l, units) in self.layers.iter().enumerate() {
            let mut order: Vec<&UnitRelevance> = units.iter().collect();
            order.sort_by(|a, b| b.relevance.abs().total_cmp(&a.relevance.abs()).then(a.unit.cmp(&b.unit)));
            let _ = writeln!(s, "layer {l}:");
            for u in order.into_iter().take(top) {
                let _ = writeln!(s, "  u{:<5} {:>12.6}  {}", u.unit, u.relevance, u.binding);
            }
        }
        s
    }
}

/// ε-rule relevance of `target`'s logit (the predicted class when `None`)
/// for one standardized instance.
pub fn lrp_explain(
    net: &BirNetwork,
    x: &[f64],
    instance: &str,
    target: Option<usize>,
) -> Result<RelevanceTrace> {
    if x.len() != net.input_dim {
        return Err(Error::DimensionMismatch {
            what: "instance width",
            expected: net.input_dim,
            found: x.len(),
        });
    }
    let k = net.n_classes();
    if let Some(t) = target.filter(|&t| t >= k) {
        return Err(Error::invalid(format!("class {t} out of range for {k} classes")));
    }
    let stages = stages(net);
    let last = stages.len() - 1;
    // acts[s] is the input to stage s; zs[s] its pre-activation output.
    let mut acts = vec![x.to_vec()];
    let mut zs = Vec::with_capacity(stages.len());
    for (s, st) in stages.iter().enumerate() {
        let z = st.apply(&acts[s]);
        if s < last {
            acts.push(z.iter().map(|v| v.max(0.0)).collect());
        }
        zs.push(z);
    }
    let logits = &zs[last];
    let predicted = (0..k).fold(0, |best, c| if logits[c] > logits[best] { c } else { best });
    let target = target.unwrap_or(predicted);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let probability = (logits[target] - max).exp() / denom;

    let mut relevance = vec![0.0; k];
    relevance[target] = logits[target];
    // rel[s] is the relevance at the input of stage s.
    let mut rel: Vec<Vec<f64>> = vec![Vec::new(); stages.len() + 1];
    rel[stages.len()] = relevance;
    for s in (0..stages.len()).rev() {
        let a = &acts[s];
        let mut r_in = vec![0.0; a.len()];
        for (j, row) in stages[s].rows.iter().enumerate() {
            let rj = rel[s + 1][j];
            if rj == 0.0 {
                continue;
            }
            let f = rj / stabilized(zs[s][j]);
            for &(i, w) in row {
                r_in[i] += a[i] * w * f;
            }
        }
        rel[s] = r_in;
    }

    let depth = net.depth();
    let mut layers = Vec::with_capacity(depth);
    let mut prev_names = net.feature_names.clone();
    for l in 0..depth {
        let bindings = &net.layers[l].bindings;
        let units = (0..net.layers[l].width())
            .map(|u| {
                let b = &bindings[u];
                UnitRelevance {
                    unit: u,
                    binding: b.render(&prev_names),
                    relevance: rel[l + 1][u],
                }
            })
            .collect();
        layers.push(units);
        prev_names = (0..net.layers[l].width()).map(|u| format!("L{l}/u{u}")).collect();
    }

    let mut chain = Vec::with_capacity(depth);
    if depth > 0 {
        let top = &rel[depth];
        let mut unit = (0..top.len()).fold(0, |best, u| if top[u] > top[best] { u } else { best });
        chain.push(unit);
        for l in (1..depth).rev() {
            // Message from `unit` in layer l to each of its inputs.
            let row = &stages[l].rows[unit];
            let f = rel[l + 1][unit] / stabilized(zs[l][unit]);
            let a = &acts[l];
            let (mut best, mut best_msg) = (row[0].0, f64::NEG_INFINITY);
            for &(i, w) in row {
                let msg = a[i] * w * f;
                if msg > best_msg {
                    best = i;
                    best_msg = msg;
                }
            }
            unit = best;
            chain.push(unit);
        }
        chain.reverse();
    }

    Ok(RelevanceTrace {
        instance: instance.to_string(),
        predicted,
        predicted_name: net.class_names[predicted].clone(),
        target,
        target_name: net.class_names[target].clone(),
        probability,
        target_logit: logits[target],
        layers,
        inputs: rel[0].clone(),
        chain,
        untrained: !net.trained,
    })
}
