//! Greedy layer-wise construction: binarize the current representation,
//! mine implications, keep at most `h_max` of them as the units of a new BIR
//! layer, then re-mine on that layer's post-activation outputs. Stops at
//! the depth limit or when fewer than `mu` implications survive.
//!
//! Construction happens on the untrained stack. The representation fed to
//! the next round uses full-batch BatchNorm statistics and no dropout, so
//! the architecture is a deterministic function of the data and seed.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binarize::{binarize, BinarizationModel, DEFAULT_DEGENERATE_FRACTION};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mining::{deduplicate_and_cap, mine_birs, Execution, ImplicationGraph, MiningConfig};
use crate::network::{build_bir_layer, BirLayer, BirNetwork, DenseHead, HeadConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub mining: MiningConfig,
    /// Maximum number of BIR layers.
    pub max_depth: usize,
    pub head: HeadConfig,
    /// Dropout rate stored on each layer; the trainer overrides it.
    pub dropout: f64,
    pub degenerate_fraction: f64,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            mining: MiningConfig::default(),
            max_depth: 2,
            head: HeadConfig::default(),
            dropout: 0.3,
            degenerate_fraction: DEFAULT_DEGENERATE_FRACTION,
            seed: 42,
        }
    }
}

/// One round of mining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub input_dim: usize,
    pub degenerate_inputs: usize,
    /// Edges in the mined graph.
    pub mined: usize,
    /// Edges left after deduplication and the `h_max` cap.
    pub kept: usize,
    /// Histogram of the kept edges by type.
    pub type_counts: [usize; 6],
    /// Whether a layer was appended.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionReport {
    pub rounds: Vec<LayerReport>,
}

impl ConstructionReport {
    /// Number of BIR layers built.
    pub fn depth(&self) -> usize {
        self.rounds.iter().filter(|r| r.accepted).count()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:>7} {:>6} {:>8} {:>7}  {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}  built",
            "layer", "inputs", "degen", "mined", "kept", "T0", "T1", "T2", "T3", "T4", "T5"
        );
        for r in &self.rounds {
            let t = r.type_counts;
            let _ = writeln!(
                out,
                "{:<6} {:>7} {:>6} {:>8} {:>7}  {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}  {}",
                r.layer,
                r.input_dim,
                r.degenerate_inputs,
                r.mined,
                r.kept,
                t[0],
                t[1],
                t[2],
                t[3],
                t[4],
                t[5],
                if r.accepted { "yes" } else { "no" }
            );
        }
        out
    }
}

/// The result of [`build_birdnet`].
#[derive(Debug, Clone)]
pub struct Construction {
    pub network: BirNetwork,
    pub report: ConstructionReport,
    /// The mined graph of every round, including a final rejected one.
    pub graphs: Vec<ImplicationGraph>,
}

/// Post-ReLU output of `layer` on `x` with BatchNorm normalizing by the
/// statistics of all rows of `x`.
fn batch_stat_activation(layer: &BirLayer, x: &Matrix, names: &[String]) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let probe_head = DenseHead::new(layer.width(), 2, &HeadConfig { hidden: vec![] }, &mut rng);
    let probe = BirNetwork::new(
        names.to_vec(),
        vec![String::new(), String::new()],
        vec![layer.clone()],
        probe_head,
    )?;
    let mut acts = probe.layer_activations(x, true)?;
    Ok(acts.remove(0))
}

/// Builds an untrained network over the (standardized) training rows `x`.
pub fn build_birdnet(
    x: &Matrix,
    feature_names: &[String],
    class_names: &[String],
    cfg: &BuildConfig,
    exec: Execution,
) -> Result<Construction> {
    cfg.mining.validate()?;
    if x.rows() < 2 || x.cols() < 2 {
        return Err(Error::invalid(format!(
            "construction needs at least 2 rows and 2 features, got {}×{}",
            x.rows(),
            x.cols()
        )));
    }
    if feature_names.len() != x.cols() {
        return Err(Error::DimensionMismatch {
            what: "feature names",
            expected: x.cols(),
            found: feature_names.len(),
        });
    }
    if class_names.len() < 2 {
        return Err(Error::invalid("at least 2 classes are required"));
    }
    if cfg.max_depth == 0 {
        return Err(Error::invalid("max_depth must be ≥ 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers: Vec<BirLayer> = Vec::new();
    let mut rounds = Vec::new();
    let mut graphs = Vec::new();
    let mut h = x.clone();
    let mut names = feature_names.to_vec();

    for l in 0..cfg.max_depth {
        let model = BinarizationModel::fit(&h, cfg.degenerate_fraction)?;
        let bits = binarize(&h, &model)?;
        let graph = mine_birs(&bits, &names, &cfg.mining, exec)?;
        let spec = deduplicate_and_cap(&graph, cfg.mining.h_max);
        let mut type_counts = [0; 6];
        for e in &spec {
            type_counts[e.btype.index()] += 1;
        }
        let accepted = spec.len() >= cfg.mining.mu && !spec.is_empty();
        rounds.push(LayerReport {
            layer: l,
            input_dim: h.cols(),
            degenerate_inputs: model.degenerate.iter().filter(|&&d| d).count(),
            mined: graph.edges.len(),
            kept: spec.len(),
            type_counts,
            accepted,
        });
        graphs.push(graph);
        if !accepted {
            if l == 0 {
                return Err(Error::NoLayers {
                    found: spec.len(),
                    floor: cfg.mining.mu,
                });
            }
            break;
        }
        let layer = build_bir_layer(&spec, h.cols(), cfg.dropout, &mut rng)?;
        let next_names: Vec<String> = spec
            .iter()
            .enumerate()
            .map(|(k, b)| format!("L{l}/u{k}:{}({},{})", b.btype, names[b.source], names[b.target]))
            .collect();
        if l + 1 < cfg.max_depth {
            h = batch_stat_activation(&layer, &h, &names)?;
        }
        names = next_names;
        layers.push(layer);
    }

    let width = layers.last().map_or(x.cols(), BirLayer::width);
    let head = DenseHead::new(width, class_names.len(), &cfg.head, &mut rng);
    let network = BirNetwork::new(feature_names.to_vec(), class_names.to_vec(), layers, head)?;
    Ok(Construction {
        network,
        report: ConstructionReport { rounds },
        graphs,
    })
}
