//! Self-contained model files: preprocessing (feature selection and
//! standardization), the configuration that produced the model, and the
//! network. Stored as JSON; floats round-trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::builder::{BuildConfig, ConstructionReport};
use crate::dataio::Standardizer;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{BirNetwork, Connectivity};
use crate::trainer::TrainConfig;

pub const MODEL_FORMAT: &str = "birdnet-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Maps raw dataset columns to network inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// Every feature column of the dataset the model was fitted on.
    pub source_features: Vec<String>,
    /// Positions in `source_features` fed to the network, in input order.
    pub selected: Vec<usize>,
    pub standardizer: Standardizer,
}

impl Preprocessing {
    /// Selects and standardizes the raw columns of `raw`.
    pub fn apply(&self, raw: &Matrix) -> Result<Matrix> {
        if raw.cols() != self.source_features.len() {
            return Err(Error::DimensionMismatch {
                what: "raw feature columns",
                expected: self.source_features.len(),
                found: raw.cols(),
            });
        }
        self.standardizer.apply(&raw.select_cols(&self.selected))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub format_version: u32,
    pub crate_version: String,
    pub preprocessing: Preprocessing,
    pub build: BuildConfig,
    pub train: Option<TrainConfig>,
    pub construction: Option<ConstructionReport>,
    /// Set for the dense baseline.
    pub matched_mlp: bool,
    pub network: BirNetwork,
}

impl ModelFile {
    pub fn new(preprocessing: Preprocessing, build: BuildConfig, network: BirNetwork) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            format_version: MODEL_FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            preprocessing,
            build,
            train: None,
            construction: None,
            matched_mlp: false,
            network,
        }
    }

    /// Eval-mode logits for raw (unprocessed) rows.
    pub fn predict_raw(&self, raw: &Matrix) -> Result<Matrix> {
        self.network.predict(&self.preprocessing.apply(raw)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Format(format!("unexpected format tag '{}'", self.format)));
        }
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        self.network.validate()?;
        let p = &self.preprocessing;
        let m = p.selected.len();
        if m != self.network.input_dim
            || p.standardizer.means.len() != m
            || p.standardizer.stddevs.len() != m
            || p.standardizer.constant.len() != m
        {
            return Err(Error::Format("preprocessing width disagrees with the network".into()));
        }
        if p.selected.iter().any(|&j| j >= p.source_features.len()) {
            return Err(Error::Format("selected feature index out of range".into()));
        }
        for (k, &j) in p.selected.iter().enumerate() {
            if p.source_features[j] != self.network.feature_names[k] {
                return Err(Error::Format(format!(
                    "input {k} is '{}' but preprocessing selects '{}'",
                    self.network.feature_names[k], p.source_features[j]
                )));
            }
        }
        for (l, layer) in self.network.layers.iter().enumerate() {
            if let Connectivity::Pairs(pairs) = &layer.connectivity {
                let consistent = pairs
                    .iter()
                    .zip(&layer.bindings)
                    .all(|(&[a, b], imp)| a == imp.source && b == imp.target);
                if !consistent {
                    return Err(Error::Format(format!("layer {l} mask disagrees with its bindings")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ModelFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::{BirType, Implication};
    use crate::network::{build_bir_layer, DenseHead, HeadConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_model() -> ModelFile {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec: Vec<Implication> = (0..4)
            .map(|k| Implication {
                source: k,
                target: (k + 1) % 4,
                btype: BirType::ALL[k],
                log_p: -17.123456789012345,
                exceptions: k,
                exception_fraction: 0.1 / 3.0,
                antecedent_support: 30,
            })
            .collect();
        let mut layer = build_bir_layer(&spec, 4, 0.3, &mut rng).unwrap();
        layer.bn.running_mean = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let head = DenseHead::new(4, 3, &HeadConfig::default(), &mut rng);
        let names: Vec<String> = ["b", "d", "a", "c"].iter().map(|s| s.to_string()).collect();
        let net = BirNetwork::new(names, vec!["x".into(), "y".into(), "z".into()], vec![layer], head).unwrap();
        let pre = Preprocessing {
            source_features: ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect(),
            selected: vec![1, 3, 0, 2],
            standardizer: Standardizer {
                means: vec![0.1, 0.2, 0.3, 1.0 / 3.0],
                stddevs: vec![1.0, 2.0, 0.7, 1.1],
                constant: vec![false; 4],
            },
        };
        let mut m = ModelFile::new(pre, BuildConfig::default(), net);
        m.train = Some(TrainConfig::default());
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let back = ModelFile::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_json().unwrap(), model.to_json().unwrap());
        let raw = Matrix::from_rows(&[vec![0.5, -1.0, 2.0, 0.25, 9.0]]).unwrap();
        assert_eq!(back.predict_raw(&raw).unwrap(), model.predict_raw(&raw).unwrap());
        assert_eq!(back.network.layers[0].bindings, model.network.layers[0].bindings);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = sample_model();
        let mut bad = model.clone();
        bad.preprocessing.selected = vec![0, 1, 2, 3];
        assert!(ModelFile::from_json(&bad.to_json().unwrap()).is_err());
        let mut bad = model.clone();
        bad.network.layers[0].bindings[0].target = 3;
        assert!(ModelFile::from_json(&bad.to_json().unwrap()).is_err());
        let mut bad = model;
        bad.format_version = 99;
        assert!(ModelFile::from_json(&bad.to_json().unwrap()).is_err());
        assert!(ModelFile::from_json("{").is_err());
    }
}
