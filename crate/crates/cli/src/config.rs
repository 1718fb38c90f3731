use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use attnlipkit::{LayerConfig, LayerKind, ModelConfig, Normalization, OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Citation,
    Trees,
    /// A `.graph.txt` file named by `params.path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub seed: u64,
    pub params: DatasetParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub nodes: usize,
    pub classes: usize,
    pub homophily: f64,
    pub feature_dim: usize,
    /// Fraction of non-train nodes whose features are zeroed.
    pub missing_p: f64,
    pub depth: usize,
    pub num_trees: usize,
    /// Tree depths swept by `trees-experiment`.
    pub depths: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NormChoice {
    None,
    Lip,
    Entropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub kind: LayerKind,
    pub heads: usize,
    pub hidden: usize,
    pub normalization: NormChoice,
    /// Target efficiency for entropy normalization and calibration.
    #[serde(rename = "T")]
    pub target_eta: f64,
    /// Score bound used by the normalized rows of `verify-bounds`.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { kind: DatasetKind::Citation, seed: 0, params: DatasetParams::default() }
    }
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            nodes: 300,
            classes: 3,
            homophily: 0.9,
            feature_dim: 16,
            missing_p: 0.0,
            depth: 4,
            num_trees: 500,
            depths: vec![4, 5],
            path: None,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 2,
            kind: LayerKind::Gat,
            heads: 1,
            hidden: 16,
            normalization: NormChoice::None,
            target_eta: 0.5,
            alpha: 1.0,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, lr: t.lr, optimizer: t.optimizer, weight_decay: t.weight_decay, seeds: vec![0] }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl ModelSection {
    pub fn normalization(&self) -> Normalization {
        match self.normalization {
            NormChoice::None => Normalization::None,
            NormChoice::Lip => Normalization::Lipschitz,
            NormChoice::Entropy => Normalization::NeighborEntropy { target: self.target_eta },
        }
    }

    pub fn model_config(&self, in_dim: usize, num_classes: usize) -> ModelConfig {
        let layer = LayerConfig { heads: self.heads, ..LayerConfig::new(self.kind, self.hidden) }
            .with_normalization(self.normalization());
        ModelConfig::stack(in_dim, num_classes, layer, self.layers)
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            optimizer: self.optimizer,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed,
            track_gradient_flow: false,
        }
    }
}

/// Overlays `file` on `base` key by key; tables merge recursively, everything else is replaced.
fn merge(base: &mut toml::Value, file: toml::Value) {
    match (base, file) {
        (toml::Value::Table(b), toml::Value::Table(f)) => {
            for (k, v) in f {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Subcommand defaults overlaid with the file at `path`. Unknown keys are rejected.
    pub fn load(defaults: ExperimentConfig, path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(defaults) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut base = toml::Value::try_from(&defaults)?;
        merge(&mut base, file);
        base.try_into().with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.train.seeds.is_empty() {
            bail!("train.seeds must not be empty");
        }
        if self.model.layers == 0 {
            bail!("model.layers must be positive");
        }
        if self.dataset.kind == DatasetKind::File && self.dataset.params.path.is_none() {
            bail!("dataset kind `file` needs params.path");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(text: &str) -> anyhow::Result<ExperimentConfig> {
        let dir = tempfile::tempdir()?;
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text)?;
        ExperimentConfig::load(ExperimentConfig::default(), Some(&p))
    }

    #[test]
    fn file_overrides_defaults() {
        let c = load_str("[model]\nlayers = 7\nT = 0.3\n[train]\nseeds = [3, 4]\n").unwrap();
        assert_eq!(c.model.layers, 7);
        assert_eq!(c.model.target_eta, 0.3);
        assert_eq!(c.model.hidden, ModelSection::default().hidden);
        assert_eq!(c.train.seeds, vec![3, 4]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(load_str("[model]\nlayerz = 7\n").is_err());
        assert!(load_str("[extra]\na = 1\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
