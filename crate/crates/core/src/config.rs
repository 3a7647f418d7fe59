//! TOML run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterSpec, PlacementConfig, Variant};
use crate::codec::{CodecConfig, QuantMode};
use crate::data::{DatasetConfig, SyntheticDataset};
use crate::entropy::CodingMode;
use crate::error::{Error, Result};
use crate::scalable::MaskGeneratorConfig;
use crate::task::TaskModelConfig;
use crate::training::Schedule;

/// Base-codec grid: one codec per `lambdas` entry, each warm-started from
/// the previous one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseSection {
    /// Weight of `255^2 * MSE`; index `i` is lambda id `i`.
    pub lambdas: Vec<f64>,
    pub first_epochs: usize,
    pub warm_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decode_quant: QuantMode,
    pub train_len: usize,
    /// Existing base checkpoints, one per lambda id, to validate and copy
    /// instead of training.
    pub import: Vec<PathBuf>,
}

impl Default for BaseSection {
    fn default() -> Self {
        BaseSection {
            lambdas: vec![0.02, 0.01, 0.005, 0.0025],
            first_epochs: 20,
            warm_epochs: 6,
            batch_size: 4,
            lr: 1e-3,
            decode_quant: QuantMode::Noise,
            train_len: 256,
            import: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_len: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            widths: TaskModelConfig::default().widths,
            epochs: 5,
            batch_size: 16,
            lr: 3e-3,
            train_len: 1024,
        }
    }
}

/// Adapter training; `lambdas[i]` pairs with base lambda id `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambdas: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub train_len: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lambdas: vec![100.0; 4],
            epochs: 2,
            batch_size: 8,
            base_lr: 1e-3,
            schedule: Schedule::classification(),
            train_len: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalableSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub generator: MaskGeneratorConfig,
}

impl Default for ScalableSection {
    fn default() -> Self {
        ScalableSection {
            epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            generator: MaskGeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub eval_len: usize,
    /// Apply `ln(1 + v)` to PSD maps.
    pub psd_log: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            eval_len: 128,
            psd_log: true,
        }
    }
}

/// Sweep axes; the grid is their Cartesian product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub middle_dims: Vec<usize>,
    pub variants: Vec<Variant>,
    pub placements: Vec<PlacementConfig>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            middle_dims: vec![1, 32, 64],
            variants: vec![Variant::SfmaParallel],
            placements: vec![PlacementConfig::default()],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub mode: CodingMode,
    pub dataset: DatasetConfig,
    pub codec: CodecConfig,
    pub base: BaseSection,
    pub task: TaskSection,
    pub adapter: AdapterSpec,
    pub placement: PlacementConfig,
    pub train: TrainSection,
    pub scalable: ScalableSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            mode: CodingMode::Machine,
            dataset: DatasetConfig::default(),
            codec: CodecConfig::default(),
            base: BaseSection::default(),
            task: TaskSection::default(),
            adapter: AdapterSpec::default(),
            placement: PlacementConfig::default(),
            train: TrainSection::default(),
            scalable: ScalableSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn lambda_count(&self) -> usize {
        self.base.lambdas.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m));
        self.codec.validate()?;
        SyntheticDataset::new(self.dataset.clone())?;
        self.placement.validate()?;
        let n = self.base.lambdas.len();
        if n == 0 || n > u8::MAX as usize {
            return bad("base.lambdas must hold between 1 and 255 values");
        }
        if !self.base.import.is_empty() && self.base.import.len() != n {
            return bad("base.import must list one checkpoint per lambda");
        }
        if self.train.lambdas.len() != n {
            return bad("train.lambdas must pair one-to-one with base.lambdas");
        }
        if !self
            .base
            .lambdas
            .iter()
            .chain(&self.train.lambdas)
            .all(|&l| positive(l))
        {
            return bad("lambdas must be positive and finite");
        }
        if self.base.batch_size == 0
            || self.task.batch_size == 0
            || self.train.batch_size == 0
            || self.scalable.batch_size == 0
        {
            return bad("batch sizes must be positive");
        }
        if !positive(self.base.lr)
            || !positive(self.task.lr)
            || !positive(self.train.base_lr)
            || !positive(self.scalable.lr)
        {
            return bad("learning rates must be positive");
        }
        if self.base.train_len == 0 || self.task.train_len == 0 || self.train.train_len == 0 || self.eval.eval_len == 0
        {
            return bad("training and evaluation set sizes must be positive");
        }
        if self.task.widths.is_empty() || self.task.widths.contains(&0) {
            return bad("task.widths must be non-empty and positive");
        }
        if self.adapter.middle_dim == 0 || !self.adapter.factor.is_finite() {
            return bad("adapter.middle_dim must be positive and factor finite");
        }
        if !positive(self.scalable.generator.temperature) || self.scalable.generator.hidden == 0 {
            return bad("scalable.generator needs positive temperature and hidden width");
        }
        let a = &self.ablate;
        if a.middle_dims.is_empty() || a.variants.is_empty() || a.placements.is_empty() || a.seeds.is_empty() {
            return bad("ablation axes must be non-empty");
        }
        if a.middle_dims.contains(&0) {
            return bad("ablate.middle_dims must be positive");
        }
        for p in &a.placements {
            p.validate()?;
        }
        Ok(())
    }

    pub fn task_model(&self) -> TaskModelConfig {
        TaskModelConfig {
            widths: self.task.widths.clone(),
            classes: self.dataset.classes,
        }
    }

    pub fn lambda(&self, id: u8) -> Result<(f64, f64)> {
        let i = id as usize;
        match (self.base.lambdas.get(i), self.train.lambdas.get(i)) {
            (Some(&b), Some(&t)) => Ok((b, t)),
            _ => Err(Error::config(format!(
                "lambda id {id} outside the grid of {}",
                self.lambda_count()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_files_and_rejections() {
        let c =
            RunConfig::from_toml("seed = 4\nmode = \"scalable\"\n[codec]\nn_channels = 8\nm_channels = 8\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.mode, CodingMode::Scalable);
        assert_eq!(c.codec.m_channels, 8);
        assert!(matches!(RunConfig::from_toml("sede = 4"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[codec]\nwidth = 3").is_err());
        assert!(RunConfig::from_toml("[train]\nlambdas = [1.0]").is_err());
        assert!(RunConfig::from_toml("[base]\nlambdas = [0.01, -1.0]\n[train]\nlambdas = [1.0, 2.0]").is_err());
        assert!(RunConfig::from_toml("[ablate]\nmiddle_dims = []").is_err());
        assert_ne!(c.hash(), RunConfig::default().hash());
    }
}
