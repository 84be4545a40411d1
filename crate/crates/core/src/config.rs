//! Run configuration loaded from TOML.
//!
//! Unknown keys anywhere in the file are errors. Relative paths are taken as
//! given, i.e. relative to the working directory of the process.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugPolicy;
use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::layers::{DropoutMode, DropoutPosition};
use crate::model::{BlockKind, BlockSpec, ModelConfig};
use crate::optim::{OptimizerConfig, OptimizerKind, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Train and score on the manifest grades as they are.
    Multiclass,
    /// Collapse grades to `grade >= binarize_threshold` before anything else.
    Binarized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    /// Image directory; defaults to the manifest's directory.
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    #[serde(default)]
    pub val_root: Option<PathBuf>,
    /// Hold out fold 0 of a stratified k-fold split for evaluation.
    #[serde(default)]
    pub holdout_k: Option<usize>,
}

impl DataConfig {
    pub fn root(&self) -> PathBuf {
        self.root.clone().unwrap_or_else(|| parent_dir(&self.manifest))
    }

    pub fn val_root(&self) -> Option<PathBuf> {
        let m = self.val_manifest.as_ref()?;
        Some(self.val_root.clone().unwrap_or_else(|| parent_dir(m)))
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Dropout setting applied to every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockDropout {
    None,
    Spatial,
    Regular,
}

fn d_preset() -> String {
    "tiny".into()
}

/// A named block table plus optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_preset")]
    pub preset: String,
    /// Replaces the preset's block table.
    #[serde(default)]
    pub blocks: Option<Vec<BlockSpec>>,
    #[serde(default)]
    pub stem_channels: Option<usize>,
    #[serde(default)]
    pub head_channels: Option<usize>,
    #[serde(default)]
    pub width_multiplier: Option<f64>,
    #[serde(default)]
    pub activation: Option<Activation>,
    #[serde(default)]
    pub block_kind: Option<BlockKind>,
    #[serde(default)]
    pub se: Option<bool>,
    #[serde(default)]
    pub se_reduction: Option<usize>,
    #[serde(default)]
    pub dropout: Option<BlockDropout>,
    #[serde(default)]
    pub dropout_position: Option<DropoutPosition>,
    #[serde(default)]
    pub dropout_rate: Option<f64>,
    #[serde(default)]
    pub head_dropout: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: d_preset(),
            blocks: None,
            stem_channels: None,
            head_channels: None,
            width_multiplier: None,
            activation: None,
            block_kind: None,
            se: None,
            se_reduction: None,
            dropout: None,
            dropout_position: None,
            dropout_rate: None,
            head_dropout: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, num_classes: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.preset, num_classes)?;
        if let Some(b) = &self.blocks {
            cfg.blocks = b.clone();
        }
        if let Some(v) = self.stem_channels {
            cfg.stem_channels = v;
        }
        if let Some(v) = self.head_channels {
            cfg.head_channels = v;
        }
        if let Some(v) = self.width_multiplier {
            cfg.width_multiplier = v;
        }
        if let Some(v) = self.activation {
            cfg.activation = v;
        }
        if let Some(v) = self.block_kind {
            cfg.block_kind = v;
        }
        if let Some(v) = self.se_reduction {
            cfg.se_reduction = v;
        }
        if let Some(v) = self.head_dropout {
            cfg.head_dropout = v;
        }
        for b in &mut cfg.blocks {
            if let Some(se) = self.se {
                b.se = se;
            }
            if let Some(r) = self.dropout_rate {
                b.dropout_rate = r;
            }
            match self.dropout {
                Some(BlockDropout::None) => b.dropout_position = None,
                Some(mode) => {
                    b.dropout_mode = if mode == BlockDropout::Spatial {
                        DropoutMode::Spatial
                    } else {
                        DropoutMode::Regular
                    };
                    b.dropout_position = Some(
                        self.dropout_position
                            .or(b.dropout_position)
                            .unwrap_or(DropoutPosition::AfterProject),
                    );
                }
                None => {
                    if let Some(p) = self.dropout_position {
                        b.dropout_position = Some(p);
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn d_base_lr() -> f64 {
    0.001
}
fn d_warmup() -> usize {
    20
}

/// Schedule without the epoch count, which comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub min_lr: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            base_lr: d_base_lr(),
            warmup_epochs: d_warmup(),
            min_lr: 0.0,
        }
    }
}

fn d_epochs() -> usize {
    1000
}
fn d_batch() -> usize {
    32
}
fn d_task() -> Task {
    Task::Multiclass
}
fn d_threshold() -> usize {
    2
}
fn d_eval_every() -> usize {
    1
}
fn d_output() -> PathBuf {
    PathBuf::from("runs/default")
}
fn d_optimizer() -> OptimizerConfig {
    OptimizerConfig::new(OptimizerKind::AdamP)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Recorded with the run. Every kernel already reduces in a fixed order,
    /// so results do not depend on this flag or on the thread count.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "d_task")]
    pub task: Task,
    #[serde(default = "d_threshold")]
    pub binarize_threshold: usize,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "d_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub aug: AugPolicy,
}

impl RunConfig {
    /// Defaults everywhere except the training manifest.
    pub fn with_manifest(manifest: impl Into<PathBuf>) -> Self {
        Self {
            seed: 0,
            epochs: d_epochs(),
            batch_size: d_batch(),
            deterministic: false,
            task: d_task(),
            binarize_threshold: d_threshold(),
            eval_every: d_eval_every(),
            output_dir: d_output(),
            data: DataConfig {
                manifest: manifest.into(),
                root: None,
                val_manifest: None,
                val_root: None,
                holdout_k: None,
            },
            model: ModelSection::default(),
            optimizer: d_optimizer(),
            schedule: ScheduleSection::default(),
            aug: AugPolicy::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.schedule.base_lr,
            warmup_epochs: self.schedule.warmup_epochs,
            total_epochs: self.epochs,
            min_lr: self.schedule.min_lr,
        }
    }

    /// Everything that can be checked before the data is read. The class count
    /// is only known from the manifest, so the model table is re-validated there.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be ≥ 1".into()));
        }
        if self.task == Task::Binarized && self.binarize_threshold == 0 {
            return Err(Error::Config("binarize_threshold must be ≥ 1".into()));
        }
        if let Some(k) = self.data.holdout_k {
            if k < 2 {
                return Err(Error::Config("holdout_k must be ≥ 2".into()));
            }
            if self.data.val_manifest.is_some() {
                return Err(Error::Config(
                    "set either data.val_manifest or data.holdout_k, not both".into(),
                ));
            }
        }
        self.schedule().validate()?;
        self.optimizer.validate()?;
        self.aug.validate()?;
        self.model.resolve(2)?;
        Ok(())
    }

    /// Digest of every field that affects training. The output directory and
    /// the deterministic flag are excluded so a run can be resumed elsewhere.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.deterministic = false;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\nmanifest = \"m.csv\"\n";

    #[test]
    fn minimal_file_takes_defaults() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.epochs, 1000);
        assert_eq!(c.optimizer.name, OptimizerKind::AdamP);
        assert_eq!(c.schedule.base_lr, 0.001);
        assert_eq!(c.schedule.warmup_epochs, 20);
        assert_eq!(c.data.root(), PathBuf::from(""));
        assert_eq!(c, RunConfig::with_manifest("m.csv"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "bacth_size = 4\n[data]\nmanifest = \"m.csv\"\n",
            "[data]\nmanifest = \"m.csv\"\nroots = \"x\"\n",
            "[data]\nmanifest = \"m.csv\"\n[model]\nactivaton = \"silu\"\n",
            "[data]\nmanifest = \"m.csv\"\n[aug.randaugment]\nops = 2\n",
        ] {
            let e = RunConfig::from_toml_str(text).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::with_manifest("data/m.csv");
        c.model.activation = Some(Activation::Silu);
        c.model.dropout = Some(BlockDropout::Regular);
        c.model.dropout_position = Some(DropoutPosition::AfterSe);
        c.data.holdout_k = Some(4);
        let back = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::with_manifest("m.csv");
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.deterministic = true;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn overrides_reach_every_block() {
        let mut s = ModelSection::default();
        s.dropout = Some(BlockDropout::None);
        s.block_kind = Some(BlockKind::PlainResidual);
        let cfg = s.resolve(5).unwrap();
        assert!(cfg.blocks.iter().all(|b| b.dropout_position.is_none()));
        assert_eq!(cfg.block_kind, BlockKind::PlainResidual);
        s.dropout = Some(BlockDropout::Spatial);
        s.dropout_position = Some(DropoutPosition::AfterExpand);
        let cfg = s.resolve(5).unwrap();
        assert!(cfg
            .blocks
            .iter()
            .all(|b| b.dropout_position == Some(DropoutPosition::AfterExpand)
                && b.dropout_mode == DropoutMode::Spatial));
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut c = RunConfig::with_manifest("m.csv");
        c.schedule.warmup_epochs = c.epochs;
        assert!(c.validate().is_err());
        let mut c = RunConfig::with_manifest("m.csv");
        c.model.preset = "resnet".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::with_manifest("m.csv");
        c.model.dropout_rate = Some(1.0);
        assert!(c.validate().is_err());
    }
}
