//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterConfig, BackboneConfig};
use crate::error::{io_at, Error, Result};
use crate::lcd::{LayerSelection, LcdConfig};
use crate::mti::MtiConfig;
use crate::tasks::{ClipSpec, MetricKind, SegSpec};
use crate::tensor::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    SegmentSingle,
    SegmentMulti,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::SegmentSingle => "segment_single",
            Task::SegmentMulti => "segment_multi",
        }
    }

    pub fn is_segmentation(self) -> bool {
        self != Task::Classify
    }

    pub fn metric(self) -> MetricKind {
        match self {
            Task::Classify => MetricKind::SegmentAccuracy,
            _ => MetricKind::Miou,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// frozen backbone, meta-token modules trained
    #[default]
    Mettle,
    /// adapters inside the backbone, gradients through every layer
    Adapter,
}

impl Topology {
    pub fn name(self) -> &'static str {
        match self {
            Topology::Mettle => "mettle",
            Topology::Adapter => "adapter",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[schemars(range(min = 0.0))]
    pub lr: f64,
    #[schemars(range(min = 1))]
    pub epochs: usize,
    #[schemars(range(min = 1))]
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// run the frozen backbone once per clip and reuse its features
    pub cache_features: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 200,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cache_features: true,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is allowed here so a run can be checked to leave weights
    /// untouched; experiment configs require `lr > 0`.
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err("lr must be finite and nonnegative");
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return err("eps must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    #[schemars(range(min = 1))]
    pub n_train: usize,
    pub n_test: usize,
    pub classify: ClipSpec,
    /// `multi_source` follows the task
    pub segment: SegSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 80,
            n_test: 40,
            classify: ClipSpec::default(),
            segment: SegSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub topology: Topology,
    /// overridden by `--seed`
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub lcd: LcdConfig,
    #[serde(default)]
    pub mti: MtiConfig,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
}

impl ExperimentConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            topology: Topology::default(),
            seed: None,
            output_dir: None,
            backbone: BackboneConfig::default(),
            lcd: LcdConfig::default(),
            mti: MtiConfig::default(),
            adapter: AdapterConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
        }
    }

    /// Tiny backbone, narrow common width, two timestamps and a handful of
    /// clips; sized for gradient checks and quick tests.
    pub fn tiny(task: Task) -> Self {
        let mut cfg = Self::new(task);
        cfg.backbone = BackboneConfig::tiny();
        cfg.lcd.common_dim = 8;
        cfg.dataset.n_train = 8;
        cfg.dataset.n_test = 4;
        cfg.dataset.classify.timestamps = 2;
        cfg.dataset.segment.timestamps = 2;
        cfg.dataset.segment.align = 4;
        cfg.dataset.segment.max_fraction = 0.3;
        cfg
    }

    /// Parses and validates; malformed or out-of-range documents are
    /// [`Error::Config`].
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| io_at(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn schema() -> serde_json::Value {
        serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.train.lr > 0.0) {
            return Err(Error::Config("train: lr must be positive".into()));
        }
        self.backbone.validate()?;
        if self.topology == Topology::Mettle {
            self.lcd.validate(&self.backbone)?;
            if self.task.is_segmentation() {
                self.mti.validate(&self.backbone)?;
            }
        } else if self.adapter.bottleneck_rank == 0 {
            return Err(Error::Config("adapter: bottleneck_rank must be positive".into()));
        }
        if self.task.is_segmentation() {
            self.seg_spec().validate(self.backbone.visual)?;
        } else {
            self.dataset.classify.validate()?;
        }
        if self.dataset.n_train == 0 {
            return Err(Error::Config("dataset: n_train must be at least 1".into()));
        }
        Ok(())
    }

    pub fn seg_spec(&self) -> SegSpec {
        SegSpec {
            multi_source: self.task == Task::SegmentMulti,
            ..self.dataset.segment.clone()
        }
    }

    /// LCD settings as the assembly uses them: segmentation distils only the
    /// layer feeding injection.
    pub fn effective_lcd(&self) -> LcdConfig {
        let mut lcd = self.lcd.clone();
        if self.task.is_segmentation() {
            lcd.layers = LayerSelection::Only(vec![self.mti.source_layer(&self.backbone)]);
        }
        lcd
    }

    /// Classification labels, background included.
    pub fn labels(&self) -> usize {
        self.dataset.classify.classes + 1
    }
}
