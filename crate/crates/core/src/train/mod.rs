//! Training and evaluation: mixed labeled/unlabeled minibatches, Adam,
//! the epoch loop, top-k accuracy, checkpointing, and cost accounting.

pub mod adam;
pub mod batch;
pub mod checkpoint;
pub mod complexity;
pub mod eval;
pub mod metrics;
pub mod runner;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CpcConfig, EncoderParams, EncoderSpec};
use crate::objectives::{CcpcModel, ClassifierParams, CpcModel, GumbelConfig};
use crate::params::ParamSet;
use crate::rng::RngState;

pub use adam::AdamState;
pub use batch::{plan_epoch, BatchPlan};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use complexity::{complexity_report, ComplexityReport};
pub use eval::{evaluate_topk, mi_lower_bound};
pub use metrics::{read_metrics, write_metrics, EpochMetrics};
pub use runner::{TrainData, Trainer};

/// Which objective drives the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Cpc,
    Ccpc,
    SupervisedOnly,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Cpc => "cpc",
            Mode::Ccpc => "ccpc",
            Mode::SupervisedOnly => "supervised-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cpc" => Ok(Mode::Cpc),
            "ccpc" => Ok(Mode::Ccpc),
            "supervised-only" => Ok(Mode::SupervisedOnly),
            other => Err(Error::InvalidConfig {
                what: "mode",
                detail: format!("unknown mode '{other}' (cpc | ccpc | supervised-only)"),
            }),
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Mode::Cpc => 0,
            Mode::Ccpc => 1,
            Mode::SupervisedOnly => 2,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Mode::Cpc),
            1 => Ok(Mode::Ccpc),
            2 => Ok(Mode::SupervisedOnly),
            other => Err(Error::CheckpointTruncated {
                detail: format!("unknown mode byte {other}"),
            }),
        }
    }

    pub fn is_ssl(&self) -> bool {
        matches!(self, Mode::Cpc | Mode::Ccpc)
    }
}

/// Everything a run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub learning_rate: f64,
    /// Minibatch size; SSL modes draw half labeled, half unlabeled.
    pub batch_size: usize,
    pub epochs: usize,
    /// Classification weight; `None` resolves to `8 * rho` from the split.
    pub alpha: Option<f64>,
    /// Decoupled weight decay; used by the supervised baseline.
    pub weight_decay: f64,
    pub seed: u64,
    pub cpc: CpcConfig,
    pub gumbel: GumbelConfig,
    /// Which `k` values evaluation reports; metrics carry the first and last.
    pub eval_k: Vec<usize>,
    /// When false, metrics report `wall_ms: 0.0` so files are bit-identical
    /// across runs.
    pub record_wall_time: bool,
    /// Save a checkpoint every n epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cpc,
            learning_rate: 1.6e-4,
            batch_size: 16,
            epochs: 10,
            alpha: None,
            weight_decay: 0.0,
            seed: 0,
            cpc: CpcConfig::default(),
            gumbel: GumbelConfig::default(),
            eval_k: vec![1, 5],
            record_wall_time: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::InvalidConfig {
            what: "TrainConfig",
            detail,
        };
        self.cpc.validate()?;
        self.gumbel.validate()?;
        if self.learning_rate <= 0.0 {
            return Err(bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size must be >= 1".into()));
        }
        if self.mode.is_ssl() && self.batch_size % 2 != 0 {
            return Err(bad(format!(
                "batch_size must be even in SSL modes, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(bad("epochs must be >= 1".into()));
        }
        if self.eval_k.is_empty() || self.eval_k.iter().any(|&k| k == 0) {
            return Err(bad("eval_k must name at least one positive k".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(bad("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// The model behind a run. The supervised baseline reuses the plain model
/// structure; its contrastive parts simply receive no gradient.
#[derive(Clone, Debug)]
pub enum Model {
    Cpc(CpcModel),
    Ccpc(CcpcModel),
}

impl Model {
    pub fn init(
        mode: Mode,
        cfg: CpcConfig,
        enc_spec: &EncoderSpec,
        m_classes: usize,
        ps: &mut ParamSet,
        rng: &mut RngState,
    ) -> Result<Self> {
        match mode {
            Mode::Cpc | Mode::SupervisedOnly => Ok(Model::Cpc(CpcModel::init(
                cfg, enc_spec, m_classes, ps, rng,
            )?)),
            Mode::Ccpc => Ok(Model::Ccpc(CcpcModel::init(
                cfg, enc_spec, m_classes, ps, rng,
            )?)),
        }
    }

    pub fn cfg(&self) -> &CpcConfig {
        match self {
            Model::Cpc(m) => &m.cfg,
            Model::Ccpc(m) => &m.cfg,
        }
    }

    pub fn encoder(&self) -> &EncoderParams {
        match self {
            Model::Cpc(m) => &m.encoder,
            Model::Ccpc(m) => &m.encoder,
        }
    }

    /// The classifier used for label prediction (the inference classifier in
    /// the class-conditional variant).
    pub fn classifier(&self) -> &ClassifierParams {
        match self {
            Model::Cpc(m) => &m.classifier,
            Model::Ccpc(m) => &m.classifier,
        }
    }
}
