use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::ArchConfig;
use crate::optim::AdamConfig;

/// Optimisation settings for the tumour segmenters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Held-out subjects for per-epoch Dice.
    pub validation: usize,
    /// Epochs for the four-channel evaluation segmenter; 0 skips it.
    pub downstream_epochs: usize,
}

impl Default for SegmenterTraining {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 2,
            adam: AdamConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            validation: 8,
            downstream_epochs: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Generator steps per epoch; defaults to one pass over the training set.
    pub steps_per_epoch: Option<usize>,
    /// Stops after this many generator steps.
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub n_critic: usize,
    pub weights: LossWeights,
    pub arch: ArchConfig,
    pub seed: u64,
    pub use_mbha: bool,
    pub use_perc: bool,
    pub use_seg: bool,
    /// Held-out subjects for validation masked L1.
    pub validation: usize,
    /// Generator steps between validation passes; 0 disables them.
    pub validate_every: usize,
    pub segmenter: SegmenterTraining,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 210,
            batch_size: 2,
            steps_per_epoch: None,
            max_steps: None,
            adam: AdamConfig::default(),
            lr_milestones: vec![80, 140, 200],
            lr_factor: 0.5,
            n_critic: 3,
            weights: LossWeights::default(),
            arch: ArchConfig::default(),
            seed: 0,
            use_mbha: true,
            use_perc: true,
            use_seg: true,
            validation: 8,
            validate_every: 10,
            segmenter: SegmenterTraining::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.n_critic == 0 {
            return Err(Error::invalid("epochs, batch size and n_critic must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("steps per epoch must be positive"));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid(format!("milestones {:?} must be strictly increasing", self.lr_milestones)));
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(Error::invalid(format!("milestones {:?} must precede epoch {}", self.lr_milestones, self.epochs)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::invalid("lr factor must lie in (0, 1]"));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::invalid(format!("bad optimizer settings {:?}", self.adam)));
        }
        let s = &self.segmenter;
        if s.batch_size == 0 || !(s.adam.lr > 0.0) {
            return Err(Error::invalid("segmenter batch size and learning rate must be positive"));
        }
        self.weights.validate()?;
        self.arch.generator.validate()?;
        self.arch.budget.validate()
    }

    /// Learning rate in `epoch` (0-based): halved at every milestone reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.adam.lr * self.lr_factor.powi(passed as i32)
    }

    /// Architecture after the ablation switches.
    pub fn effective_arch(&self) -> ArchConfig {
        let mut arch = self.arch.clone();
        if !self.use_mbha {
            arch.generator.replace_mbha(AttentionKind::None);
        }
        arch
    }

    /// Loss weights after the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.use_perc {
            w.perc = 0.0;
        }
        if !self.use_seg {
            w.seg = 0.0;
        }
        w
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| train_len.div_ceil(self.batch_size).max(1))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Data(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
