use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::encoder::GraphConfig;
use crate::error::{Error, Result};
use crate::evidential::{EvidenceActivation, RankSchedule};
use crate::flow::FlowConfig;

/// Every hyperparameter of one experiment. Serialized as TOML with one
/// section per module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub graph: GraphConfig,
    pub evidential: EvidentialConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            graph: GraphConfig::default(),
            evidential: EvidentialConfig::default(),
            flow: FlowConfig {
                pool_size: 640,
                ..FlowConfig::default()
            },
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest of ingested bags; synthetic data is generated when absent.
    pub manifest: Option<PathBuf>,
    /// Subsample length for ingested bags.
    pub bag_size: Option<usize>,
    /// Explicit seen classes. When empty, `n_seen` classes are drawn.
    pub seen: Vec<String>,
    pub n_seen: usize,
    /// Fraction of normal and seen-class bags placed in the training pool.
    pub train_fraction: f64,
    /// Fraction of the training pool held out for early stopping.
    pub val_fraction: f64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            bag_size: None,
            seen: Vec::new(),
            n_seen: 2,
            train_fraction: 0.7,
            val_fraction: 0.2,
            synth: SynthConfig::open_set_task(0),
        }
    }
}

/// How the clean positive set is chosen from a positive bag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Confidence and evidence rank filters.
    Evidential,
    /// Confidence rank filter only.
    TopK,
    /// Every instance of the bag.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvidentialConfig {
    pub hidden_dim: usize,
    pub activation: EvidenceActivation,
    pub selection: SelectionRule,
    pub ranks: RankSchedule,
}

impl Default for EvidentialConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            activation: EvidenceActivation::Relu,
            selection: SelectionRule::Evidential,
            ranks: RankSchedule::default(),
        }
    }
}

/// Source of the extra anomaly instances in the fine-tuning stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSource {
    /// Low-density samples of the trained flow.
    Flow,
    /// Isotropic Gaussian noise in the embedding space.
    Gaussian,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Stage lengths in epochs. One epoch visits every training positive bag once.
    pub warmup_epochs: usize,
    pub flow_epochs: usize,
    pub finetune_epochs: usize,
    /// Epochs over which `τ_p` ramps from the bag size to its target.
    pub ramp_epochs: usize,
    /// Positive bags per iteration; the same number of negatives is drawn.
    pub bags_per_side: usize,
    /// Rows per flow iteration.
    pub flow_batch: usize,
    pub lr_warmup: f64,
    pub lr_flow: f64,
    pub lr_finetune: f64,
    /// Cosine floor as a fraction of each stage's peak rate.
    pub lr_floor: f64,
    pub margin: f64,
    pub beta: f64,
    pub triplets: usize,
    pub pseudo: PseudoSource,
    /// Standard deviation of the Gaussian pseudo anomalies.
    pub noise_std: f64,
    /// Validation period in iterations.
    pub eval_every: usize,
    /// Evaluations without improvement before a stage stops.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 30,
            flow_epochs: 20,
            finetune_epochs: 20,
            ramp_epochs: 10,
            bags_per_side: 4,
            flow_batch: 128,
            lr_warmup: 1e-2,
            lr_flow: 5e-3,
            lr_finetune: 5e-3,
            lr_floor: 0.01,
            margin: 0.3,
            beta: 1e-3,
            triplets: 64,
            pseudo: PseudoSource::Flow,
            noise_std: 1.0,
            eval_every: 10,
            patience: 8,
        }
    }
}

impl ExperimentConfig {
    /// Default config with `seed` driving both data generation and training.
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = Self::default();
        cfg.set_seed(seed);
        cfg
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.synth.seed = seed;
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        self.flow.validate()?;
        self.evidential.ranks.validate()?;
        if self.data.manifest.is_none() {
            self.data.synth.validate()?;
        }
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&d.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if d.bag_size == Some(0) {
            return Err(Error::Config("bag_size must be positive".into()));
        }
        if self.evidential.hidden_dim == 0 {
            return Err(Error::Config("head hidden_dim must be positive".into()));
        }
        let t = &self.train;
        for (name, v) in [
            ("bags_per_side", t.bags_per_side),
            ("flow_batch", t.flow_batch),
            ("eval_every", t.eval_every),
            ("patience", t.patience),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("lr_warmup", t.lr_warmup),
            ("lr_flow", t.lr_flow),
            ("lr_finetune", t.lr_finetune),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&t.lr_floor) {
            return Err(Error::Config("lr_floor must be in [0, 1]".into()));
        }
        if !(t.margin >= 0.0) || !(t.beta >= 0.0) {
            return Err(Error::Config("margin and beta must be nonnegative".into()));
        }
        if !(t.noise_std > 0.0) {
            return Err(Error::Config("noise_std must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
