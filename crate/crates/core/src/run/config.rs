use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::arch::SpaceConfig;
use crate::fedproto::{Scheme, TransportKind};
use crate::feo::{EvoConfig, GammaSchedule, QuotaMode};
use crate::graph::synthetic::SbmSpec;
use crate::supernet::{LayerRegistry, Regularization};

use super::RunError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    #[default]
    Edgecut,
    Random,
    /// The partition that ships with the data (synthetic tasks only).
    Given,
}

impl std::str::FromStr for PartitionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "edgecut" => Ok(PartitionKind::Edgecut),
            "random" => Ok(PartitionKind::Random),
            "given" => Ok(PartitionKind::Given),
            _ => Err(format!("unknown partitioner {s:?} (expected edgecut|random|given)")),
        }
    }
}

/// Multi-client block-model task: one component per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub clients: Vec<SbmSpec>,
    pub seed: u64,
}

impl SyntheticTask {
    /// Three shards with the same assortative structure but different
    /// feature quality, so neighbourhood aggregation pays off on every
    /// client and by how much differs between them.
    pub fn three_client(seed: u64) -> Self {
        let base = SbmSpec {
            nodes_per_class: 120,
            num_classes: 3,
            num_features: 12,
            p_in: 0.2,
            p_out: 0.01,
            feature_signal: 0.5,
            train_fraction: 0.3,
            val_fraction: 0.3,
        };
        let client = |p_in: f64, p_out: f64, signal: f64| SbmSpec {
            p_in,
            p_out,
            feature_signal: signal,
            ..base.clone()
        };
        Self {
            clients: vec![client(0.2, 0.01, 0.3), client(0.2, 0.01, 0.5), client(0.2, 0.01, 0.8)],
            seed,
        }
    }
}

/// Everything needed to reproduce a run; written back out in every report
/// after defaults are filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Bundle directory; when absent, `synthetic` supplies the data.
    pub dataset: Option<PathBuf>,
    pub synthetic: Option<SyntheticTask>,
    pub clients: usize,
    pub partition: PartitionKind,
    pub population: usize,
    pub layers: usize,
    pub layer_types: Vec<String>,
    pub generations: usize,
    pub weight_steps: usize,
    pub gamma0: f64,
    pub gamma_decay: f64,
    pub lr: f64,
    pub cipher: Scheme,
    pub seed: u64,
    pub transport: TransportKind,
    /// Controller address for the socket transport.
    pub listen: Option<String>,
    pub out: Option<PathBuf>,
    pub evo: EvoConfig,
    pub quota_mode: QuotaMode,
    pub regularization: Regularization,
    /// Epochs of the from-scratch retrain behind FLACC.
    pub retrain_epochs: usize,
    pub retrain_lr: f64,
    /// Epochs per candidate in the random-search baseline.
    pub baseline_epochs: usize,
    /// Forward passes timed per client; 0 skips timing.
    pub timing_runs: usize,
    pub timeout_secs: u64,
    pub record_transcript: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic: None,
            clients: 3,
            partition: PartitionKind::Edgecut,
            population: 60,
            layers: 6,
            layer_types: LayerRegistry::default().names().iter().map(|s| s.to_string()).collect(),
            generations: 250,
            weight_steps: 5,
            gamma0: 0.5,
            gamma_decay: 0.99,
            lr: 0.01,
            cipher: Scheme::Mask,
            seed: 0,
            transport: TransportKind::Inproc,
            listen: None,
            out: None,
            evo: EvoConfig::default(),
            quota_mode: QuotaMode::Full,
            regularization: Regularization::default(),
            retrain_epochs: 200,
            retrain_lr: 0.1,
            baseline_epochs: 50,
            timing_runs: 30,
            timeout_secs: 600,
            record_transcript: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        match (&self.dataset, &self.synthetic) {
            (None, None) => return bad("no dataset: give a bundle directory or a synthetic task"),
            (Some(_), Some(_)) => return bad("dataset and synthetic task are mutually exclusive"),
            (Some(_), None) if self.partition == PartitionKind::Given => {
                return bad("partition 'given' only applies to synthetic tasks")
            }
            _ => {}
        }
        if let Some(t) = &self.synthetic {
            if t.clients.is_empty() {
                return bad("synthetic task has no clients");
            }
            if self.partition == PartitionKind::Given && t.clients.len() != self.clients {
                return bad("synthetic task and client count disagree");
            }
        }
        for (name, v) in [
            ("clients", self.clients),
            ("population", self.population),
            ("layers", self.layers),
            ("generations", self.generations),
            ("weight-steps", self.weight_steps),
            ("retrain-epochs", self.retrain_epochs),
            ("baseline-epochs", self.baseline_epochs),
        ] {
            if v == 0 {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma0) || !(0.0..=1.0).contains(&self.gamma_decay) {
            return bad("gamma0 and gamma-decay must lie in [0,1]");
        }
        for (name, lr) in [("lr", self.lr), ("retrain-lr", self.retrain_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.regularization.dropout) || self.regularization.weight_decay < 0.0 {
            return bad("dropout must lie in [0,1) and weight decay be nonnegative");
        }
        if self.timeout_secs == 0 {
            return bad("timeout must be positive");
        }
        self.evo.validate().map_err(|e| RunError::Config(e.to_string()))?;
        self.registry()?;
        self.space()?;
        Ok(())
    }

    pub fn registry(&self) -> Result<LayerRegistry, RunError> {
        LayerRegistry::from_names(&self.layer_types).map_err(RunError::Config)
    }

    pub fn space(&self) -> Result<SpaceConfig, RunError> {
        SpaceConfig::new(self.layers, self.layer_types.len()).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn schedule(&self) -> GammaSchedule {
        GammaSchedule {
            gamma0: self.gamma0,
            decay: self.gamma_decay,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}
