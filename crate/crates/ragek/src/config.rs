//! Run configuration: a single TOML file with every experiment knob.
//!
//! Loading resolves all defaults so a run directory can store the fully
//! materialized config and be self-describing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ShardPlan;
use crate::error::{Error, Result};
use crate::learner::{ModelSpec, OptimizerKind};
use crate::sparsifiers::SparsifierKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub master_seed: u64,
    pub num_clients: usize,
    /// Total local iterations T.
    pub total_iters: usize,
    /// Local iterations per global round (H).
    #[serde(default = "default_one")]
    pub local_iters_per_round: usize,
    /// Recluster period (M); must be a multiple of H and at most T.
    pub recluster_period: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// DBSCAN neighborhood radius on the [0,1] distance scale.
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_min_pts")]
    pub min_pts: usize,
    /// Scale applied to the summed sparse updates before the server
    /// optimizer step. Resolves to 1/N when omitted.
    #[serde(default)]
    pub aggregation_scale: Option<f64>,
    /// Request disjoint index sets from co-clustered clients.
    #[serde(default = "default_true")]
    pub disjoint_assignment: bool,
    /// Reset client optimizer moments after each broadcast.
    #[serde(default)]
    pub reset_local_optimizer: bool,
    /// Wire precision for gradient values (64 or 32).
    #[serde(default = "default_value_bits")]
    pub value_bits: u32,
    /// Keep per-round parameter snapshots and audit data in the report.
    #[serde(default)]
    pub record_details: bool,
    pub sparsifier: SparsifierKind,
    pub model: ModelConfig,
    pub client_optimizer: OptimizerKind,
    pub ps_optimizer: OptimizerKind,
    pub data: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layer_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Per-client class labels; defaults to every client holding every
    /// class.
    #[serde(default)]
    pub shard_classes: Option<Vec<Vec<usize>>>,
    /// Clients sharing a class receive identical samples instead of
    /// disjoint splits.
    #[serde(default)]
    pub overlapping: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        input_dim: usize,
        per_class_count: usize,
        separation: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

fn default_one() -> usize {
    1
}
fn default_batch() -> usize {
    256
}
fn default_eps() -> f64 {
    0.3
}
fn default_min_pts() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_value_bits() -> u32 {
    64
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut config: RunConfig =
            toml::from_str(s).map_err(|e| Error::validation(e.to_string()))?;
        config.resolve()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Materializes defaults and checks every declared constraint. Pure:
    /// never touches the data source or the model.
    pub fn resolve(&mut self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::validation("num_clients must be at least 1"));
        }
        if self.local_iters_per_round == 0 {
            return Err(Error::validation("local_iters_per_round (H) must be >= 1"));
        }
        if self.recluster_period == 0 || self.recluster_period % self.local_iters_per_round != 0 {
            return Err(Error::validation(
                "recluster_period (M) must be a positive multiple of local_iters_per_round (H)",
            ));
        }
        if self.total_iters < self.recluster_period {
            return Err(Error::validation(
                "total_iters (T) must be at least recluster_period (M)",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if self.eps <= 0.0 {
            return Err(Error::validation("eps must be positive"));
        }
        if self.min_pts == 0 {
            return Err(Error::validation("min_pts must be >= 1"));
        }
        if self.value_bits != 64 && self.value_bits != 32 {
            return Err(Error::validation("value_bits must be 64 or 32"));
        }
        let spec = self.model_spec()?;
        self.sparsifier
            .validate(spec.param_count())
            .map_err(|e| Error::validation(e.to_string()))?;
        if let Some(scale) = self.aggregation_scale {
            if !scale.is_finite() || scale <= 0.0 {
                return Err(Error::validation("aggregation_scale must be positive"));
            }
        } else {
            self.aggregation_scale = Some(1.0 / self.num_clients as f64);
        }
        if let Some(classes) = &self.data.shard_classes {
            if classes.len() != self.num_clients {
                return Err(Error::validation(
                    "shard_classes must list one class set per client",
                ));
            }
            if classes.iter().any(|c| c.is_empty()) {
                return Err(Error::validation("every client needs at least one class"));
            }
        }
        if let DataSource::Synthetic { input_dim, .. } = self.data.source {
            if input_dim != spec.input_dim() {
                return Err(Error::validation(format!(
                    "data input_dim {input_dim} does not match model input {}",
                    spec.input_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.model.layer_sizes.clone())
    }

    pub fn shard_plan(&self, num_classes: usize) -> ShardPlan {
        match &self.data.shard_classes {
            Some(classes) => ShardPlan {
                class_assignment: classes.clone(),
            },
            None => ShardPlan {
                class_assignment: vec![(0..num_classes).collect(); self.num_clients],
            },
        }
    }

    /// Number of global communication rounds.
    pub fn num_rounds(&self) -> usize {
        self.total_iters / self.local_iters_per_round
    }
}

/// The shipped default profile: the MNIST experiment (ten clients in five
/// label pairs, 39,760-parameter MLP, r=75, k=10, H=4, M=20, Adam 1e-4,
/// batch 256).
pub fn mnist_profile() -> RunConfig {
    let mut config = RunConfig {
        master_seed: 1,
        num_clients: 10,
        total_iters: 200,
        local_iters_per_round: 4,
        recluster_period: 20,
        batch_size: 256,
        eps: 0.3,
        min_pts: 2,
        aggregation_scale: None,
        disjoint_assignment: true,
        reset_local_optimizer: false,
        value_bits: 64,
        record_details: false,
        sparsifier: SparsifierKind::RAgeK { r: 75, k: 10 },
        model: ModelConfig {
            layer_sizes: vec![784, 50, 10],
        },
        client_optimizer: OptimizerKind::adam_defaults(1e-4),
        ps_optimizer: OptimizerKind::adam_defaults(1e-4),
        data: DataConfig {
            source: DataSource::Idx {
                images: PathBuf::from("data/train-images-idx3-ubyte"),
                labels: PathBuf::from("data/train-labels-idx1-ubyte"),
            },
            shard_classes: Some(ShardPlan::five_pairs().class_assignment),
            overlapping: false,
        },
    };
    config.resolve().expect("default profile is valid");
    config
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_toml() -> String {
        r#"
            master_seed = 7
            num_clients = 4
            total_iters = 8
            local_iters_per_round = 2
            recluster_period = 4

            [sparsifier]
            kind = "r_age_k"
            r = 6
            k = 2

            [model]
            layer_sizes = [5, 4, 3]

            [client_optimizer]
            kind = "sgd"
            eta = 0.1

            [ps_optimizer]
            kind = "sgd"
            eta = 0.1

            [data]
            source = "synthetic"
            num_classes = 3
            input_dim = 5
            per_class_count = 10
            separation = 2.0
        "#
        .to_string()
    }

    #[test]
    fn parses_and_fills_defaults() {
        let c = RunConfig::from_toml_str(&base_toml()).unwrap();
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.eps, 0.3);
        assert_eq!(c.aggregation_scale, Some(0.25));
        assert!(c.disjoint_assignment);
    }

    #[test]
    fn rejects_t_less_than_m() {
        let toml = base_toml().replace("total_iters = 8", "total_iters = 2");
        let err = RunConfig::from_toml_str(&toml).unwrap_err();
        assert!(err.to_string().contains("recluster_period"));
    }

    #[test]
    fn rejects_m_not_multiple_of_h() {
        let toml = base_toml().replace("recluster_period = 4", "recluster_period = 3");
        assert!(RunConfig::from_toml_str(&toml).is_err());
    }

    #[test]
    fn rejects_oversized_budgets() {
        let toml = base_toml().replace("r = 6", "r = 1000");
        assert!(RunConfig::from_toml_str(&toml).is_err());
    }

    #[test]
    fn roundtrips_through_toml() {
        let c = RunConfig::from_toml_str(&base_toml()).unwrap();
        let again = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn mnist_profile_resolves_full_dimension() {
        let c = mnist_profile();
        assert_eq!(c.model_spec().unwrap().param_count(), 39760);
        assert_eq!(c.sparsifier, SparsifierKind::RAgeK { r: 75, k: 10 });
    }
}
