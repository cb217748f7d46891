//! Run configuration: a TOML file with `[data]`, `[network]` and `[optim]`
//! sections whose keys mirror [`NetworkConfig`] and [`OptimizerConfig`].
//! Command-line flags override file values; the effective configuration is
//! written next to the run outputs and can be fed back with `--config`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smsa_core::attention::{AttentionGradConfig, AttentionMode, GradMode};
use smsa_core::layers::{EigGradOptions, PhiMode};
use smsa_core::network::NetworkConfig;
use smsa_core::optim::OptimizerConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for per-sample work; 0 runs sequentially.
    pub workers: usize,
    pub out: PathBuf,
    /// Metrics are flushed every this many epochs.
    pub metrics_flush: usize,
    /// Checkpoint period in epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub data: DataSection,
    pub network: NetworkSection,
    pub optim: OptimSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub backbone: Vec<usize>,
    pub stages: usize,
    pub d_down: usize,
    /// Taken from the training set when absent.
    pub classes: Option<usize>,
    pub eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub attention: String,
    pub lem_grad: String,
    pub smx_grad: String,
    pub phi: String,
    pub strict_eig: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub fc_lr: Option<f64>,
    pub decay_factor: f64,
    pub decay_period: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 0,
            out: PathBuf::from("runs/default"),
            metrics_flush: 1,
            checkpoint_every: 10,
            data: DataSection::default(),
            network: NetworkSection::default(),
            optim: OptimSection::default(),
        }
    }
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            backbone: vec![8, 6, 4],
            stages: 5,
            d_down: 3,
            classes: None,
            eps: 1e-4,
            lambda1: 1.0,
            lambda2: 1e-2,
            attention: "smsa".into(),
            lem_grad: "exact".into(),
            smx_grad: "exact".into(),
            phi: "difference".into(),
            strict_eig: false,
        }
    }
}

impl Default for OptimSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        OptimSection {
            lr: o.lr,
            fc_lr: o.fc_lr,
            decay_factor: o.decay_factor,
            decay_period: o.decay_period,
            batch_size: o.batch_size,
            epochs: o.epochs,
        }
    }
}

fn parse_phi(s: &str) -> CliResult<PhiMode> {
    match s {
        "difference" => Ok(PhiMode::Difference),
        "difference-of-squares" => Ok(PhiMode::DifferenceOfSquares),
        other => Err(CliError::config(
            "network.phi",
            format!("unknown kernel `{other}` (expected difference or difference-of-squares)"),
        )),
    }
}

fn parse_field<T: std::str::FromStr<Err = smsa_core::Error>>(field: &str, s: &str) -> CliResult<T> {
    s.parse().map_err(|e: smsa_core::Error| match e {
        smsa_core::Error::Config { reason, .. } => CliError::config(field, reason),
        other => CliError::Core(other),
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config { field, reason } => {
                CliError::config(field, format!("{reason} (in {})", path.display()))
            }
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config("config", e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn attention(&self) -> CliResult<AttentionMode> {
        parse_field("network.attention", &self.network.attention)
    }

    /// Sets both gradient switches.
    pub fn set_grad_mode(&mut self, mode: GradMode) {
        self.network.lem_grad = mode.as_str().into();
        self.network.smx_grad = mode.as_str().into();
    }

    /// Network configuration; `classes` falls back to `dataset_classes`.
    pub fn network_config(&self, dataset_classes: Option<usize>) -> CliResult<NetworkConfig> {
        let n = &self.network;
        let classes = n.classes.or(dataset_classes).ok_or_else(|| {
            CliError::config(
                "network.classes",
                "not set and no training set to infer it from",
            )
        })?;
        let cfg = NetworkConfig {
            backbone: n.backbone.clone(),
            stages: n.stages,
            d_down: n.d_down,
            classes,
            eps: n.eps,
            lambda1: n.lambda1,
            lambda2: n.lambda2,
            attention: self.attention()?,
            grad: AttentionGradConfig {
                lem: parse_field("network.lem_grad", &n.lem_grad)?,
                smx: parse_field("network.smx_grad", &n.smx_grad)?,
                eig: EigGradOptions {
                    phi: parse_phi(&n.phi)?,
                    strict: n.strict_eig,
                },
            },
        };
        cfg.validate().map_err(|e| match e {
            smsa_core::Error::Config { field, reason } => {
                CliError::config(format!("network.{field}"), reason)
            }
            other => CliError::Core(other),
        })?;
        Ok(cfg)
    }

    pub fn optimizer_config(&self) -> CliResult<OptimizerConfig> {
        let o = &self.optim;
        let cfg = OptimizerConfig {
            lr: o.lr,
            fc_lr: o.fc_lr,
            decay_factor: o.decay_factor,
            decay_period: o.decay_period,
            batch_size: o.batch_size,
            epochs: o.epochs,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| match e {
            smsa_core::Error::Config { field, reason } => {
                CliError::config(format!("optim.{field}"), reason)
            }
            other => CliError::Core(other),
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.metrics_flush == 0 {
            return Err(CliError::config("metrics_flush", "must be at least 1"));
        }
        self.optimizer_config()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.data.train = Some("a/train.spdd".into());
        cfg.optim.decay_period = Some(50);
        cfg.network.classes = Some(3);
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("seed = 4\n[network]\nstages = 9\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.network.stages, 9);
        assert_eq!(cfg.optim, OptimSection::default());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::from_toml("[network]\nstagez = 9\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_values_name_their_field() {
        let mut cfg = RunConfig::default();
        cfg.network.attention = "dot".into();
        match cfg.network_config(Some(3)) {
            Err(CliError::Config { field, .. }) => assert_eq!(field, "network.attention"),
            other => panic!("unexpected {other:?}"),
        }
        cfg.network.attention = "smsa".into();
        cfg.network.stages = 4;
        let err = cfg.network_config(Some(3)).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("Q/K/V"));
        cfg.network.stages = 5;
        cfg.optim.batch_size = 0;
        match cfg.optimizer_config() {
            Err(CliError::Config { field, .. }) => assert_eq!(field, "optim.batch_size"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
