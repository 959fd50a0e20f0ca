//! TOML run configuration. Every section is optional; missing keys take the
//! library defaults and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aging::AgingConfig;
use crate::cosim::CosimConfig;
use crate::data::{CircuitOracle, DataConfig, LoadRanges, OracleKind, SourceSpec};
use crate::error::{Error, Result};
use crate::solver::SolverConfig;
use crate::training::TrainConfig;

/// Dataset overrides applied on top of the oracle's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub oracle: Option<OracleKind>,
    /// Full oracle description; replaces the defaults for `oracle`.
    pub circuit: Option<CircuitOracle>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub horizon: Option<f64>,
    pub samples: Option<usize>,
    pub valid_fraction: Option<f64>,
    pub time_scale: Option<f64>,
    pub source: Option<SourceSpec>,
    pub loads: Option<LoadRanges>,
    pub solver: Option<SolverConfig>,
}

impl DataSection {
    pub fn resolve(&self) -> Result<DataConfig> {
        let kind = match (&self.oracle, &self.circuit) {
            (Some(k), Some(c)) if *k != c.kind() => {
                return Err(Error::Config(format!("data.oracle = {k:?} disagrees with data.circuit kind {:?}", c.kind())))
            }
            (Some(k), _) => *k,
            (None, Some(c)) => c.kind(),
            (None, None) => OracleKind::CommonSourceSurrogate,
        };
        let mut cfg = DataConfig::for_oracle(kind);
        if let Some(c) = &self.circuit {
            cfg.oracle = c.clone();
        }
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { cfg.$f = v.clone(); } )* };
        }
        take!(n, seed, horizon, samples, valid_fraction, time_scale, source, loads, solver);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed, used when no `--seed` flag or `ISS_NODE_SEED` is given.
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub cosim: CosimConfig,
    #[serde(default)]
    pub aging: AgingConfig,
    /// Optimizer settings for the perturbation network.
    #[serde(default = "default_aging_train")]
    pub aging_train: TrainConfig,
}

pub fn default_aging_train() -> TrainConfig {
    TrainConfig { epochs: 100, lr: 3e-3, lr_decay: 0.99, batch_size: 2, ..TrainConfig::default() }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Defaults for the `aging_train` section when the file omits it.
    pub fn with_defaults() -> Self {
        Self { aging_train: default_aging_train(), ..Self::default() }
    }
}

/// Fully resolved settings written next to every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveConfig {
    pub command: String,
    pub seed: Option<u64>,
    pub data: Option<DataConfig>,
    pub train: Option<TrainConfig>,
    pub cosim: Option<CosimConfig>,
    pub aging: Option<AgingConfig>,
    pub aging_train: Option<TrainConfig>,
}

impl EffectiveConfig {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self { command: command.into(), seed, data: None, train: None, cosim: None, aging: None, aging_train: None }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TrainMode;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.aging_train, default_aging_train());
        assert_eq!(c.data.resolve().unwrap(), DataConfig::for_oracle(OracleKind::CommonSourceSurrogate));
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::from_toml(
            "seed = 4\n[data]\noracle = \"inverter_chain_surrogate\"\nn = 7\n[train]\nmode = \"baseline\"\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(c.seed, Some(4));
        assert_eq!(c.train.mode, TrainMode::Baseline);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, TrainConfig::default().lr);
        let d = c.data.resolve().unwrap();
        assert_eq!(d.n, 7);
        assert_eq!(d.oracle.kind(), OracleKind::InverterChainSurrogate);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[train]\nepoch = 3").is_err());
        assert!(RunConfig::from_toml("[data]\nnn = 3").is_err());
        assert!(RunConfig::from_toml("[cosim]\nruns = 1\nx = 2").is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut e = EffectiveConfig::new("train", Some(3));
        e.data = Some(DataConfig::for_oracle(OracleKind::InverterChainSurrogate));
        e.train = Some(TrainConfig::default());
        e.aging = Some(AgingConfig::default());
        let text = e.to_toml().unwrap();
        let back: EffectiveConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, e);
    }
}
