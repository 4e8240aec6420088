//! Versioned run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::read_json;
use crate::error::{Error, Result};
use crate::head::{MapVariant, ProbeMode};
use crate::losses::LossTerm;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

pub const RUN_CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 50,
            val: 20,
            test: 30,
        }
    }
}

/// Switches that turn the default head and objective into an ablation variant.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub calibration_only: bool,
    pub ranking_only: bool,
    pub disable_losses: Vec<LossTerm>,
    pub direct_head: bool,
    pub fixed_sigma: bool,
    pub no_aleatoric: bool,
    pub single_tap: bool,
    pub num_probes: Option<usize>,
    pub gamma: Option<f64>,
}

impl Ablation {
    /// Applies the switches to `cfg`.
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        let head = &mut cfg.head;
        head.variant = match (self.calibration_only, self.ranking_only) {
            (true, true) => {
                return Err(Error::InvalidArgument(
                    "calibration_only and ranking_only are exclusive".into(),
                ))
            }
            (true, false) => MapVariant::CalibrationOnly,
            (false, true) => MapVariant::RankingOnly,
            (false, false) => head.variant,
        };
        head.probe_mode = match (self.direct_head, self.fixed_sigma) {
            (true, true) => {
                return Err(Error::InvalidArgument("direct_head and fixed_sigma are exclusive".into()))
            }
            (true, false) => ProbeMode::DirectHead,
            (false, true) => ProbeMode::FixedSigma,
            (false, false) => head.probe_mode,
        };
        if self.no_aleatoric {
            head.aleatoric = false;
        }
        if self.single_tap {
            head.single_tap = true;
        }
        if let Some(r) = self.num_probes {
            head.num_probes = r;
            head.patterns = None;
        }
        if let Some(g) = self.gamma {
            head.gamma = g;
        }
        for &t in &self.disable_losses {
            cfg.weights.set(t, 0.0);
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub splits: SplitSizes,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_CONFIG_SCHEMA,
            seed: 0,
            output_dir: None,
            splits: SplitSizes::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        if cfg.schema_version != RUN_CONFIG_SCHEMA {
            return Err(Error::format(path, format!("unsupported schema version {}", cfg.schema_version)));
        }
        Ok(cfg)
    }

    /// The run seed copied into both sub-configs, head shapes taken from the
    /// synthetic backbone, and the ablation switches applied.
    pub fn resolve(&self) -> Result<(SynthConfig, TrainConfig)> {
        let mut synth = self.synth.clone();
        synth.seed = self.seed;
        synth.validate()?;
        let mut train = self.train.clone();
        train.seed = self.seed;
        train.head.num_classes = synth.num_classes;
        train.head.tap_channels = synth.tap_channels.clone();
        self.ablation.apply(&mut train)?;
        Ok((synth, train))
    }
}
