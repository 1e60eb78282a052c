//! Run configuration, read from a TOML file with one section per subsystem.
//! Every field has a default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use evd_core::backbone::DitConfig;
use evd_core::losses::LossConfig;
use evd_core::pseudo::PseudoTargetConfig;
use evd_core::sampling::SamplerConfig;
use evd_core::scene::{SceneDistribution, SCENE_EMBED_DIM};
use evd_core::train::TrainConfig;

use crate::variant::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model init, training draws and sampling noise. Copied into
    /// `train.seed`.
    pub seed: u64,
    pub variant: Variant,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub pseudo: PseudoTargetConfig,
    pub sweep: SweepConfig,
    pub check: CheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: Variant::Full,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            pseudo: PseudoTargetConfig::default(),
            sweep: SweepConfig::default(),
            check: CheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    /// Directory of scene files. When absent, scenes are generated from
    /// `[data]`.
    pub dataset: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("runs"),
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub seed: u64,
    pub scenes: SceneDistribution,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scenes: 200,
            eval_scenes: 50,
            seed: 0,
            scenes: SceneDistribution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            head_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub steps: Vec<usize>,
    pub w_cfg: Vec<f64>,
    pub beta: Vec<f64>,
    /// `[tau_on, tau_off]` pairs.
    pub bands: Vec<[f64; 2]>,
    pub t_star: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            steps: vec![25, 35, 50, 75],
            w_cfg: vec![2.5, 4.0, 6.0, 8.0],
            beta: vec![12.0],
            bands: vec![[0.62, 0.38]],
            t_star: vec![0.6],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// Run the check suite with the hysteresis update disabled.
    pub inject_fault: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn dit_config(&self) -> DitConfig {
        DitConfig {
            shape: self.data.scenes.shape,
            spec: self.data.scenes.spec,
            d_model: self.model.d_model,
            layers: self.model.layers,
            heads: self.model.heads,
            d_cond: SCENE_EMBED_DIM,
            mlp_ratio: self.model.mlp_ratio,
        }
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    /// Checks every section; errors name the offending field.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.sampler.validate().context("in [sampler]")?;
        self.pseudo.validate()?;
        self.dit_config().validate().context("in [model]")?;
        if self.model.head_hidden == 0 {
            bail!("invalid config field `model.head_hidden`: must be positive");
        }
        if self.sampler.spec != self.data.scenes.spec {
            bail!(
                "invalid config field `sampler.spec`: {:?} differs from data.scenes.spec {:?}",
                self.sampler.spec,
                self.data.scenes.spec
            );
        }
        // TOML integers are signed 64-bit, so larger seeds cannot be echoed
        // into run manifests.
        for (name, seed) in [("seed", self.seed), ("data.seed", self.data.seed)] {
            if seed > i64::MAX as u64 {
                bail!(
                    "invalid config field `{name}`: must be at most {}",
                    i64::MAX
                );
            }
        }
        if self.data.train_scenes == 0 {
            bail!("invalid config field `data.train_scenes`: must be positive");
        }
        if self.data.eval_scenes == 0 {
            bail!("invalid config field `data.eval_scenes`: must be positive");
        }
        if self.loss.tau_on != self.sampler.gate.tau_on
            || self.loss.tau_off != self.sampler.gate.tau_off
        {
            bail!("invalid config field `loss.tau_on/tau_off`: must equal sampler.gate thresholds");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.variant = Variant::ConstGateHalf;
        cfg.sampler.schedule = evd_core::sampling::ScheduleMode::Const(0.5);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::from_toml("[train]\nstepz = 3\n").is_err());
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
    }

    #[test]
    fn reversed_band_names_the_field() {
        let cfg = RunConfig::from_toml("[sampler.gate]\ntau_on = 0.3\ntau_off = 0.6\n").unwrap();
        let err = format!("{:#}", cfg.validate().unwrap_err());
        assert!(err.contains("tau_on/tau_off"), "{err}");
    }

    #[test]
    fn spec_mismatch_rejected() {
        let cfg = RunConfig::from_toml("[sampler.spec]\npt = 1\nph = 2\npw = 2\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
