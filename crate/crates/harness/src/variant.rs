//! Ablation variants: which checkpoint each one samples from and how it
//! gates at inference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use evd_core::losses::LossConfig;
use evd_core::pseudo::MotionSignal;
use evd_core::sampling::{SamplerConfig, ScheduleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no_real")]
    NoReal,
    #[serde(rename = "no_cons")]
    NoCons,
    #[serde(rename = "train_only")]
    TrainOnly,
    #[serde(rename = "infer_only")]
    InferOnly,
    #[serde(rename = "no_gate_at_inf")]
    NoGateAtInf,
    #[serde(rename = "const_gate_1.0")]
    ConstGateOne,
    #[serde(rename = "const_gate_0.5")]
    ConstGateHalf,
    #[serde(rename = "motion_mask_inf")]
    MotionMaskInf,
    #[serde(rename = "baseline")]
    Baseline,
}

/// Where the gate's activity comes from at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activity {
    None,
    Head,
    Motion(MotionSignal),
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Full,
        Variant::NoReal,
        Variant::NoCons,
        Variant::TrainOnly,
        Variant::InferOnly,
        Variant::NoGateAtInf,
        Variant::ConstGateOne,
        Variant::ConstGateHalf,
        Variant::MotionMaskInf,
        Variant::Baseline,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoReal => "no_real",
            Variant::NoCons => "no_cons",
            Variant::TrainOnly => "train_only",
            Variant::InferOnly => "infer_only",
            Variant::NoGateAtInf => "no_gate_at_inf",
            Variant::ConstGateOne => "const_gate_1.0",
            Variant::ConstGateHalf => "const_gate_0.5",
            Variant::MotionMaskInf => "motion_mask_inf",
            Variant::Baseline => "baseline",
        }
    }

    /// The variant whose training run produces this variant's checkpoint.
    pub fn checkpoint(self) -> Variant {
        match self {
            Variant::Full
            | Variant::TrainOnly
            | Variant::NoGateAtInf
            | Variant::ConstGateOne
            | Variant::ConstGateHalf => Variant::Full,
            Variant::NoReal => Variant::NoReal,
            Variant::NoCons => Variant::NoCons,
            Variant::InferOnly | Variant::MotionMaskInf | Variant::Baseline => Variant::Baseline,
        }
    }

    /// Distinct checkpoints needed to evaluate `variants`, in first-use order.
    pub fn checkpoints_for(variants: &[Variant]) -> Vec<Variant> {
        let mut out = Vec::new();
        for v in variants {
            let c = v.checkpoint();
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    /// Loss weights used when training this variant's checkpoint.
    pub fn train_loss(self, base: &LossConfig) -> LossConfig {
        match self.checkpoint() {
            Variant::NoReal => LossConfig {
                lambda_real: 0.0,
                ..*base
            },
            Variant::NoCons => LossConfig {
                lambda_cons: 0.0,
                ..*base
            },
            Variant::Baseline => LossConfig {
                lambda_real: 0.0,
                lambda_cons: 0.0,
                lambda_order: 0.0,
                ..*base
            },
            _ => *base,
        }
    }

    /// The baseline trains the backbone alone.
    pub fn freezes_head(self) -> bool {
        self.checkpoint() == Variant::Baseline
    }

    pub fn activity(self) -> Activity {
        match self {
            Variant::Full
            | Variant::NoReal
            | Variant::NoCons
            | Variant::ConstGateOne
            | Variant::ConstGateHalf => Activity::Head,
            Variant::TrainOnly | Variant::NoGateAtInf | Variant::Baseline => Activity::None,
            Variant::InferOnly => Activity::Motion(MotionSignal::Denoised),
            Variant::MotionMaskInf => Activity::Motion(MotionSignal::Current),
        }
    }

    /// Sampler settings for this variant, starting from the shared ones.
    pub fn sampler(self, base: &SamplerConfig) -> SamplerConfig {
        let mut cfg = base.clone();
        cfg.gating_enabled = self.activity() != Activity::None;
        cfg.schedule = match self {
            Variant::ConstGateOne => ScheduleMode::Const(1.0),
            Variant::ConstGateHalf => ScheduleMode::Const(0.5),
            _ => base.schedule,
        };
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| {
                let ids: Vec<_> = Variant::ALL.iter().map(|v| v.id()).collect();
                format!("unknown variant `{s}`; expected one of {}", ids.join(", "))
            })
    }
}
