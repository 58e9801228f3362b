//! Per-stage optimizers, learning rates and freeze sets.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerKind;
use crate::error::{Error, Result};
use crate::models::Group;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    /// Encoder and verification head only.
    I,
    /// Generator and discriminators with the encoder and head frozen.
    II,
    /// Everything jointly, encoder batch norm fixed.
    III,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::I, Stage::II, Stage::III];

    pub fn number(self) -> u8 {
        match self {
            Stage::I => 1,
            Stage::II => 2,
            Stage::III => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.number() == n)
    }

    pub fn previous(self) -> Option<Self> {
        Self::from_number(self.number() - 1)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    /// Multiply by `factor` every `every` epochs.
    Step { every: f64, factor: f64 },
    /// Constant for `constant` epochs, then linear to zero over `decay` epochs.
    Linear { constant: f64, decay: f64 },
}

impl Decay {
    /// Multiplier at 1-based `epoch`.
    pub fn factor(&self, epoch: f64) -> f64 {
        match *self {
            Decay::Step { every, factor } => factor.powf(((epoch - 1.0) / every).floor().max(0.0)),
            Decay::Linear { constant, decay } => (1.0 - (epoch - constant).max(0.0) / decay).clamp(0.0, 1.0),
        }
    }

    fn scaled(self, k: f64) -> Self {
        match self {
            Decay::Step { every, factor } => Decay::Step { every: every / k, factor },
            Decay::Linear { constant, decay } => Decay::Linear { constant: constant / k, decay: decay / k },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRate {
    pub kind: OptimizerKind,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stage: Stage,
    /// Groups updated in this stage and how.
    pub blocks: BTreeMap<Group, BlockRate>,
    pub epochs: f64,
    pub decay: Decay,
    /// Encoder batch norm uses running statistics and fixed affine terms.
    pub freeze_encoder_bn: bool,
}

/// Changes applied on top of the default schedule of a stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleOverride {
    /// Initial rates keyed by group tag (`E`, `G`, `V`, `D_id`, `D_pd`).
    #[serde(default)]
    pub lr: BTreeMap<String, f64>,
    /// Full-scale epoch count before desk scaling; the decay shape is stretched to match.
    #[serde(default)]
    pub epochs: Option<f64>,
}

impl StageSchedule {
    /// Published full-scale schedule.
    pub fn published(stage: Stage) -> Self {
        let sgd = |lr| BlockRate { kind: OptimizerKind::Sgd, lr };
        let adam = |lr| BlockRate { kind: OptimizerKind::Adam, lr };
        match stage {
            Stage::I => Self {
                stage,
                blocks: [(Group::E, sgd(0.01)), (Group::V, sgd(0.1))].into(),
                epochs: 80.0,
                decay: Decay::Step { every: 40.0, factor: 0.1 },
                freeze_encoder_bn: false,
            },
            Stage::II => Self {
                stage,
                blocks: [(Group::G, adam(1e-3)), (Group::DId, sgd(1e-4)), (Group::DPd, sgd(1e-2))].into(),
                epochs: 100.0,
                decay: Decay::Linear { constant: 50.0, decay: 50.0 },
                freeze_encoder_bn: false,
            },
            Stage::III => Self {
                stage,
                blocks: [
                    (Group::E, adam(1e-6)),
                    (Group::G, adam(1e-6)),
                    (Group::V, adam(1e-5)),
                    (Group::DId, sgd(1e-4)),
                    (Group::DPd, sgd(1e-4)),
                ]
                .into(),
                epochs: 50.0,
                decay: Decay::Linear { constant: 25.0, decay: 25.0 },
                freeze_encoder_bn: true,
            },
        }
    }

    /// Applies overrides, then divides every epoch quantity by `desk_factor`.
    pub fn resolve(stage: Stage, over: &ScheduleOverride, desk_factor: f64) -> Result<Self> {
        if !(desk_factor.is_finite() && desk_factor >= 1.0) {
            return Err(Error::Config(format!("desk_factor must be >= 1, got {desk_factor}")));
        }
        let mut s = Self::published(stage);
        for (tag, &lr) in &over.lr {
            let group = Group::from_tag(tag).ok_or_else(|| Error::Config(format!("unknown group `{tag}` in stage {stage} override")))?;
            let block = s
                .blocks
                .get_mut(&group)
                .ok_or_else(|| Error::Config(format!("group {tag} is not trained in stage {stage}")))?;
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("learning rate for {tag} must be finite and >= 0")));
            }
            block.lr = lr;
        }
        if let Some(e) = over.epochs {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::Config(format!("stage {stage} epochs must be positive")));
            }
            s.decay = s.decay.scaled(s.epochs / e);
            s.epochs = e;
        }
        s.decay = s.decay.scaled(desk_factor);
        s.epochs /= desk_factor;
        Ok(s)
    }

    /// Whole epochs to run.
    pub fn epoch_count(&self) -> usize {
        self.epochs.ceil().max(1.0) as usize
    }

    pub fn trains(&self, group: Group) -> bool {
        self.blocks.contains_key(&group)
    }

    /// Learning rate of `group` during 1-based `epoch`; 0 for frozen groups.
    pub fn lr(&self, group: Group, epoch: usize) -> f64 {
        self.blocks.get(&group).map_or(0.0, |b| b.lr * self.decay.factor(epoch as f64))
    }
}
