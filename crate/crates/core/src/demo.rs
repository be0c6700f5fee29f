//! Recorded demonstrations and the per-step records they are made of.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::retargeting::SceneObservation;
use crate::simworld::TaskKind;
use crate::warping::TrajectorySegment;
use crate::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gripper {
    Open,
    Closed,
}

impl Gripper {
    /// 0 for open, 1 for closed.
    pub fn level(self) -> f64 {
        match self {
            Gripper::Open => 0.0,
            Gripper::Closed => 1.0,
        }
    }
}

/// Goal-pose action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub goal: Pose,
    pub gripper: Gripper,
}

/// World snapshot recorded after an environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub robot: Pose,
    pub gripper: Gripper,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attached: Option<String>,
    pub objects: BTreeMap<String, Pose>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    HumanScripted { seed: u64 },
    Generated { annotation_id: String, seed: u64 },
}

impl Provenance {
    pub fn seed(&self) -> u64 {
        match self {
            Provenance::HumanScripted { seed } | Provenance::Generated { seed, .. } => *seed,
        }
    }
}

/// A demonstration: `observations[t]` is the state after executing
/// `actions[t]`, and `scene` is the observation taken at reset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    pub task: TaskKind,
    pub scene: SceneObservation,
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DemoError {
    #[error("demonstration has {observations} observations and {actions} actions; need equal lengths >= 2")]
    BadLength { observations: usize, actions: usize },
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Index of the final timestep, `T`.
    pub fn last_timestep(&self) -> usize {
        self.observations.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), DemoError> {
        let (o, a) = (self.observations.len(), self.actions.len());
        if o != a || o < 2 {
            return Err(DemoError::BadLength { observations: o, actions: a });
        }
        Ok(())
    }

    pub fn robot_pose(&self, t: usize) -> &Pose {
        &self.observations[t].robot
    }

    pub fn gripper_command(&self, t: usize) -> Gripper {
        self.actions[t].gripper
    }

    /// Recorded robot poses paired with the commanded gripper state. Replaying
    /// this trajectory reproduces the recorded rollout.
    pub fn trajectory(&self) -> TrajectorySegment {
        TrajectorySegment {
            poses: self.observations.iter().map(|o| o.robot).collect(),
            gripper: self.actions.iter().map(|a| a.gripper).collect(),
        }
    }

    /// Timesteps where the commanded gripper state changes.
    pub fn gripper_transitions(&self) -> Vec<usize> {
        self.actions.windows(2).enumerate().filter(|(_, w)| w[0].gripper != w[1].gripper).map(|(i, _)| i + 1).collect()
    }
}
