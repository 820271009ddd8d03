//! Ambient agents: the policies that generate the trajectory distribution and
//! the episode simulator that records it.

pub mod orca;
pub mod sim;
pub mod social;

use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::scalar::Scalar;

pub use orca::{orca_half_planes, orca_velocity, HalfPlane, OrcaParams};
pub use sim::{
    derive_seed, generate_dataset, rollout_episode, rollout_scenario, simulate_agents, DatasetSplit, Datasets,
    SystemController, TrajectoryRecord, TRAJECTORY_SCHEMA_VERSION,
};
pub use social::{social_reactive_velocity, SocialParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    SocialReactive,
    Orca,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentModel<T> {
    pub position: Vec2<T>,
    pub velocity: Vec2<T>,
    pub goal: Vec2<T>,
    pub radius: T,
    pub pref_speed: T,
    pub policy_kind: PolicyKind,
}

impl<T: Scalar> AgentModel<T> {
    /// Goal-directed velocity at `pref_speed`, or the remaining distance if
    /// the goal is closer than one second of travel.
    pub fn preferred_velocity(&self) -> Vec2<T> {
        let to_goal = self.goal - self.position;
        to_goal.clamp_norm(self.pref_speed)
    }
}

/// How ambient agents move.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmbientConfig {
    pub policy: PolicyKind,
    pub social: SocialParams,
    pub orca: OrcaParams,
}

impl AmbientConfig {
    /// Velocity command for `agent` under the configured policy.
    pub fn velocity<T: Scalar>(&self, agent: &AgentModel<T>, neighbors: &[&AgentModel<T>], dt: T) -> Vec2<T> {
        match agent.policy_kind {
            PolicyKind::SocialReactive => social_reactive_velocity(agent, neighbors, &self.social),
            PolicyKind::Orca => orca_velocity(agent, neighbors, T::lit(self.orca.time_horizon), dt),
        }
    }
}
