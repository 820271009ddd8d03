//! Ego policies: an aggressive goal-seeker, an ORCA-based conservative
//! policy, and trivial baselines. All map an observation to a bicycle input.

use serde::{Deserialize, Serialize};

use crate::agents::orca::orca_velocity_towards;
use crate::agents::{AgentModel, PolicyKind, SystemController};
use crate::error::Result;
use crate::geometry::Vec2;
use crate::scalar::{wrap_angle, Scalar};
use crate::world::{clamp_input, AgentSnapshot, ControlInput, SystemState, VehicleParams};

/// What a policy sees at one step.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a, T> {
    pub state: &'a SystemState<T>,
    pub goal: Vec2<T>,
    pub current: &'a AgentSnapshot<T>,
    /// Snapshot one step earlier, for velocity estimates.
    pub previous: Option<&'a AgentSnapshot<T>>,
}

impl<'a, T: Scalar> Observation<'a, T> {
    /// Finite-difference agent velocities (zero without a previous snapshot).
    pub fn agent_velocities(&self, dt: T) -> Vec<Vec2<T>> {
        match self.previous {
            Some(prev) if prev.len() == self.current.len() => {
                self.current.positions.iter().zip(&prev.positions).map(|(&p, &q)| (p - q) / dt).collect()
            }
            _ => vec![Vec2::zero(); self.current.len()],
        }
    }
}

/// A memoryless ego policy u = π(x, τ).
pub trait Policy<T: Scalar>: Sync {
    fn act(&self, obs: &Observation<'_, T>) -> ControlInput<T>;
}

/// Converts a desired planar velocity into (accel, steer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tracker {
    pub heading_gain: f64,
    pub speed_gain: f64,
    /// Fraction of the desired speed kept while the heading error is large.
    pub min_alignment: f64,
}

impl Default for Tracker {
    fn default() -> Self {
        Tracker { heading_gain: 2.0, speed_gain: 3.0, min_alignment: 0.3 }
    }
}

impl Tracker {
    pub fn track<T: Scalar>(&self, state: &SystemState<T>, desired: Vec2<T>, vehicle: &VehicleParams) -> ControlInput<T> {
        let speed = desired.norm();
        if speed <= T::lit(1e-9) {
            let accel = -T::lit(self.speed_gain) * state.speed;
            return clamp_input(&ControlInput::new(accel, T::zero()), vehicle);
        }
        let err = wrap_angle(desired.y.atan2(desired.x) - state.heading);
        let steer = T::lit(self.heading_gain) * err;
        let target = speed * err.cos().max(T::lit(self.min_alignment));
        let accel = T::lit(self.speed_gain) * (target - state.speed);
        clamp_input(&ControlInput::new(accel, steer), vehicle)
    }
}

/// Goal-directed velocity, slowing down within `speed / approach_gain` of the goal.
fn goal_velocity<T: Scalar>(
    state: &SystemState<T>,
    goal: Vec2<T>,
    speed: f64,
    approach_gain: f64,
) -> Vec2<T> {
    let p = state.position();
    let to_goal = goal - p;
    let dist = to_goal.norm();
    if dist <= T::lit(1e-9) {
        return Vec2::zero();
    }
    let s = T::lit(speed).min(T::lit(approach_gain) * dist);
    to_goal * (s / dist)
}

/// Fast goal-seeker that reacts to agents only at very short range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GoalSeeker {
    pub speed: f64,
    pub approach_gain: f64,
    /// Repulsion acts only inside this center distance.
    pub avoid_range: f64,
    pub avoid_gain: f64,
    pub tracker: Tracker,
    pub vehicle: VehicleParams,
}

impl Default for GoalSeeker {
    fn default() -> Self {
        GoalSeeker {
            speed: 1.6,
            approach_gain: 2.0,
            avoid_range: 1.2,
            avoid_gain: 1.0,
            tracker: Tracker::default(),
            vehicle: VehicleParams::default(),
        }
    }
}

impl<T: Scalar> Policy<T> for GoalSeeker {
    fn act(&self, obs: &Observation<'_, T>) -> ControlInput<T> {
        let mut v = goal_velocity(obs.state, obs.goal, self.speed, self.approach_gain);
        let p = obs.state.position();
        let range = T::lit(self.avoid_range);
        for &q in &obs.current.positions {
            let d = p - q;
            let dist = d.norm();
            if dist < range && dist > T::lit(1e-9) {
                v += d * (T::lit(self.avoid_gain) * (range - dist) / (range * dist));
            }
        }
        self.tracker.track(obs.state, v.clamp_norm(T::lit(self.vehicle.v_max)), &self.vehicle)
    }
}

/// ORCA in velocity space for a disk of the ego's radius, then tracked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrcaEgo {
    pub speed: f64,
    pub approach_gain: f64,
    pub time_horizon: f64,
    pub system_radius: f64,
    pub agent_radius: f64,
    /// Only agents closer than this are considered.
    pub neighbor_range: f64,
    pub dt: f64,
    pub tracker: Tracker,
    pub vehicle: VehicleParams,
}

impl Default for OrcaEgo {
    fn default() -> Self {
        OrcaEgo {
            speed: 1.2,
            approach_gain: 2.0,
            time_horizon: 2.0,
            system_radius: 0.5,
            agent_radius: 0.5,
            neighbor_range: 5.0,
            dt: 0.1,
            tracker: Tracker::default(),
            vehicle: VehicleParams::default(),
        }
    }
}

impl<T: Scalar> Policy<T> for OrcaEgo {
    fn act(&self, obs: &Observation<'_, T>) -> ControlInput<T> {
        let dt = T::lit(self.dt);
        let preferred = goal_velocity(obs.state, obs.goal, self.speed, self.approach_gain);
        let ego = AgentModel {
            position: obs.state.position(),
            velocity: obs.state.velocity(),
            goal: obs.goal,
            radius: T::lit(self.system_radius),
            pref_speed: T::lit(self.speed),
            policy_kind: PolicyKind::Orca,
        };
        let velocities = obs.agent_velocities(dt);
        let others: Vec<AgentModel<T>> = obs
            .current
            .positions
            .iter()
            .zip(velocities)
            .filter(|(&q, _)| (q - ego.position).norm() < T::lit(self.neighbor_range))
            .map(|(&q, v)| AgentModel {
                position: q,
                velocity: v,
                goal: q,
                radius: T::lit(self.agent_radius),
                pref_speed: v.norm(),
                policy_kind: PolicyKind::Orca,
            })
            .collect();
        let refs: Vec<&AgentModel<T>> = others.iter().collect();
        let v = orca_velocity_towards(&ego, &refs, preferred, T::lit(self.speed), T::lit(self.time_horizon), dt);
        self.tracker.track(obs.state, v, &self.vehicle)
    }
}

/// Brakes to a stop and stays there.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StandStill {
    pub vehicle: VehicleParams,
}

impl<T: Scalar> Policy<T> for StandStill {
    fn act(&self, obs: &Observation<'_, T>) -> ControlInput<T> {
        Tracker::default().track(obs.state, Vec2::zero(), &self.vehicle)
    }
}

/// Always returns the zero input (coasting).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ZeroInput;

impl<T: Scalar> Policy<T> for ZeroInput {
    fn act(&self, _: &Observation<'_, T>) -> ControlInput<T> {
        ControlInput::zero()
    }
}

/// Named nominal policy selectable from configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NominalPolicy {
    GoalSeeker(GoalSeeker),
    Orca(OrcaEgo),
    StandStill(StandStill),
    Zero,
}

impl<T: Scalar> Policy<T> for NominalPolicy {
    fn act(&self, obs: &Observation<'_, T>) -> ControlInput<T> {
        match self {
            NominalPolicy::GoalSeeker(p) => p.act(obs),
            NominalPolicy::Orca(p) => p.act(obs),
            NominalPolicy::StandStill(p) => p.act(obs),
            NominalPolicy::Zero => ZeroInput.act(obs),
        }
    }
}

/// Drives a rollout directly with a policy.
pub struct PolicyController<'a, T: Scalar> {
    pub policy: &'a dyn Policy<T>,
}

impl<T: Scalar> SystemController<T> for PolicyController<'_, T> {
    fn control(&mut self, state: &SystemState<T>, goal: Vec2<T>, history: &[AgentSnapshot<T>]) -> Result<ControlInput<T>> {
        let n = history.len();
        let obs = Observation {
            state,
            goal,
            current: &history[n - 1],
            previous: if n >= 2 { Some(&history[n - 2]) } else { None },
        };
        Ok(self.policy.act(&obs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::rollout_scenario;
    use crate::world::{sample_scenario, ScenarioConfig};

    fn obs_at<'a>(state: &'a SystemState<f64>, snap: &'a AgentSnapshot<f64>, goal: Vec2<f64>) -> Observation<'a, f64> {
        Observation { state, goal, current: snap, previous: None }
    }

    #[test]
    fn tracker_turns_toward_target_and_respects_bounds() {
        let v = VehicleParams::default();
        let s = SystemState::new(0.0, 0.0, 0.0, 1.0);
        let u = Tracker::default().track(&s, Vec2::new(0.0, 1.0), &v);
        assert!(u.steer > 0.0 && u.steer <= v.steer_max);
        assert!(u.accel.abs() <= v.a_max);
        let u = Tracker::default().track(&s, Vec2::new(0.0, -1.0), &v);
        assert!(u.steer < 0.0);
    }

    #[test]
    fn stand_still_brakes() {
        let s = SystemState::new(0.0, 0.0, 0.3, 1.5);
        let snap = AgentSnapshot::new(vec![]);
        let u: ControlInput<f64> = StandStill::default().act(&obs_at(&s, &snap, Vec2::new(5.0, 0.0)));
        assert!(u.accel < 0.0);
        assert_eq!(u.steer, 0.0);
    }

    #[test]
    fn goal_seeker_reaches_goal_without_agents() {
        let cfg = ScenarioConfig { num_agents: 1, horizon_t: 80, ..Default::default() };
        let mut sc: crate::world::Scenario<f64> = sample_scenario(&cfg, 4).unwrap();
        sc.agents.clear();
        let policy = GoalSeeker::default();
        let (_, m) = rollout_scenario(&cfg, &sc, &mut PolicyController { policy: &policy }, 4).unwrap();
        assert!(m.reached(), "{m:?}");
        let orca = OrcaEgo::default();
        let (_, m) = rollout_scenario(&cfg, &sc, &mut PolicyController { policy: &orca }, 4).unwrap();
        assert!(m.reached(), "{m:?}");
    }

    #[test]
    fn orca_ego_yields_to_oncoming_agent() {
        let s = SystemState::new(0.0, 0.0, 0.0, 1.2);
        let now = AgentSnapshot::new(vec![Vec2::new(2.0, 0.0)]);
        let before = AgentSnapshot::new(vec![Vec2::new(2.1, 0.0)]);
        let obs = Observation { state: &s, goal: Vec2::new(6.0, 0.0), current: &now, previous: Some(&before) };
        let u: ControlInput<f64> = OrcaEgo::default().act(&obs);
        let free: ControlInput<f64> =
            OrcaEgo::default().act(&Observation { current: &AgentSnapshot::new(vec![]), previous: None, ..obs });
        assert!(u.steer != 0.0 || u.accel < free.accel);
    }

    #[test]
    fn nominal_policy_serializes_with_kind_tag() {
        let p = NominalPolicy::GoalSeeker(GoalSeeker::default());
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains(r#""kind":"goal_seeker""#));
        let back: NominalPolicy = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }
}
