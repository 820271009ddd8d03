//! Ego-vehicle kinematics, input bounds and scenario sampling.
//!
//! The ego system is a kinematic bicycle with state `(x, y, heading, speed)`
//! and input `(accel, steer)`. Ambient agents are points moving in the plane;
//! their starts and goals are drawn by [`sample_scenario`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::AmbientConfig;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::scalar::{wrap_angle, Scalar};

/// Ego pose and speed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemState<T> {
    pub pos_x: T,
    pub pos_y: T,
    pub heading: T,
    pub speed: T,
}

impl<T: Scalar> SystemState<T> {
    pub fn new(pos_x: T, pos_y: T, heading: T, speed: T) -> Self {
        SystemState { pos_x, pos_y, heading, speed }
    }

    pub fn position(&self) -> Vec2<T> {
        Vec2::new(self.pos_x, self.pos_y)
    }

    pub fn velocity(&self) -> Vec2<T> {
        let (s, c) = self.heading.sin_cos();
        Vec2::new(c * self.speed, s * self.speed)
    }

    pub fn is_finite(&self) -> bool {
        self.pos_x.is_finite() && self.pos_y.is_finite() && self.heading.is_finite() && self.speed.is_finite()
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.pos_x, self.pos_y, self.heading, self.speed]
    }
}

/// Longitudinal acceleration and front-wheel steering angle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput<T> {
    pub accel: T,
    pub steer: T,
}

impl<T: Scalar> ControlInput<T> {
    pub fn new(accel: T, steer: T) -> Self {
        ControlInput { accel, steer }
    }

    pub fn zero() -> Self {
        ControlInput { accel: T::zero(), steer: T::zero() }
    }

    pub fn is_finite(&self) -> bool {
        self.accel.is_finite() && self.steer.is_finite()
    }
}

/// Bicycle geometry and actuator limits. Together they define the input set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub steer_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams { wheelbase: 1.0, v_max: 2.0, a_max: 2.0, steer_max: 0.6 }
    }
}

/// One kinematic bicycle step.
///
/// Position advances with the pre-update speed and heading, then the heading
/// turns by `v / L * tan(steer) * dt` and speed integrates the acceleration,
/// clamped to `[0, v_max]`.
pub fn step_dynamics<T: Scalar>(
    state: &SystemState<T>,
    input: &ControlInput<T>,
    params: &VehicleParams,
    dt: T,
) -> Result<SystemState<T>> {
    if !state.is_finite() || !input.is_finite() || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite state {state:?} or input {input:?}")));
    }
    if dt <= T::zero() {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let (s, c) = state.heading.sin_cos();
    let v = state.speed;
    let yaw_rate = v / T::lit(params.wheelbase) * input.steer.tan();
    Ok(SystemState {
        pos_x: state.pos_x + v * c * dt,
        pos_y: state.pos_y + v * s * dt,
        heading: wrap_angle(state.heading + yaw_rate * dt),
        speed: (v + input.accel * dt).max(T::zero()).min(T::lit(params.v_max)),
    })
}

/// Clips each input component into its actuator bound.
pub fn clamp_input<T: Scalar>(input: &ControlInput<T>, params: &VehicleParams) -> ControlInput<T> {
    let a = T::lit(params.a_max);
    let s = T::lit(params.steer_max);
    ControlInput { accel: input.accel.max(-a).min(a), steer: input.steer.max(-s).min(s) }
}

/// Positions of all ambient agents at one instant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentSnapshot<T> {
    pub positions: Vec<Vec2<T>>,
}

impl<T: Scalar> AgentSnapshot<T> {
    pub fn new(positions: Vec<Vec2<T>>) -> Self {
        AgentSnapshot { positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|p| p.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub num_agents: usize,
    /// Seconds per step.
    pub dt: f64,
    /// Episode length in steps.
    pub horizon_t: usize,
    pub agent_radius: f64,
    pub system_radius: f64,
    pub goal_tolerance: f64,
    pub workspace_half_width: f64,
    pub rng_seed: u64,
    /// Extra gap added to the radii when separating sampled starts.
    pub clearance: f64,
    /// Ambient agents draw their preferred speed uniformly from this range.
    pub agent_pref_speed: [f64; 2],
    /// Minimum start-goal distance for an ambient agent.
    pub min_trip: f64,
    /// Ego start/goal lie at `x = -/+ ego_span * half_width`.
    pub ego_span: f64,
    pub vehicle: VehicleParams,
    pub ambient: AmbientConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            num_agents: 4,
            dt: 0.1,
            horizon_t: 80,
            agent_radius: 0.5,
            system_radius: 0.5,
            goal_tolerance: 0.3,
            workspace_half_width: 6.0,
            rng_seed: 0,
            clearance: 0.25,
            agent_pref_speed: [0.8, 1.2],
            min_trip: 2.0,
            ego_span: 0.7,
            vehicle: VehicleParams::default(),
            ambient: AmbientConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.horizon_t < 1 {
            return bad("horizon_t must be at least 1");
        }
        if self.num_agents < 1 {
            return bad("num_agents must be at least 1");
        }
        if !(self.agent_radius > 0.0 && self.system_radius > 0.0) {
            return bad("radii must be positive");
        }
        if !(self.workspace_half_width > self.agent_radius) {
            return bad("workspace too small for the agent radius");
        }
        let [lo, hi] = self.agent_pref_speed;
        if !(lo > 0.0 && hi >= lo && hi <= self.vehicle.v_max) {
            return bad("agent_pref_speed must satisfy 0 < lo <= hi <= v_max");
        }
        Ok(())
    }

    /// Center distance below which the ego and an agent are in collision.
    pub fn collision_distance(&self) -> f64 {
        self.system_radius + self.agent_radius
    }

    /// Minimum pairwise start separation enforced by [`sample_scenario`].
    pub fn start_separation(&self) -> f64 {
        2.0 * (self.agent_radius + self.clearance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec<T> {
    pub start: Vec2<T>,
    pub goal: Vec2<T>,
    pub pref_speed: T,
}

/// Initial condition of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario<T> {
    pub system_start: SystemState<T>,
    pub system_goal: Vec2<T>,
    pub agents: Vec<AgentSpec<T>>,
}

const MAX_ATTEMPTS: usize = 10_000;

/// Draws ego and agent starts/goals.
///
/// The ego crosses the workspace left to right. Each agent starts uniformly in
/// the workspace and heads for the point-reflected position (with jitter), so
/// trajectories cross near the center. Starts are rejection-sampled to keep
/// [`ScenarioConfig::start_separation`] between every pair, ego included.
pub fn sample_scenario<T: Scalar>(config: &ScenarioConfig, rng_seed: u64) -> Result<Scenario<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = config.workspace_half_width;
    let inner = w - config.agent_radius;
    let sep = config.start_separation();
    let lane = 0.5 * config.ego_span * w;

    let ego_start = [-config.ego_span * w, rng.random_range(-lane..=lane)];
    let ego_goal = [config.ego_span * w, rng.random_range(-lane..=lane)];
    let heading = (ego_goal[1] - ego_start[1]).atan2(ego_goal[0] - ego_start[0]);

    let dist = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
    let mut starts: Vec<[f64; 2]> = vec![ego_start];
    let mut goals: Vec<[f64; 2]> = vec![ego_goal];
    let mut agents = Vec::with_capacity(config.num_agents);
    let [sp_lo, sp_hi] = config.agent_pref_speed;

    let mut attempts = 0;
    while agents.len() < config.num_agents {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::ScenarioInfeasible { attempts: MAX_ATTEMPTS });
        }
        let s = [rng.random_range(-inner..=inner), rng.random_range(-inner..=inner)];
        let jitter = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        let g = [(-s[0] + jitter[0]).clamp(-inner, inner), (-s[1] + jitter[1]).clamp(-inner, inner)];
        let speed = if sp_hi > sp_lo { rng.random_range(sp_lo..=sp_hi) } else { sp_lo };
        if dist(s, g) < config.min_trip {
            continue;
        }
        if starts.iter().any(|&o| dist(o, s) < sep) || goals.iter().any(|&o| dist(o, g) < sep) {
            continue;
        }
        starts.push(s);
        goals.push(g);
        agents.push(AgentSpec {
            start: Vec2::new(T::lit(s[0]), T::lit(s[1])),
            goal: Vec2::new(T::lit(g[0]), T::lit(g[1])),
            pref_speed: T::lit(speed),
        });
    }

    Ok(Scenario {
        system_start: SystemState::new(T::lit(ego_start[0]), T::lit(ego_start[1]), T::lit(heading), T::zero()),
        system_goal: Vec2::new(T::lit(ego_goal[0]), T::lit(ego_goal[1])),
        agents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn rest_is_fixed_point() {
        let s = SystemState::new(0.0, 0.0, 0.0, 0.0);
        let out = step_dynamics(&s, &ControlInput::zero(), &params(), 0.1).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn straight_coast() {
        let s = SystemState::new(0.0, 0.0, 0.0, 1.0);
        let out = step_dynamics(&s, &ControlInput::zero(), &params(), 0.1).unwrap();
        assert_eq!(out, SystemState::new(0.1, 0.0, 0.0, 1.0));
    }

    #[test]
    fn turning_step_matches_hand_evaluation() {
        // Hand evaluation of the four update formulas, L = 1.
        let (th, v, a, d, dt) = (FRAC_PI_2, 2.0f64, 1.0, 0.2f64, 0.1);
        let expect_x = v * th.cos() * dt; // ~1.2246e-17
        let expect_y = 0.2;
        let expect_th = th + v * d.tan() * dt; // pi/2 + 0.2 * tan(0.2)
        let expect_v = 2.0f64.min(v + a * dt); // saturates at v_max = 2

        let s = SystemState::new(0.0, 0.0, th, v);
        let out = step_dynamics(&s, &ControlInput::new(a, d), &params(), dt).unwrap();
        assert!((out.pos_x - expect_x).abs() < 1e-15);
        assert!((out.pos_y - expect_y).abs() < 1e-15);
        assert!((out.heading - expect_th).abs() < 1e-15);
        assert!((out.heading - 1.611_338_333_9).abs() < 1e-9);
        assert_eq!(out.speed, expect_v);
    }

    #[test]
    fn rejects_non_finite() {
        let s = SystemState::new(f64::NAN, 0.0, 0.0, 0.0);
        assert!(matches!(
            step_dynamics(&s, &ControlInput::zero(), &params(), 0.1),
            Err(Error::InvalidInput(_))
        ));
        let s = SystemState::new(0.0, 0.0, 0.0, 0.0);
        assert!(step_dynamics(&s, &ControlInput::new(f64::INFINITY, 0.0), &params(), 0.1).is_err());
        assert!(step_dynamics(&s, &ControlInput::zero(), &params(), 0.0).is_err());
    }

    #[test]
    fn clamp_examples() {
        let p = params();
        assert_eq!(clamp_input(&ControlInput::new(0.0, 0.0), &p), ControlInput::new(0.0, 0.0));
        assert_eq!(clamp_input(&ControlInput::new(1e9, -1e9), &p), ControlInput::new(2.0, -0.6));
    }

    #[test]
    fn straight_line_without_steer() {
        let p = params();
        let mut s = SystemState::new(1.0, 2.0, 0.7, 0.5);
        let dir = Vec2::new(0.7f64.cos(), 0.7f64.sin());
        for k in 0..50 {
            let a = if k % 3 == 0 { 1.5 } else { -0.4 };
            s = step_dynamics(&s, &ControlInput::new(a, 0.0), &p, 0.1).unwrap();
            assert_eq!(s.heading, 0.7);
        }
        let off = s.position() - Vec2::new(1.0, 2.0);
        assert!(off.cross(dir).abs() < 1e-12);
    }

    #[test]
    fn scenario_is_reproducible() {
        let cfg = ScenarioConfig::default();
        let a: Scenario<f64> = sample_scenario(&cfg, 42).unwrap();
        let b: Scenario<f64> = sample_scenario(&cfg, 42).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c: Scenario<f64> = sample_scenario(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scenario_respects_separation_and_bounds() {
        let cfg = ScenarioConfig { num_agents: 4, ..Default::default() };
        for seed in 0..200 {
            let sc: Scenario<f64> = sample_scenario(&cfg, seed).unwrap();
            assert_eq!(sc.agents.len(), 4);
            let mut starts = vec![sc.system_start.position()];
            starts.extend(sc.agents.iter().map(|a| a.start));
            for i in 0..starts.len() {
                for j in i + 1..starts.len() {
                    assert!((starts[i] - starts[j]).norm() >= cfg.start_separation());
                }
            }
            let w = cfg.workspace_half_width;
            for a in &sc.agents {
                for p in [a.start, a.goal] {
                    assert!(p.x.abs() <= w && p.y.abs() <= w);
                }
            }
        }
    }

    #[test]
    fn scenario_starts_cover_workspace() {
        let cfg = ScenarioConfig::default();
        let w = cfg.workspace_half_width;
        let cells = 12usize;
        let mut hit = vec![false; cells * cells];
        for seed in 0..1000 {
            let sc: Scenario<f64> = sample_scenario(&cfg, seed).unwrap();
            for a in &sc.agents {
                let ix = (((a.start.x + w) / (2.0 * w)) * cells as f64).floor().min(cells as f64 - 1.0) as usize;
                let iy = (((a.start.y + w) / (2.0 * w)) * cells as f64).floor().min(cells as f64 - 1.0) as usize;
                hit[iy * cells + ix] = true;
            }
        }
        let frac = hit.iter().filter(|&&h| h).count() as f64 / hit.len() as f64;
        assert!(frac >= 0.9, "coverage {frac}");
    }

    #[test]
    fn overcrowded_scenario_is_infeasible() {
        let cfg = ScenarioConfig { num_agents: 500, workspace_half_width: 2.0, ..Default::default() };
        assert!(matches!(
            sample_scenario::<f64>(&cfg, 1),
            Err(Error::ScenarioInfeasible { .. })
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ScenarioConfig { dt: 0.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(a in -1e6f64..1e6, s in -1e6f64..1e6) {
            let p = params();
            let once = clamp_input(&ControlInput::new(a, s), &p);
            prop_assert_eq!(clamp_input(&once, &p), once);
        }

        #[test]
        fn rollout_stays_in_bounds(inputs in proptest::collection::vec((-2.0f64..2.0, -0.6f64..0.6), 1..120)) {
            let p = params();
            let mut s = SystemState::new(0.0, 0.0, 0.0, 1.0);
            for (a, d) in inputs {
                let next = step_dynamics(&s, &ControlInput::new(a, d), &p, 0.1).unwrap();
                let again = step_dynamics(&s, &ControlInput::new(a, d), &p, 0.1).unwrap();
                prop_assert_eq!(next, again);
                s = next;
                prop_assert!(s.speed >= 0.0 && s.speed <= p.v_max);
                prop_assert!(s.heading > -std::f64::consts::PI && s.heading <= std::f64::consts::PI);
            }
        }
    }
}
