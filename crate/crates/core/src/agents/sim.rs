//! Episode simulation and dataset generation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AgentModel;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::harness::metrics::EpisodeMetrics;
use crate::scalar::Scalar;
use crate::world::{clamp_input, sample_scenario, step_dynamics, AgentSnapshot, ControlInput, Scenario, ScenarioConfig, SystemState};

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

/// One recorded episode. Agents-only episodes leave the `system` fields empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord<T> {
    pub schema_version: u32,
    pub seed: u64,
    pub num_agents: usize,
    pub dt: f64,
    /// Agent positions, one snapshot per step starting at t = 0.
    pub steps: Vec<AgentSnapshot<T>>,
    pub goals: Vec<Vec2<T>>,
    /// Per-agent radii.
    pub radii: Vec<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<Vec<SystemState<T>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_goal: Option<Vec2<T>>,
}

impl<T: Scalar> TrajectoryRecord<T> {
    /// Number of recorded snapshots.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Snapshots `0..=t`.
    pub fn history(&self, t: usize) -> &[AgentSnapshot<T>] {
        &self.steps[..=t]
    }
}

/// The ego-side controller driven by [`rollout_episode`].
pub trait SystemController<T: Scalar> {
    /// Input to apply given the current state and all agent snapshots so far
    /// (the last entry is the current one).
    fn control(&mut self, state: &SystemState<T>, goal: Vec2<T>, history: &[AgentSnapshot<T>]) -> Result<ControlInput<T>>;
}

impl<T: Scalar, F> SystemController<T> for F
where
    F: FnMut(&SystemState<T>, Vec2<T>, &[AgentSnapshot<T>]) -> Result<ControlInput<T>>,
{
    fn control(&mut self, state: &SystemState<T>, goal: Vec2<T>, history: &[AgentSnapshot<T>]) -> Result<ControlInput<T>> {
        self(state, goal, history)
    }
}

fn initial_agents<T: Scalar>(config: &ScenarioConfig, scenario: &Scenario<T>) -> Vec<AgentModel<T>> {
    scenario
        .agents
        .iter()
        .map(|a| AgentModel {
            position: a.start,
            velocity: Vec2::zero(),
            goal: a.goal,
            radius: T::lit(config.agent_radius),
            pref_speed: a.pref_speed,
            policy_kind: config.ambient.policy,
        })
        .collect()
}

fn step_agents<T: Scalar>(agents: &mut [AgentModel<T>], config: &ScenarioConfig) {
    let dt = T::lit(config.dt);
    let velocities: Vec<Vec2<T>> = (0..agents.len())
        .map(|i| {
            let neighbors: Vec<&AgentModel<T>> =
                agents.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, a)| a).collect();
            config.ambient.velocity(&agents[i], &neighbors, dt)
        })
        .collect();
    for (agent, v) in agents.iter_mut().zip(velocities) {
        agent.velocity = v;
        agent.position += v * dt;
    }
}

fn snapshot<T: Scalar>(agents: &[AgentModel<T>]) -> AgentSnapshot<T> {
    AgentSnapshot::new(agents.iter().map(|a| a.position).collect())
}

/// Agents-only simulation for `horizon_t` steps (`horizon_t + 1` snapshots).
/// Ambient agents never react to the ego, so this is also exactly the agent
/// motion seen during ego episodes with the same scenario.
pub fn simulate_agents<T: Scalar>(config: &ScenarioConfig, scenario: &Scenario<T>, seed: u64) -> TrajectoryRecord<T> {
    let mut agents = initial_agents(config, scenario);
    let mut steps = Vec::with_capacity(config.horizon_t + 1);
    steps.push(snapshot(&agents));
    for _ in 0..config.horizon_t {
        step_agents(&mut agents, config);
        steps.push(snapshot(&agents));
    }
    TrajectoryRecord {
        schema_version: TRAJECTORY_SCHEMA_VERSION,
        seed,
        num_agents: agents.len(),
        dt: config.dt,
        steps,
        goals: agents.iter().map(|a| a.goal).collect(),
        radii: agents.iter().map(|a| a.radius).collect(),
        system: None,
        system_goal: None,
    }
}

fn min_distance<T: Scalar>(p: Vec2<T>, snap: &AgentSnapshot<T>) -> T {
    snap.positions.iter().map(|&q| (q - p).norm()).fold(T::infinity(), T::min)
}

/// Runs the ego under `controller` through a given scenario.
///
/// The episode ends on goal arrival, on collision, or after `horizon_t` steps.
pub fn rollout_scenario<T: Scalar>(
    config: &ScenarioConfig,
    scenario: &Scenario<T>,
    controller: &mut dyn SystemController<T>,
    seed: u64,
) -> Result<(TrajectoryRecord<T>, EpisodeMetrics)> {
    config.validate()?;
    let dt = T::lit(config.dt);
    let goal = scenario.system_goal;
    let tolerance = T::lit(config.goal_tolerance);
    let collision = T::lit(config.collision_distance());

    let mut agents = initial_agents(config, scenario);
    let mut history = vec![snapshot(&agents)];
    let mut x = scenario.system_start;
    let mut states = vec![x];

    let mut min_dist = min_distance(x.position(), &history[0]);
    let mut collided = min_dist < collision;
    let mut reached = !collided && (x.position() - goal).norm() <= tolerance;
    let mut steps_taken = 0;

    while !collided && !reached && steps_taken < config.horizon_t {
        let u = controller
            .control(&x, goal, &history)
            .map_err(|e| e.in_stage("system controller"))?;
        if !u.is_finite() {
            return Err(Error::Controller { step: steps_taken });
        }
        x = step_dynamics(&x, &clamp_input(&u, &config.vehicle), &config.vehicle, dt)?;
        step_agents(&mut agents, config);
        history.push(snapshot(&agents));
        states.push(x);
        steps_taken += 1;

        let d = min_distance(x.position(), history.last().expect("non-empty"));
        min_dist = min_dist.min(d);
        collided = d < collision;
        reached = !collided && (x.position() - goal).norm() <= tolerance;
    }

    let time_to_goal = if reached { steps_taken as f64 * config.dt } else { config.horizon_t as f64 * config.dt };
    let metrics = EpisodeMetrics {
        collided,
        failed: !collided && !reached,
        min_agent_distance: min_dist.to_f64_lossy(),
        time_to_goal,
        steps_taken,
    };
    let record = TrajectoryRecord {
        schema_version: TRAJECTORY_SCHEMA_VERSION,
        seed,
        num_agents: agents.len(),
        dt: config.dt,
        steps: history,
        goals: agents.iter().map(|a| a.goal).collect(),
        radii: agents.iter().map(|a| a.radius).collect(),
        system: Some(states),
        system_goal: Some(goal),
    };
    Ok((record, metrics))
}

/// Samples a scenario from `seed` and runs it.
pub fn rollout_episode<T: Scalar>(
    config: &ScenarioConfig,
    controller: &mut dyn SystemController<T>,
    seed: u64,
) -> Result<(TrajectoryRecord<T>, EpisodeMetrics)> {
    let scenario = sample_scenario(config, seed)?;
    rollout_scenario(config, &scenario, controller, seed)
}

/// Mixes a master seed with a stream tag and an index (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tag for dataset episodes.
pub const DATASET_STREAM: u64 = 1;

/// Fractions of `K` episodes assigned to predictor training, filter training
/// and calibration, plus a fixed number of extra calibration episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_y: f64,
    pub train_sf: f64,
    pub cal: f64,
    #[serde(default)]
    pub extra_cal: usize,
}

impl DatasetSplit {
    /// `(train_y, train_sf, cal)` sizes for `k` episodes.
    pub fn sizes(&self, k: usize) -> Result<(usize, usize, usize)> {
        let sum = self.train_y + self.train_sf + self.cal;
        if !(self.train_y > 0.0 && self.train_sf > 0.0 && self.cal >= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("split fractions must be positive and sum to 1, got {self:?}")));
        }
        let ny = (k as f64 * self.train_y).round() as usize;
        let ns = ((k as f64 * self.train_sf).round() as usize).min(k - ny.min(k));
        let nc = k - ny.min(k) - ns;
        Ok((ny.min(k), ns, nc + self.extra_cal))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Datasets<T> {
    pub train_y: Vec<TrajectoryRecord<T>>,
    pub train_sf: Vec<TrajectoryRecord<T>>,
    pub cal: Vec<TrajectoryRecord<T>>,
}

/// Agents-only episodes for explicit seeds, in seed order.
pub fn episodes_for_seeds<T: Scalar>(config: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<TrajectoryRecord<T>>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let scenario = sample_scenario::<T>(config, seed)?;
            Ok(simulate_agents(config, &scenario, seed))
        })
        .collect()
}

/// `k` (+ extra calibration) independent agents-only episodes split into
/// disjoint predictor-training, filter-training and calibration sets.
pub fn generate_dataset<T: Scalar>(
    config: &ScenarioConfig,
    k: usize,
    split: &DatasetSplit,
    rng_seed: u64,
) -> Result<Datasets<T>> {
    let (ny, ns, nc) = split.sizes(k)?;
    let seeds: Vec<u64> = (0..(ny + ns + nc) as u64).map(|i| derive_seed(rng_seed, DATASET_STREAM, i)).collect();
    let mut all = episodes_for_seeds(config, &seeds)?;
    let cal = all.split_off(ny + ns);
    let train_sf = all.split_off(ny);
    Ok(Datasets { train_y: all, train_sf, cal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::PolicyKind;
    use crate::world::AgentSpec;

    fn small_config() -> ScenarioConfig {
        ScenarioConfig { num_agents: 2, horizon_t: 30, ..Default::default() }
    }

    fn stand_still(_: &SystemState<f64>, _: Vec2<f64>, _: &[AgentSnapshot<f64>]) -> Result<ControlInput<f64>> {
        Ok(ControlInput::zero())
    }

    #[test]
    fn start_at_goal_is_immediate_arrival() {
        let cfg = small_config();
        let mut sc: Scenario<f64> = sample_scenario(&cfg, 3).unwrap();
        sc.system_goal = sc.system_start.position();
        let (rec, m) = rollout_scenario(&cfg, &sc, &mut stand_still, 3).unwrap();
        assert_eq!(m.time_to_goal, 0.0);
        assert_eq!(m.steps_taken, 0);
        assert!(!m.collided && !m.failed);
        assert_eq!(rec.steps.len(), 1);
    }

    #[test]
    fn standing_still_times_out() {
        let cfg = small_config();
        let mut sc: Scenario<f64> = sample_scenario(&cfg, 5).unwrap();
        // Route agents far away from the ego.
        for (k, a) in sc.agents.iter_mut().enumerate() {
            a.start = Vec2::new(4.0, 4.0 - 2.0 * k as f64);
            a.goal = Vec2::new(5.0, 4.0 - 2.0 * k as f64);
        }
        let (_, m) = rollout_scenario(&cfg, &sc, &mut stand_still, 5).unwrap();
        assert!(m.failed && !m.collided);
        assert_eq!(m.steps_taken, cfg.horizon_t);
        assert!((m.time_to_goal - cfg.horizon_t as f64 * cfg.dt).abs() < 1e-12);
    }

    #[test]
    fn rollout_is_deterministic() {
        let cfg = small_config();
        let mut go = |x: &SystemState<f64>, g: Vec2<f64>, _: &[AgentSnapshot<f64>]| {
            let err = crate::scalar::wrap_angle((g - x.position()).y.atan2((g - x.position()).x) - x.heading);
            Ok(ControlInput::new(1.0, err))
        };
        let a = rollout_episode(&cfg, &mut go, 7).unwrap();
        let b = rollout_episode(&cfg, &mut go, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_controller_aborts() {
        let cfg = small_config();
        let mut bad = |_: &SystemState<f64>, _: Vec2<f64>, _: &[AgentSnapshot<f64>]| Ok(ControlInput::new(f64::NAN, 0.0));
        assert!(matches!(rollout_episode(&cfg, &mut bad, 1), Err(Error::Controller { step: 0 })));
    }

    #[test]
    fn collision_ends_episode() {
        let cfg = small_config();
        let sc = Scenario {
            system_start: SystemState::new(0.0, 0.0, 0.0, 0.0),
            system_goal: Vec2::new(5.0, 0.0),
            agents: vec![
                AgentSpec { start: Vec2::new(2.0, 0.0), goal: Vec2::new(-5.0, 0.0), pref_speed: 1.0 },
                AgentSpec { start: Vec2::new(0.0, 5.0), goal: Vec2::new(0.0, 5.5), pref_speed: 1.0 },
            ],
        };
        let mut go = |_: &SystemState<f64>, _: Vec2<f64>, _: &[AgentSnapshot<f64>]| Ok(ControlInput::new(2.0, 0.0));
        let (_, m) = rollout_scenario(&cfg, &sc, &mut go, 0).unwrap();
        assert!(m.collided && !m.failed);
        assert!(m.min_agent_distance < cfg.collision_distance());
        assert!(m.steps_taken < cfg.horizon_t);
    }

    #[test]
    fn split_sizes() {
        let s = DatasetSplit { train_y: 0.5, train_sf: 0.5, cal: 0.0, extra_cal: 1000 };
        assert_eq!(s.sizes(20_000).unwrap(), (10_000, 10_000, 1000));
        let s = DatasetSplit { train_y: 1.0 / 3.0, train_sf: 1.0 / 3.0, cal: 1.0 / 3.0, extra_cal: 0 };
        assert_eq!(s.sizes(3).unwrap(), (1, 1, 1));
        assert!(DatasetSplit { train_y: 0.5, train_sf: 0.6, cal: 0.0, extra_cal: 0 }.sizes(10).is_err());
    }

    #[test]
    fn three_episode_partition_is_disjoint() {
        let cfg = small_config();
        let s = DatasetSplit { train_y: 1.0 / 3.0, train_sf: 1.0 / 3.0, cal: 1.0 / 3.0, extra_cal: 0 };
        let d: Datasets<f64> = generate_dataset(&cfg, 3, &s, 11).unwrap();
        let seeds = [d.train_y[0].seed, d.train_sf[0].seed, d.cal[0].seed];
        assert_eq!((d.train_y.len(), d.train_sf.len(), d.cal.len()), (1, 1, 1));
        assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2] && seeds[0] != seeds[2]);
        let again: Datasets<f64> = generate_dataset(&cfg, 3, &s, 11).unwrap();
        assert_eq!(serde_json::to_string(&d).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn agents_only_record_matches_ego_episode_agents() {
        let cfg = small_config();
        let sc: Scenario<f64> = sample_scenario(&cfg, 9).unwrap();
        let agents_only = simulate_agents(&cfg, &sc, 9);
        let mut cfg_long = cfg.clone();
        cfg_long.goal_tolerance = 0.0;
        let sc_far = Scenario { system_goal: Vec2::new(100.0, 100.0), ..sc.clone() };
        let (rec, _) = rollout_scenario(&cfg_long, &sc_far, &mut stand_still, 9).unwrap();
        for (a, b) in rec.steps.iter().zip(&agents_only.steps) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn two_agent_orca_episodes_are_collision_free() {
        let mut cfg = ScenarioConfig { num_agents: 2, horizon_t: 80, ..Default::default() };
        cfg.ambient.policy = PolicyKind::Orca;
        for seed in 0..100 {
            let sc: Scenario<f64> = sample_scenario(&cfg, seed).unwrap();
            let rec = simulate_agents(&cfg, &sc, seed);
            for snap in &rec.steps {
                let d = (snap.positions[0] - snap.positions[1]).norm();
                assert!(d >= 2.0 * cfg.agent_radius, "seed {seed}: distance {d}");
            }
        }
    }
}
