//! Learned predictive safety filter: nominal rollouts under predicted agent
//! motion, a penalty-relaxed imitation objective, and receding-horizon
//! execution.

mod loss;
mod train;

pub use loss::{filter_loss, filter_loss_graph, filter_output_graph, LossParts};
pub use train::{build_sftrain, train_filter, validate_filter, FilterConfig, FilterCurve, FilterTrainingOutcome, FilterValidation, SftrainOptions};

use serde::{Deserialize, Serialize};

use crate::agents::{rollout_episode, rollout_scenario, SystemController, TrajectoryRecord};
use crate::controllers::{Observation, Policy};
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::harness::metrics::EpisodeMetrics;
use crate::learncore::{forward_mlp, ModelParams, Tensor, Topology};
use crate::predictor::TrajectoryPredictor;
use crate::scalar::{wrap_angle, Scalar};
use crate::world::{clamp_input, step_dynamics, AgentSnapshot, ControlInput, Scenario, ScenarioConfig, SystemState, VehicleParams};

/// Ego state dimension N and input dimension P.
pub const STATE_DIM: usize = 4;
pub const INPUT_DIM: usize = 2;

/// One D_sftrain entry, stored in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FilterTrainingRecord<T> {
    /// Seed of the source episode and the cut step.
    pub seed: u64,
    pub t: usize,
    pub state: SystemState<T>,
    pub goal: Vec2<T>,
    pub current: AgentSnapshot<T>,
    /// τ̄_{t+1..t+H}.
    pub predictions: Vec<AgentSnapshot<T>>,
    /// ū_{t..t+H-1}.
    pub nominal_inputs: Vec<ControlInput<T>>,
    /// x̄_{t+1..t+H}.
    pub nominal_states: Vec<SystemState<T>>,
    /// C_{t+1..t+H}, meters.
    pub radii: Vec<f64>,
}

impl<T: Scalar> FilterTrainingRecord<T> {
    pub fn horizon(&self) -> usize {
        self.radii.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.horizon();
        if self.predictions.len() != h || self.nominal_inputs.len() != h || self.nominal_states.len() != h {
            return Err(Error::InvalidInput(format!(
                "record horizons differ: radii {h}, predictions {}, inputs {}, states {}",
                self.predictions.len(),
                self.nominal_inputs.len(),
                self.nominal_states.len()
            )));
        }
        if let Some(bad) = self.predictions.iter().find(|s| s.len() != self.current.len()) {
            return Err(Error::AgentCount { expected: self.current.len(), found: bad.len() });
        }
        Ok(())
    }
}

/// Translation to the ego position followed by rotation by minus its heading.
#[derive(Clone, Copy, Debug)]
pub struct EgoFrame<T> {
    pub origin: Vec2<T>,
    pub heading: T,
}

impl<T: Scalar> EgoFrame<T> {
    pub fn of(state: &SystemState<T>) -> Self {
        EgoFrame { origin: state.position(), heading: state.heading }
    }

    pub fn point(&self, p: Vec2<T>) -> Vec2<T> {
        (p - self.origin).rotate(-self.heading)
    }

    /// `(x, y, relative heading, speed)` in this frame.
    pub fn state(&self, s: &SystemState<T>) -> [T; 4] {
        let p = self.point(s.position());
        [p.x, p.y, wrap_angle(s.heading - self.heading), s.speed]
    }
}

/// A record expressed in the ego frame at time t, agents sorted by current
/// distance to the ego.
#[derive(Clone, Debug)]
pub struct LocalRecord<T> {
    pub speed: T,
    /// `predictions[h][j]`.
    pub predictions: Vec<Vec<Vec2<T>>>,
    pub nominal_inputs: Vec<ControlInput<T>>,
    pub nominal_states: Vec<[T; 4]>,
    pub radii: Vec<T>,
}

impl<T: Scalar> LocalRecord<T> {
    pub fn horizon(&self) -> usize {
        self.radii.len()
    }
}

pub fn localize<T: Scalar>(record: &FilterTrainingRecord<T>) -> LocalRecord<T> {
    let frame = EgoFrame::of(&record.state);
    let ego = record.state.position();
    let mut order: Vec<usize> = (0..record.current.len()).collect();
    let dist = |j: usize| (record.current.positions[j] - ego).norm_sq().to_f64_lossy();
    order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
    LocalRecord {
        speed: record.state.speed,
        predictions: record
            .predictions
            .iter()
            .map(|snap| order.iter().map(|&j| frame.point(snap.positions[j])).collect())
            .collect(),
        nominal_inputs: record.nominal_inputs.clone(),
        nominal_states: record.nominal_states.iter().map(|s| frame.state(s)).collect(),
        radii: record.radii.iter().map(|&c| T::lit(c)).collect(),
    }
}

/// Feedforward safety filter over (τ̄, ū, x̄, C).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FilterModel<T> {
    pub params: ModelParams<T>,
    pub num_agents: usize,
    pub horizon: usize,
    /// Positions in the input are divided by this.
    pub length_scale: f64,
    pub vehicle: VehicleParams,
    pub dt: f64,
    /// Minimum clearance ε added to the radii in the constraint.
    pub epsilon: f64,
    /// Outputs are corrections added to ū (otherwise absolute inputs).
    pub residual: bool,
}

impl<T: Scalar> FilterModel<T> {
    pub fn input_dim(num_agents: usize, horizon: usize) -> usize {
        horizon * (2 * num_agents + INPUT_DIM + STATE_DIM + 1)
    }

    /// Glorot-initialized hidden layers; with `residual` the output layer
    /// starts at zero so the untrained filter reproduces ū.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        hidden: &[usize],
        num_agents: usize,
        horizon: usize,
        length_scale: f64,
        vehicle: VehicleParams,
        dt: f64,
        epsilon: f64,
        residual: bool,
        seed: u64,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidInput("filter horizon must be at least 1".into()));
        }
        let mut sizes = vec![Self::input_dim(num_agents, horizon)];
        sizes.extend_from_slice(hidden);
        sizes.push(INPUT_DIM * horizon);
        let topology = Topology::Mlp { sizes };
        topology.validate()?;
        let mut params = ModelParams::init(&topology, seed);
        if residual {
            let n = params.tensors.len();
            for t in &mut params.tensors[n - 2..] {
                t.tensor.data_mut().iter_mut().for_each(|w| *w = T::zero());
            }
        }
        Ok(FilterModel { params, num_agents, horizon, length_scale, vehicle, dt, epsilon, residual })
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let expected = Self::input_dim(self.num_agents, self.horizon);
        if self.params.topology.input_dim() != expected || self.params.topology.output_dim() != INPUT_DIM * self.horizon {
            return Err(Error::Shape {
                expected: vec![expected, INPUT_DIM * self.horizon],
                found: vec![self.params.topology.input_dim(), self.params.topology.output_dim()],
            });
        }
        Ok(())
    }

    /// Network input: τ̄ (2mH) | ū (PH) | x̄ (NH) | C (H).
    pub fn encode(&self, local: &LocalRecord<T>) -> Result<Vec<T>> {
        if local.horizon() != self.horizon {
            return Err(Error::Shape { expected: vec![self.horizon], found: vec![local.horizon()] });
        }
        if let Some(bad) = local.predictions.iter().find(|p| p.len() != self.num_agents) {
            return Err(Error::AgentCount { expected: self.num_agents, found: bad.len() });
        }
        let l = T::lit(self.length_scale);
        let a = T::lit(self.vehicle.a_max);
        let s = T::lit(self.vehicle.steer_max);
        let v = T::lit(self.vehicle.v_max);
        let mut x = Vec::with_capacity(Self::input_dim(self.num_agents, self.horizon));
        for snap in &local.predictions {
            for p in snap {
                x.extend([p.x / l, p.y / l]);
            }
        }
        for u in &local.nominal_inputs {
            x.extend([u.accel / a, u.steer / s]);
        }
        for st in &local.nominal_states {
            x.extend([st[0] / l, st[1] / l, st[2], st[3] / v]);
        }
        x.extend(local.radii.iter().copied());
        Ok(x)
    }

    /// Maps raw network outputs to clamped inputs û.
    pub fn decode(&self, out: &[T], nominal: &[ControlInput<T>]) -> Vec<ControlInput<T>> {
        let a = T::lit(self.vehicle.a_max);
        let s = T::lit(self.vehicle.steer_max);
        (0..self.horizon)
            .map(|h| {
                let (da, ds) = (out[2 * h] * a, out[2 * h + 1] * s);
                let raw = if self.residual {
                    ControlInput::new(nominal[h].accel + da, nominal[h].steer + ds)
                } else {
                    ControlInput::new(da, ds)
                };
                clamp_input(&raw, &self.vehicle)
            })
            .collect()
    }

    /// û_{t..t+H-1} for a record.
    pub fn filter_inputs(&self, record: &FilterTrainingRecord<T>) -> Result<Vec<ControlInput<T>>> {
        let local = localize(record);
        let x = self.encode(&local)?;
        let out = forward_mlp(&self.params, &Tensor::vector(x))?;
        Ok(self.decode(out.data(), &record.nominal_inputs))
    }
}

/// Forward simulation of the nominal policy: ū_t from the true snapshot,
/// later inputs from predicted snapshots. Returns (x̄_{t+1..t+H}, ū_{t..t+H-1}).
#[allow(clippy::too_many_arguments)]
pub fn nominal_rollout<T: Scalar>(
    state: &SystemState<T>,
    goal: Vec2<T>,
    current: &AgentSnapshot<T>,
    previous: Option<&AgentSnapshot<T>>,
    predictions: &[AgentSnapshot<T>],
    policy: &dyn Policy<T>,
    vehicle: &VehicleParams,
    dt: f64,
) -> Result<(Vec<SystemState<T>>, Vec<ControlInput<T>>)> {
    let horizon = predictions.len();
    let mut states = Vec::with_capacity(horizon);
    let mut inputs = Vec::with_capacity(horizon);
    let mut x = *state;
    for h in 0..horizon {
        let (cur, prev) = match h {
            0 => (current, previous),
            1 => (&predictions[0], Some(current)),
            _ => (&predictions[h - 1], Some(&predictions[h - 2])),
        };
        let u = policy.act(&Observation { state: &x, goal, current: cur, previous: prev });
        if !u.is_finite() {
            return Err(Error::Controller { step: h });
        }
        let u = clamp_input(&u, vehicle);
        x = step_dynamics(&x, &u, vehicle, T::lit(dt))?;
        inputs.push(u);
        states.push(x);
    }
    Ok((states, inputs))
}

/// Builds the filter's view of the current step.
#[allow(clippy::too_many_arguments)]
pub fn compose_record<T: Scalar>(
    state: &SystemState<T>,
    goal: Vec2<T>,
    history: &[AgentSnapshot<T>],
    predictor: &dyn TrajectoryPredictor<T>,
    policy: &dyn Policy<T>,
    radii: &[f64],
    vehicle: &VehicleParams,
    dt: f64,
) -> Result<FilterTrainingRecord<T>> {
    let n = history.len();
    if n == 0 {
        return Err(Error::Empty("agent history".into()));
    }
    let bundle = predictor.predict(history).map_err(|e| e.in_stage("predictor"))?;
    if bundle.horizon() != radii.len() {
        return Err(Error::Shape { expected: vec![radii.len()], found: vec![bundle.horizon()] });
    }
    let previous = if n >= 2 { Some(&history[n - 2]) } else { None };
    let (states, inputs) = nominal_rollout(state, goal, &history[n - 1], previous, &bundle.predicted, policy, vehicle, dt)
        .map_err(|e| e.in_stage("nominal rollout"))?;
    Ok(FilterTrainingRecord {
        seed: 0,
        t: n - 1,
        state: *state,
        goal,
        current: history[n - 1].clone(),
        predictions: bundle.predicted,
        nominal_inputs: inputs,
        nominal_states: states,
        radii: radii.to_vec(),
    })
}

/// One receding-horizon step: first element of û = π̂(τ̄, ū, x̄, C).
/// With any infinite radius the constraint is unsatisfiable and the nominal
/// input is returned instead.
#[allow(clippy::too_many_arguments)]
pub fn filtered_step<T: Scalar>(
    state: &SystemState<T>,
    goal: Vec2<T>,
    history: &[AgentSnapshot<T>],
    predictor: &dyn TrajectoryPredictor<T>,
    policy: &dyn Policy<T>,
    filter: &FilterModel<T>,
    radii: &[f64],
) -> Result<ControlInput<T>> {
    let record = compose_record(state, goal, history, predictor, policy, radii, &filter.vehicle, filter.dt)?;
    if radii.iter().any(|c| !c.is_finite()) {
        return Ok(record.nominal_inputs[0]);
    }
    let u = filter.filter_inputs(&record).map_err(|e| e.in_stage("safety filter"))?;
    Ok(u[0])
}

/// System controller running [`filtered_step`] once `t_obs` steps have been
/// observed and the nominal policy before that.
pub struct FilteredController<'a, T: Scalar> {
    pub predictor: &'a dyn TrajectoryPredictor<T>,
    pub policy: &'a dyn Policy<T>,
    pub filter: &'a FilterModel<T>,
    pub radii: &'a [f64],
    pub t_obs: usize,
}

impl<'a, T: Scalar> FilteredController<'a, T> {
    pub fn new(
        predictor: &'a dyn TrajectoryPredictor<T>,
        policy: &'a dyn Policy<T>,
        filter: &'a FilterModel<T>,
        radii: &'a [f64],
        t_obs: usize,
    ) -> Self {
        if radii.iter().any(|c| !c.is_finite()) {
            log::warn!("radii contain infinity; the safety filter falls back to the nominal policy");
        }
        FilteredController { predictor, policy, filter, radii, t_obs }
    }
}

impl<T: Scalar> SystemController<T> for FilteredController<'_, T> {
    fn control(&mut self, state: &SystemState<T>, goal: Vec2<T>, history: &[AgentSnapshot<T>]) -> Result<ControlInput<T>> {
        let n = history.len();
        if n < self.t_obs + 1 || n < 2 {
            let previous = if n >= 2 { Some(&history[n - 2]) } else { None };
            return Ok(self.policy.act(&Observation { state, goal, current: &history[n - 1], previous }));
        }
        filtered_step(state, goal, history, self.predictor, self.policy, self.filter, self.radii)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn run_filtered_episode<T: Scalar>(
    config: &ScenarioConfig,
    predictor: &dyn TrajectoryPredictor<T>,
    policy: &dyn Policy<T>,
    filter: &FilterModel<T>,
    radii: &[f64],
    t_obs: usize,
    seed: u64,
) -> Result<(TrajectoryRecord<T>, EpisodeMetrics)> {
    let mut controller = FilteredController::new(predictor, policy, filter, radii, t_obs);
    rollout_episode(config, &mut controller, seed)
}

/// As [`run_filtered_episode`] on an explicit scenario.
#[allow(clippy::too_many_arguments)]
pub fn run_filtered_scenario<T: Scalar>(
    config: &ScenarioConfig,
    scenario: &Scenario<T>,
    predictor: &dyn TrajectoryPredictor<T>,
    policy: &dyn Policy<T>,
    filter: &FilterModel<T>,
    radii: &[f64],
    t_obs: usize,
    seed: u64,
) -> Result<(TrajectoryRecord<T>, EpisodeMetrics)> {
    let mut controller = FilteredController::new(predictor, policy, filter, radii, t_obs);
    rollout_scenario(config, scenario, &mut controller, seed)
}
