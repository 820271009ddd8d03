use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{filter_loss, filter_loss_graph};
use super::{compose_record, localize, FilterModel, FilterTrainingRecord, LocalRecord};
use crate::agents::{rollout_scenario, TrajectoryRecord};
use crate::controllers::{Policy, PolicyController};
use crate::error::{Error, Result};
use crate::learncore::{batch_gradient, optimize_step, AdamConfig, AdamState};
use crate::predictor::TrajectoryPredictor;
use crate::scalar::{wrap_angle, Scalar};
use crate::world::{sample_scenario, ScenarioConfig, SystemState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial penalty weight λ.
    pub lambda: f64,
    /// λ doubles every this many epochs while the validation hinge rate is
    /// at or above `hinge_target`.
    pub lambda_double_every: usize,
    pub lambda_max: f64,
    pub hinge_target: f64,
    /// Constraint margin ε, meters.
    pub epsilon: f64,
    /// Positions in the network input are divided by this, meters.
    pub length_scale: f64,
    pub validation_fraction: f64,
    pub residual: bool,
    pub adam: AdamConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            hidden: vec![128, 128, 128],
            epochs: 40,
            batch_size: 64,
            lambda: 10.0,
            lambda_double_every: 5,
            lambda_max: 640.0,
            hinge_target: 0.01,
            epsilon: 1.0,
            length_scale: 2.0,
            validation_fraction: 0.1,
            residual: true,
            adam: AdamConfig::default(),
        }
    }
}

/// Where training records are cut from each episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftrainOptions {
    pub t_obs: usize,
    /// Spacing of additional cuts after `t_obs`; 0 keeps only `t_obs`.
    pub cut_stride: usize,
    /// Upper bound on cuts per episode.
    pub max_cuts: usize,
    /// Extra records per cut with the ego state perturbed uniformly by up to
    /// the offsets below; the nominal rollout is recomputed from there.
    pub jitter_copies: usize,
    pub jitter_position: f64,
    pub jitter_heading: f64,
    pub jitter_speed: f64,
}

impl Default for SftrainOptions {
    fn default() -> Self {
        SftrainOptions {
            t_obs: 8,
            cut_stride: 0,
            max_cuts: 1,
            jitter_copies: 0,
            jitter_position: 0.3,
            jitter_heading: 0.5,
            jitter_speed: 0.5,
        }
    }
}

fn jitter<T: Scalar>(state: &SystemState<T>, options: &SftrainOptions, v_max: f64, rng: &mut ChaCha8Rng) -> SystemState<T> {
    let mut u = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let (dx, dy, dh, dv) = (u(options.jitter_position), u(options.jitter_position), u(options.jitter_heading), u(options.jitter_speed));
    SystemState::new(
        state.pos_x + T::lit(dx),
        state.pos_y + T::lit(dy),
        wrap_angle(state.heading + T::lit(dh)),
        (state.speed + T::lit(dv)).max(T::zero()).min(T::lit(v_max)),
    )
}

/// D_sftrain: for each agents-only training episode the scenario is rebuilt
/// from its seed, the nominal policy drives the ego through it, and a record
/// is taken at each cut before the episode terminates.
#[allow(clippy::too_many_arguments)]
pub fn build_sftrain<T: Scalar>(
    config: &ScenarioConfig,
    episodes: &[TrajectoryRecord<T>],
    predictor: &dyn TrajectoryPredictor<T>,
    policy: &dyn Policy<T>,
    radii: &[f64],
    options: &SftrainOptions,
) -> Result<Vec<FilterTrainingRecord<T>>> {
    let infinite: Vec<usize> = (0..radii.len()).filter(|&h| !radii[h].is_finite()).map(|h| h + 1).collect();
    if !infinite.is_empty() {
        return Err(Error::InfiniteRadii {
            steps: infinite,
            min_calibration: 0,
        }
        .in_stage("build filter training set (recalibrate with more episodes)"));
    }
    if predictor.horizon() != radii.len() {
        return Err(Error::Shape { expected: vec![radii.len()], found: vec![predictor.horizon()] });
    }
    let per_episode: Vec<Result<Vec<FilterTrainingRecord<T>>>> = episodes
        .par_iter()
        .map(|ep| {
            let scenario = sample_scenario::<T>(config, ep.seed)?;
            let starts_match = scenario.agents.len() == ep.num_agents
                && ep.steps.first().is_some_and(|s| s.positions.iter().zip(&scenario.agents).all(|(p, a)| *p == a.start));
            if !starts_match {
                return Err(Error::InvalidInput(format!(
                    "episode {} was not generated by this scenario config",
                    ep.seed
                )));
            }
            let mut controller = PolicyController { policy };
            let (ego, metrics) = rollout_scenario(config, &scenario, &mut controller, ep.seed)?;
            let states = ego.system.expect("ego rollout records states");
            let mut out = Vec::new();
            let mut cuts = 0;
            let mut t = options.t_obs;
            while t < metrics.steps_taken && t < ep.len() && cuts < options.max_cuts.max(1) {
                let mut rng = ChaCha8Rng::seed_from_u64(ep.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                for copy in 0..=options.jitter_copies {
                    let state = if copy == 0 { states[t] } else { jitter(&states[t], options, config.vehicle.v_max, &mut rng) };
                    let mut r = compose_record(
                        &state,
                        scenario.system_goal,
                        ep.history(t),
                        predictor,
                        policy,
                        radii,
                        &config.vehicle,
                        config.dt,
                    )?;
                    r.seed = ep.seed;
                    r.t = t;
                    out.push(r);
                }
                cuts += 1;
                if options.cut_stride == 0 {
                    break;
                }
                t += options.cut_stride;
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_episode {
        records.extend(r?);
    }
    Ok(records)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterCurve {
    pub epochs: Vec<usize>,
    pub lambda: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub val_imitation: Vec<f64>,
    pub val_hinge: Vec<f64>,
    pub val_hinge_rate: Vec<f64>,
}

impl FilterCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lambda,train_loss,val_imitation,val_hinge,val_hinge_rate\n");
        for i in 0..self.epochs.len() {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e},{}\n",
                self.epochs[i], self.lambda[i], self.train_loss[i], self.val_imitation[i], self.val_hinge[i], self.val_hinge_rate[i]
            ));
        }
        s
    }
}

/// Validation summary of a filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterValidation {
    /// Mean imitation term per record.
    pub imitation: f64,
    /// Mean hinge term per record.
    pub hinge: f64,
    /// Fraction of records with at least one violated constraint.
    pub hinge_rate: f64,
}

#[derive(Clone, Debug)]
pub struct FilterTrainingOutcome<T> {
    pub model: FilterModel<T>,
    pub curve: FilterCurve,
    pub best_epoch: usize,
    pub final_lambda: f64,
    pub validation: FilterValidation,
    pub diverged: bool,
}

/// Imitation and hinge statistics of `model` on `records`.
pub fn validate_filter<T: Scalar>(model: &FilterModel<T>, records: &[FilterTrainingRecord<T>]) -> Result<FilterValidation> {
    let parts: Vec<Result<(f64, f64, bool)>> = records
        .par_iter()
        .map(|r| {
            let u = model.filter_inputs(r)?;
            let p = filter_loss(&u, r, model.epsilon, &model.vehicle, model.dt)?;
            Ok((p.imitation.to_f64_lossy(), p.hinge.to_f64_lossy(), p.violations > 0))
        })
        .collect();
    let n = records.len().max(1) as f64;
    let (mut imi, mut hin, mut bad) = (0.0, 0.0, 0usize);
    for p in parts {
        let (i, h, v) = p?;
        imi += i;
        hin += h;
        bad += v as usize;
    }
    Ok(FilterValidation { imitation: imi / n, hinge: hin / n, hinge_rate: bad as f64 / n })
}

/// Fits π̂ on D_sftrain by mini-batch Adam through the differentiable rollout.
///
/// The best validation loss (at the current λ) is checkpointed; the
/// checkpoint is reset whenever λ changes.
pub fn train_filter<T: Scalar>(
    records: &[FilterTrainingRecord<T>],
    config: &FilterConfig,
    scenario: &ScenarioConfig,
    seed: u64,
) -> Result<FilterTrainingOutcome<T>> {
    let first = records.first().ok_or_else(|| Error::Empty("filter training set".into()))?;
    let m = first.current.len();
    let horizon = first.horizon();
    for r in records {
        r.validate()?;
        if r.current.len() != m {
            return Err(Error::AgentCount { expected: m, found: r.current.len() });
        }
        if r.horizon() != horizon {
            return Err(Error::Shape { expected: vec![horizon], found: vec![r.horizon()] });
        }
        if r.radii.iter().any(|c| !c.is_finite()) {
            return Err(Error::InfiniteRadii { steps: vec![], min_calibration: 0 });
        }
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be positive".into()));
    }
    if !(config.length_scale > 0.0) {
        return Err(Error::InvalidInput("length_scale must be positive".into()));
    }
    let mut model = FilterModel::new(
        &config.hidden,
        m,
        horizon,
        config.length_scale,
        scenario.vehicle,
        scenario.dt,
        config.epsilon,
        config.residual,
        seed,
    )?;

    let n_val = if records.len() >= 2 {
        ((records.len() as f64 * config.validation_fraction).ceil() as usize).clamp(1, records.len() - 1)
    } else {
        0
    };
    let (train_recs, val_recs) = records.split_at(records.len() - n_val);
    let val_recs = if val_recs.is_empty() { train_recs } else { val_recs };
    let train_local: Vec<LocalRecord<T>> = train_recs.iter().map(localize).collect();

    let val_loss = |model: &FilterModel<T>, lambda: f64| -> Result<(f64, FilterValidation)> {
        let v = validate_filter(model, val_recs)?;
        Ok((v.imitation + lambda * v.hinge, v))
    };

    let mut lambda = config.lambda;
    let mut curve = FilterCurve::default();
    let (mut best_val, mut best_stats) = val_loss(&model, lambda)?;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let push = |curve: &mut FilterCurve, epoch, lambda, train, v: FilterValidation| {
        curve.epochs.push(epoch);
        curve.lambda.push(lambda);
        curve.train_loss.push(train);
        curve.val_imitation.push(v.imitation);
        curve.val_hinge.push(v.hinge);
        curve.val_hinge_rate.push(v.hinge_rate);
    };
    push(&mut curve, 0, lambda, f64::NAN, best_stats);

    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF117_E5);
    let mut order: Vec<usize> = (0..train_local.len()).collect();
    let mut diverged = false;

    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let lam = T::lit(lambda);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let step = batch_gradient(&model.params, batch, |g, &i| {
                Ok(filter_loss_graph(g, &model, &train_local[i], lam)?.0)
            });
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(Error::Divergence { parameter }) => {
                    log::warn!("filter diverged at epoch {epoch} (non-finite gradient in {parameter}); keeping epoch {best_epoch}");
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                log::warn!("filter diverged at epoch {epoch} (non-finite loss); keeping epoch {best_epoch}");
                diverged = true;
                break 'epochs;
            }
            total += loss.to_f64_lossy() * batch.len() as f64;
            optimize_step(&mut model.params, &grads, &mut state, &config.adam);
        }
        let train = total / order.len().max(1) as f64;
        let (val, stats) = val_loss(&model, lambda)?;
        push(&mut curve, epoch, lambda, train, stats);
        log::info!(
            "filter epoch {epoch}: lambda {lambda} train {train:.5} val imitation {:.5} hinge {:.5} rate {:.4}",
            stats.imitation,
            stats.hinge,
            stats.hinge_rate
        );
        if !val.is_finite() {
            log::warn!("filter validation loss non-finite at epoch {epoch}; keeping epoch {best_epoch}");
            diverged = true;
            break;
        }
        if val < best_val {
            best_val = val;
            best_stats = stats;
            best_epoch = epoch;
            best = model.clone();
        }
        let doubling = config.lambda_double_every > 0 && epoch % config.lambda_double_every == 0 && epoch < config.epochs;
        if doubling && stats.hinge_rate >= config.hinge_target && lambda < config.lambda_max {
            lambda = (2.0 * lambda).min(config.lambda_max);
            best_val = stats.imitation + lambda * stats.hinge;
            best_stats = stats;
            best_epoch = epoch;
            best = model.clone();
        }
    }
    Ok(FilterTrainingOutcome { model: best, curve, best_epoch, final_lambda: lambda, validation: best_stats, diverged })
}
