use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{flatten_snapshots, PredictorModel};
use crate::agents::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::learncore::{batch_gradient, batch_loss, lstm_graph, optimize_step, AdamConfig, AdamState, Graph, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub hidden: Vec<usize>,
    pub horizon: usize,
    pub window: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of episodes held out for checkpoint selection.
    pub validation_fraction: f64,
    /// Spacing between training cuts within an episode.
    pub cut_stride: usize,
    pub residual: bool,
    pub step_scale: f64,
    pub adam: AdamConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            hidden: vec![128, 128],
            horizon: 7,
            window: 8,
            epochs: 30,
            batch_size: 64,
            validation_fraction: 0.1,
            cut_stride: 1,
            residual: true,
            step_scale: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

impl TrainingCurve {
    pub fn push(&mut self, epoch: usize, train: f64, val: f64) {
        self.epochs.push(epoch);
        self.train_loss.push(train);
        self.val_loss.push(val);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for i in 0..self.epochs.len() {
            s.push_str(&format!("{},{:e},{:e}\n", self.epochs[i], self.train_loss[i], self.val_loss[i]));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome<M> {
    /// Best-validation checkpoint.
    pub model: M,
    pub curve: TrainingCurve,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Training stopped on a non-finite loss or gradient.
    pub diverged: bool,
}

/// Every `(episode, t)` usable as a training cut.
pub(crate) fn cuts<T: Scalar>(episodes: &[TrajectoryRecord<T>], horizon: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        let last = ep.len().saturating_sub(1 + horizon);
        out.extend((1..=last).step_by(stride.max(1)).map(|t| (e, t)));
    }
    out
}

/// Squared prediction error for one cut, on the tape.
fn example_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &PredictorModel<T>,
    episode: &TrajectoryRecord<T>,
    t: usize,
) -> Result<Var> {
    let history = episode.history(t);
    let steps: Vec<Var> = model.features(history).into_iter().map(|row| g.input(row)).collect();
    let out = lstm_graph(g, &steps)?;
    let (gain, offset) = model.decode_affine(&history[t]);
    let gain = g.input(gain);
    let scaled = g.mul(out, gain);
    let target: Vec<T> = flatten_snapshots(&episode.steps[t + 1..=t + model.horizon])
        .into_iter()
        .zip(offset)
        .map(|(y, b)| y - b)
        .collect();
    let target = g.input(target);
    let d = g.sub(scaled, target);
    Ok(g.sum_sq(d))
}

/// Fits the predictor by mini-batch Adam on squared multi-step error.
pub fn train_predictor<T: Scalar>(
    episodes: &[TrajectoryRecord<T>],
    config: &PredictorConfig,
    position_scale: f64,
    seed: u64,
) -> Result<TrainingOutcome<PredictorModel<T>>> {
    let first = episodes.first().ok_or_else(|| Error::Empty("predictor training set".into()))?;
    let m = first.num_agents;
    for ep in episodes {
        if ep.num_agents != m {
            return Err(Error::AgentCount { expected: m, found: ep.num_agents });
        }
        if ep.len() < 2 + config.horizon {
            return Err(Error::InvalidInput(format!(
                "episode {} has {} snapshots; training needs at least {}",
                ep.seed,
                ep.len(),
                2 + config.horizon
            )));
        }
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be positive".into()));
    }

    let mut model = PredictorModel::new(
        &config.hidden,
        m,
        config.horizon,
        config.window,
        position_scale,
        config.step_scale,
        config.residual,
        seed,
    )?;

    let n_val = if episodes.len() >= 2 {
        ((episodes.len() as f64 * config.validation_fraction).ceil() as usize).clamp(1, episodes.len() - 1)
    } else {
        0
    };
    let (train_eps, val_eps) = episodes.split_at(episodes.len() - n_val);
    let val_eps = if val_eps.is_empty() { train_eps } else { val_eps };
    let mut train_cuts = cuts(train_eps, config.horizon, config.cut_stride);
    let val_cuts = cuts(val_eps, config.horizon, config.cut_stride);

    let val_loss = |model: &PredictorModel<T>| -> Result<f64> {
        let l = batch_loss(&model.params, &val_cuts, |g, &(e, t)| example_loss(g, model, &val_eps[e], t))?;
        Ok(l.to_f64_lossy())
    };

    let mut curve = TrainingCurve::default();
    let mut best = model.clone();
    let mut best_val = val_loss(&model)?;
    let mut best_epoch = 0;
    curve.push(0, f64::NAN, best_val);
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7EA1);
    let mut diverged = false;

    'epochs: for epoch in 1..=config.epochs {
        train_cuts.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train_cuts.chunks(config.batch_size) {
            let step = batch_gradient(&model.params, batch, |g, &(e, t)| example_loss(g, &model, &train_eps[e], t));
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(Error::Divergence { parameter }) => {
                    log::warn!("predictor diverged at epoch {epoch} (non-finite gradient in {parameter}); keeping epoch {best_epoch}");
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                log::warn!("predictor diverged at epoch {epoch} (non-finite loss); keeping epoch {best_epoch}");
                diverged = true;
                break 'epochs;
            }
            total += loss.to_f64_lossy() * batch.len() as f64;
            optimize_step(&mut model.params, &grads, &mut state, &config.adam);
        }
        let train = total / train_cuts.len().max(1) as f64;
        let val = val_loss(&model)?;
        curve.push(epoch, train, val);
        log::info!("predictor epoch {epoch}: train {train:.5} val {val:.5}");
        if !val.is_finite() {
            log::warn!("predictor validation loss non-finite at epoch {epoch}; keeping epoch {best_epoch}");
            diverged = true;
            break;
        }
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best = model.clone();
        }
    }
    Ok(TrainingOutcome { model: best, curve, best_epoch, best_val_loss: best_val, diverged })
}
