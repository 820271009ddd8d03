//! Multi-step agent trajectory prediction.

mod train;

pub use train::{train_predictor, PredictorConfig, TrainingCurve, TrainingOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::learncore::{forward_lstm_head, ModelParams, Tensor, Topology};
use crate::scalar::Scalar;
use crate::world::AgentSnapshot;

/// Predicted positions for steps `issued_at + 1 ..= issued_at + H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle<T> {
    pub predicted: Vec<AgentSnapshot<T>>,
    pub issued_at: usize,
}

impl<T: Scalar> PredictionBundle<T> {
    pub fn horizon(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_finite(&self) -> bool {
        self.predicted.iter().all(|s| s.is_finite())
    }
}

/// Anything that maps an agent history to an H-step forecast.
pub trait TrajectoryPredictor<T: Scalar>: Sync {
    fn horizon(&self) -> usize;

    /// Agent count the predictor was built for, if fixed.
    fn num_agents(&self) -> Option<usize>;

    /// `history` holds snapshots `0..=t`.
    fn predict(&self, history: &[AgentSnapshot<T>]) -> Result<PredictionBundle<T>>;
}

fn check_history<T: Scalar>(history: &[AgentSnapshot<T>], agents: Option<usize>) -> Result<usize> {
    if history.len() < 2 {
        return Err(Error::InvalidInput(format!("history needs at least 2 snapshots, got {}", history.len())));
    }
    let m = history[0].len();
    if let Some(expected) = agents {
        if m != expected {
            return Err(Error::AgentCount { expected, found: m });
        }
    }
    if let Some(bad) = history.iter().find(|s| s.len() != m) {
        return Err(Error::AgentCount { expected: m, found: bad.len() });
    }
    Ok(m)
}

/// Recurrent predictor emitting all H steps from the final hidden state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PredictorModel<T> {
    pub params: ModelParams<T>,
    pub num_agents: usize,
    pub horizon: usize,
    /// Snapshots fed to the network; shorter histories are front-padded with
    /// the first snapshot.
    pub window: usize,
    /// Positions are divided by this (workspace half-width).
    pub position_scale: f64,
    /// Per-step displacement unit, meters.
    pub step_scale: f64,
    /// Predict offsets from the last observed position rather than absolute
    /// normalized positions.
    pub residual: bool,
}

impl<T: Scalar> PredictorModel<T> {
    pub fn input_dim(num_agents: usize) -> usize {
        4 * num_agents
    }

    pub fn new(
        hidden: &[usize],
        num_agents: usize,
        horizon: usize,
        window: usize,
        position_scale: f64,
        step_scale: f64,
        residual: bool,
        seed: u64,
    ) -> Result<Self> {
        if horizon == 0 || window == 0 || num_agents == 0 {
            return Err(Error::InvalidInput("predictor needs H ≥ 1, window ≥ 1 and at least one agent".into()));
        }
        if !(position_scale > 0.0 && step_scale > 0.0) {
            return Err(Error::InvalidInput("predictor scales must be positive".into()));
        }
        let topology = Topology::Lstm {
            input: Self::input_dim(num_agents),
            hidden: hidden.to_vec(),
            output: 2 * num_agents * horizon,
        };
        topology.validate()?;
        Ok(PredictorModel {
            params: ModelParams::init(&topology, seed),
            num_agents,
            horizon,
            window,
            position_scale,
            step_scale,
            residual,
        })
    }

    /// Same layout with every parameter zero.
    pub fn zeroed(&self) -> Self {
        PredictorModel { params: ModelParams::zeros(&self.params.topology), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.params.topology.output_dim() != 2 * self.num_agents * self.horizon || self.horizon == 0 {
            return Err(Error::Shape {
                expected: vec![2 * self.num_agents * self.horizon],
                found: vec![self.params.topology.output_dim()],
            });
        }
        Ok(())
    }

    /// Network input rows (`window × 4m`): normalized positions followed by
    /// per-step displacements in units of `step_scale`.
    pub fn features(&self, history: &[AgentSnapshot<T>]) -> Vec<Vec<T>> {
        let pos_scale = T::lit(self.position_scale);
        let step_scale = T::lit(self.step_scale);
        let t = history.len() - 1;
        let at = |k: isize| -> &AgentSnapshot<T> { &history[k.max(0) as usize] };
        (0..self.window)
            .map(|w| {
                let k = t as isize - (self.window - 1 - w) as isize;
                let cur = at(k);
                let prev = at(k - 1);
                let mut row = Vec::with_capacity(4 * self.num_agents);
                for p in &cur.positions {
                    row.push(p.x / pos_scale);
                    row.push(p.y / pos_scale);
                }
                for (p, q) in cur.positions.iter().zip(&prev.positions) {
                    row.push((p.x - q.x) / step_scale);
                    row.push((p.y - q.y) / step_scale);
                }
                row
            })
            .collect()
    }

    /// Per-output affine decode `pred = offset + gain · out`.
    pub fn decode_affine(&self, last: &AgentSnapshot<T>) -> (Vec<T>, Vec<T>) {
        let n = 2 * self.num_agents * self.horizon;
        let mut gain = Vec::with_capacity(n);
        let mut offset = Vec::with_capacity(n);
        for h in 0..self.horizon {
            for p in &last.positions {
                if self.residual {
                    let g = T::lit(self.step_scale) * T::from_usize_lossy(h + 1);
                    gain.extend([g, g]);
                    offset.extend([p.x, p.y]);
                } else {
                    let g = T::lit(self.position_scale);
                    gain.extend([g, g]);
                    offset.extend([T::zero(), T::zero()]);
                }
            }
        }
        (gain, offset)
    }
}

/// Stacks a bundle into the flat `[h][agent][xy]` layout.
pub fn flatten_snapshots<T: Scalar>(snaps: &[AgentSnapshot<T>]) -> Vec<T> {
    snaps.iter().flat_map(|s| s.positions.iter().flat_map(|p| [p.x, p.y])).collect()
}

pub fn unflatten_snapshots<T: Scalar>(flat: &[T], num_agents: usize) -> Vec<AgentSnapshot<T>> {
    flat.chunks(2 * num_agents)
        .map(|c| AgentSnapshot::new(c.chunks(2).map(|p| Vec2::new(p[0], p[1])).collect()))
        .collect()
}

impl<T: Scalar> TrajectoryPredictor<T> for PredictorModel<T> {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_agents(&self) -> Option<usize> {
        Some(self.num_agents)
    }

    fn predict(&self, history: &[AgentSnapshot<T>]) -> Result<PredictionBundle<T>> {
        check_history(history, Some(self.num_agents))?;
        let rows = self.features(history);
        let seq = Tensor::from_vec(vec![rows.len(), 4 * self.num_agents], rows.concat())?;
        let out = forward_lstm_head(&self.params, &seq)?;
        let (gain, offset) = self.decode_affine(history.last().expect("checked"));
        let flat: Vec<T> = out.data().iter().zip(gain.iter().zip(&offset)).map(|(&o, (&g, &b))| b + g * o).collect();
        Ok(PredictionBundle { predicted: unflatten_snapshots(&flat, self.num_agents), issued_at: history.len() - 1 })
    }
}

/// Linear extrapolation at each agent's last observed velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantVelocity {
    pub horizon: usize,
}

pub fn constant_velocity_predict<T: Scalar>(history: &[AgentSnapshot<T>], horizon: usize) -> Result<PredictionBundle<T>> {
    check_history(history, None)?;
    let last = &history[history.len() - 1];
    let prev = &history[history.len() - 2];
    let predicted = (1..=horizon)
        .map(|h| {
            let k = T::from_usize_lossy(h);
            AgentSnapshot::new(last.positions.iter().zip(&prev.positions).map(|(&p, &q)| p + (p - q) * k).collect())
        })
        .collect();
    Ok(PredictionBundle { predicted, issued_at: history.len() - 1 })
}

impl<T: Scalar> TrajectoryPredictor<T> for ConstantVelocity {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_agents(&self) -> Option<usize> {
        None
    }

    fn predict(&self, history: &[AgentSnapshot<T>]) -> Result<PredictionBundle<T>> {
        constant_velocity_predict(history, self.horizon)
    }
}

/// Wraps a predictor and, for a deterministic pseudo-random fraction of
/// histories, shifts every prediction by a heavy-tailed offset. Used to build
/// synthetic error distributions with a rare large-error mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contaminated<P> {
    pub inner: P,
    /// Probability that a given history is contaminated.
    pub rate: f64,
    /// Pareto scale of the offset magnitude, meters.
    pub scale: f64,
    /// Pareto tail index.
    pub tail: f64,
    pub seed: u64,
}

impl<P> Contaminated<P> {
    fn draw<T: Scalar>(&self, history: &[AgentSnapshot<T>]) -> Option<(f64, f64)> {
        use rand::{Rng, SeedableRng};
        let mut key = self.seed ^ (history.len() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for p in history.last()?.positions.iter().chain(&history.first()?.positions) {
            for v in [p.x, p.y] {
                key = (key ^ v.to_f64_lossy().to_bits()).wrapping_mul(0x100_0000_01B3).rotate_left(17);
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(key);
        if rng.random::<f64>() >= self.rate {
            return None;
        }
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let magnitude = self.scale * u.powf(-1.0 / self.tail);
        let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        Some((magnitude * angle.cos(), magnitude * angle.sin()))
    }
}

impl<T: Scalar, P: TrajectoryPredictor<T>> TrajectoryPredictor<T> for Contaminated<P> {
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn num_agents(&self) -> Option<usize> {
        self.inner.num_agents()
    }

    fn predict(&self, history: &[AgentSnapshot<T>]) -> Result<PredictionBundle<T>> {
        let mut bundle = self.inner.predict(history)?;
        if let Some((dx, dy)) = self.draw(history) {
            let shift = Vec2::new(T::lit(dx), T::lit(dy));
            for snap in &mut bundle.predicted {
                for p in &mut snap.positions {
                    *p += shift;
                }
            }
        }
        Ok(bundle)
    }
}

impl<T: Scalar, P: TrajectoryPredictor<T> + ?Sized> TrajectoryPredictor<T> for &P {
    fn horizon(&self) -> usize {
        (**self).horizon()
    }

    fn num_agents(&self) -> Option<usize> {
        (**self).num_agents()
    }

    fn predict(&self, history: &[AgentSnapshot<T>]) -> Result<PredictionBundle<T>> {
        (**self).predict(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn snap(points: &[(f64, f64)]) -> AgentSnapshot<f64> {
        AgentSnapshot::new(points.iter().map(|&(x, y)| Vec2::new(x, y)).collect())
    }

    fn model(residual: bool) -> PredictorModel<f64> {
        PredictorModel::new(&[6], 2, 3, 4, 6.0, 0.1, residual, 1).unwrap()
    }

    #[test]
    fn zero_model_predicts_origin_or_last_position() {
        let hist = vec![snap(&[(1.0, 2.0), (-3.0, 0.5)]), snap(&[(1.1, 2.0), (-3.0, 0.4)])];
        let absolute = model(false).zeroed().predict(&hist).unwrap();
        assert!(absolute.predicted.iter().flat_map(|s| &s.positions).all(|p| p.x == 0.0 && p.y == 0.0));
        let residual = model(true).zeroed().predict(&hist).unwrap();
        assert_eq!(residual.horizon(), 3);
        assert!(residual.predicted.iter().all(|s| *s == hist[1]));
        assert_eq!(residual.issued_at, 1);
    }

    #[test]
    fn prediction_is_deterministic() {
        let m = model(true);
        let hist: Vec<_> = (0..5).map(|k| snap(&[(0.1 * k as f64, 0.0), (1.0, -0.05 * k as f64)])).collect();
        assert_eq!(m.predict(&hist).unwrap(), m.predict(&hist).unwrap());
    }

    #[test]
    fn agent_count_mismatch() {
        let hist = vec![snap(&[(0.0, 0.0)]), snap(&[(0.0, 0.0)])];
        assert!(matches!(model(true).predict(&hist), Err(Error::AgentCount { expected: 2, found: 1 })));
    }

    #[test]
    fn short_history_rejected() {
        assert!(model(true).predict(&[snap(&[(0.0, 0.0), (1.0, 1.0)])]).is_err());
    }

    #[test]
    fn features_pad_with_first_snapshot() {
        let m = model(true);
        let hist = vec![snap(&[(0.6, 0.0), (0.0, 0.0)]), snap(&[(1.2, 0.0), (0.0, 0.3)])];
        let f = m.features(&hist);
        assert_eq!(f.len(), 4);
        assert!((f[0][0] - 0.1).abs() < 1e-15 && f[0][1..].iter().all(|&v| v == 0.0));
        assert_eq!(f[2], f[0]);
        assert!((f[3][0] - 0.2).abs() < 1e-15 && (f[3][4] - 6.0).abs() < 1e-12 && (f[3][7] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_velocity_examples() {
        let still = vec![snap(&[(1.0, 1.0)]), snap(&[(1.0, 1.0)])];
        let b = constant_velocity_predict(&still, 4).unwrap();
        assert!(b.predicted.iter().all(|s| s.positions[0] == Vec2::new(1.0, 1.0)));

        let moving = vec![snap(&[(0.0, 0.0)]), snap(&[(0.1, 0.0)])];
        let b = constant_velocity_predict(&moving, 7).unwrap();
        for (i, s) in b.predicted.iter().enumerate() {
            let h = (i + 1) as f64;
            assert!((s.positions[0].x - 0.1 * (1.0 + h)).abs() < 1e-15);
            assert_eq!(s.positions[0].y, 0.0);
        }
    }

    #[test]
    fn contamination_is_pure_and_rate_controlled() {
        let c = Contaminated { inner: ConstantVelocity { horizon: 2 }, rate: 0.2, scale: 1.0, tail: 1.5, seed: 9 };
        let mut hit = 0;
        for k in 0..2000 {
            let x = k as f64 * 0.01;
            let hist = vec![snap(&[(x, 0.0)]), snap(&[(x, 0.1)])];
            let a = c.predict(&hist).unwrap();
            assert_eq!(a, c.predict(&hist).unwrap());
            let clean = constant_velocity_predict(&hist, 2).unwrap();
            if a != clean {
                hit += 1;
                let d = (a.predicted[0].positions[0] - clean.predicted[0].positions[0]).norm();
                assert!(d >= 1.0 - 1e-9);
            }
        }
        assert!((300..500).contains(&hit), "{hit}");
    }

    proptest! {
        #[test]
        fn straight_lines_are_exact(x0 in -5.0..5.0f64, y0 in -5.0..5.0f64, vx in -0.2..0.2f64, vy in -0.2..0.2f64, len in 2usize..10) {
            let hist: Vec<_> = (0..len).map(|k| snap(&[(x0 + vx * k as f64, y0 + vy * k as f64)])).collect();
            let b = constant_velocity_predict(&hist, 7).unwrap();
            for (i, s) in b.predicted.iter().enumerate() {
                let k = (len + i) as f64;
                prop_assert!((s.positions[0] - Vec2::new(x0 + vx * k, y0 + vy * k)).norm() < 1e-12);
            }
        }

        #[test]
        fn finite_histories_give_finite_predictions(seed in 0u64..1000, coords in proptest::collection::vec(-50.0..50.0f64, 12)) {
            let m = PredictorModel::<f64>::new(&[5], 2, 3, 4, 6.0, 0.1, true, seed).unwrap();
            let hist: Vec<_> = coords.chunks(4).map(|c| snap(&[(c[0], c[1]), (c[2], c[3])])).collect();
            prop_assert!(m.predict(&hist).unwrap().is_finite());
        }
    }
}
