//! Split conformal calibration of per-step prediction radii.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::predictor::TrajectoryPredictor;
use crate::scalar::Scalar;
use crate::world::AgentSnapshot;

pub const RADII_SCHEMA_VERSION: u32 = 1;

/// How a per-step error is reduced to a scalar score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Euclidean norm of the stacked 2m-dimensional error.
    #[default]
    Stacked,
    /// Largest single-agent position error.
    MaxAgent,
}

pub fn nonconformity<T: Scalar>(truth: &AgentSnapshot<T>, predicted: &AgentSnapshot<T>) -> Result<T> {
    nonconformity_with(truth, predicted, ScoreKind::Stacked)
}

pub fn nonconformity_with<T: Scalar>(truth: &AgentSnapshot<T>, predicted: &AgentSnapshot<T>, kind: ScoreKind) -> Result<T> {
    if truth.len() != predicted.len() {
        return Err(Error::AgentCount { expected: truth.len(), found: predicted.len() });
    }
    let errs = truth.positions.iter().zip(&predicted.positions).map(|(&a, &b)| (a - b).norm_sq());
    Ok(match kind {
        ScoreKind::Stacked => errs.fold(T::zero(), |acc, e| acc + e).sqrt(),
        ScoreKind::MaxAgent => errs.fold(T::zero(), T::max).sqrt(),
    })
}

/// Per-statement level δ̄ = δ / T.
pub fn compute_delta_bar(delta: f64, horizon_t: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!("delta must lie in (0, 1), got {delta}")));
    }
    if horizon_t == 0 {
        return Err(Error::InvalidInput("T must be at least 1".into()));
    }
    Ok(delta / horizon_t as f64)
}

/// Quantile index p = ⌈(n + 1)(1 − δ̄)⌉.
///
/// Products that land within rounding noise of an integer are treated as
/// that integer, so e.g. n = 19, δ̄ = 0.05 gives 19 and not 20.
pub fn quantile_index(n: usize, delta_bar: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - delta_bar);
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

/// Smallest calibration size with a finite quantile at level δ̄.
pub fn min_calibration_size(delta_bar: f64) -> usize {
    ((1.0 / delta_bar).ceil() as usize).saturating_sub(1)
}

/// The p-th smallest of `scores ∪ {∞}`, with `p` from [`quantile_index`].
pub fn conformal_quantile(scores: &[f64], delta_bar: f64) -> (usize, f64) {
    let p = quantile_index(scores.len(), delta_bar).max(1);
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.push(f64::INFINITY);
    sorted.sort_by(f64::total_cmp);
    (p, sorted[p.min(sorted.len()) - 1])
}

/// Scores per prediction step, one per calibration episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonconformityTable {
    /// `scores[h]` holds the step-(h+1) scores in episode order.
    pub scores: Vec<Vec<f64>>,
    pub n: usize,
}

impl NonconformityTable {
    pub fn horizon(&self) -> usize {
        self.scores.len()
    }
}

/// Scores every episode at the single cut `t_obs`.
pub fn score_table<T: Scalar, P: TrajectoryPredictor<T> + ?Sized>(
    predictor: &P,
    episodes: &[TrajectoryRecord<T>],
    t_obs: usize,
    kind: ScoreKind,
) -> Result<NonconformityTable> {
    let horizon = predictor.horizon();
    let rows: Vec<Vec<f64>> = episodes
        .par_iter()
        .map(|ep| {
            if ep.len() < t_obs + horizon + 1 {
                return Err(Error::InvalidInput(format!(
                    "episode {} has {} snapshots; scoring at t_obs = {t_obs} with H = {horizon} needs {}",
                    ep.seed,
                    ep.len(),
                    t_obs + horizon + 1
                )));
            }
            let bundle = predictor.predict(ep.history(t_obs))?;
            (0..horizon)
                .map(|h| Ok(nonconformity_with(&ep.steps[t_obs + 1 + h], &bundle.predicted[h], kind)?.to_f64_lossy()))
                .collect()
        })
        .collect::<Result<_>>()?;
    let scores = (0..horizon).map(|h| rows.iter().map(|r| r[h]).collect()).collect();
    Ok(NonconformityTable { scores, n: episodes.len() })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMethod {
    #[default]
    Conformal,
    Gaussian,
}

/// Per-step radii container shared by the conformal and Gaussian methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalRadii {
    pub schema_version: u32,
    pub method: RadiusMethod,
    pub delta: f64,
    pub delta_bar: f64,
    pub n: usize,
    /// Quantile index; absent for the Gaussian method.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(rename = "C", with = "inf_list")]
    pub radii: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<ScoreKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
}

impl ConformalRadii {
    pub fn horizon(&self) -> usize {
        self.radii.len()
    }

    pub fn all_finite(&self) -> bool {
        self.radii.iter().all(|c| c.is_finite())
    }

    /// Steps (1-based) with an infinite radius.
    pub fn infinite_steps(&self) -> Vec<usize> {
        self.radii.iter().enumerate().filter(|(_, c)| !c.is_finite()).map(|(h, _)| h + 1).collect()
    }

    pub fn require_finite(&self) -> Result<()> {
        let steps = self.infinite_steps();
        if steps.is_empty() {
            Ok(())
        } else {
            Err(Error::InfiniteRadii { steps, min_calibration: min_calibration_size(self.delta_bar) })
        }
    }
}

/// Conformal radii from precomputed scores.
pub fn calibrate_table(table: &NonconformityTable, delta: f64, delta_bar: f64) -> ConformalRadii {
    let radii = table.scores.iter().map(|s| conformal_quantile(s, delta_bar).1).collect();
    let out = ConformalRadii {
        schema_version: RADII_SCHEMA_VERSION,
        method: RadiusMethod::Conformal,
        delta,
        delta_bar,
        n: table.n,
        p: Some(quantile_index(table.n, delta_bar)),
        radii,
        score: None,
        mean: None,
        std: None,
        z: None,
    };
    if !out.all_finite() {
        log::warn!(
            "conformal radius is infinite at steps {:?}: quantile index p = {} exceeds n = {}; at δ̄ = {} calibration needs n ≥ {}",
            out.infinite_steps(),
            quantile_index(table.n, delta_bar),
            table.n,
            delta_bar,
            min_calibration_size(delta_bar)
        );
    }
    out
}

/// Scores `cal` at `t_obs` and selects per-step conformal radii at δ̄ = δ/T.
pub fn calibrate<T: Scalar, P: TrajectoryPredictor<T> + ?Sized>(
    predictor: &P,
    cal: &[TrajectoryRecord<T>],
    delta: f64,
    horizon_t: usize,
    t_obs: usize,
    kind: ScoreKind,
) -> Result<ConformalRadii> {
    if cal.is_empty() {
        return Err(Error::Empty("calibration set".into()));
    }
    let delta_bar = compute_delta_bar(delta, horizon_t)?;
    let table = score_table(predictor, cal, t_obs, kind)?;
    let mut radii = calibrate_table(&table, delta, delta_bar);
    radii.score = Some(kind);
    Ok(radii)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub per_step: Vec<f64>,
    pub joint: f64,
    pub n: usize,
}

pub fn coverage_from_table(table: &NonconformityTable, radii: &[f64]) -> Result<Coverage> {
    if table.n == 0 {
        return Err(Error::Empty("coverage test set".into()));
    }
    if table.horizon() != radii.len() {
        return Err(Error::Shape { expected: vec![radii.len()], found: vec![table.horizon()] });
    }
    let n = table.n as f64;
    let per_step = table
        .scores
        .iter()
        .zip(radii)
        .map(|(s, &c)| s.iter().filter(|&&x| x <= c).count() as f64 / n)
        .collect();
    let joint = (0..table.n).filter(|&i| table.scores.iter().zip(radii).all(|(s, &c)| s[i] <= c)).count() as f64 / n;
    Ok(Coverage { per_step, joint, n: table.n })
}

/// Fraction of test episodes whose step-h score lies within C_h, per step
/// and jointly over all steps.
pub fn empirical_coverage<T: Scalar, P: TrajectoryPredictor<T> + ?Sized>(
    predictor: &P,
    radii: &ConformalRadii,
    test: &[TrajectoryRecord<T>],
    t_obs: usize,
) -> Result<Coverage> {
    if test.is_empty() {
        return Err(Error::Empty("coverage test set".into()));
    }
    if radii.horizon() != predictor.horizon() {
        return Err(Error::Shape { expected: vec![predictor.horizon()], found: vec![radii.horizon()] });
    }
    let table = score_table(predictor, test, t_obs, radii.score.unwrap_or_default())?;
    coverage_from_table(&table, &radii.radii)
}

/// Serializes radius lists with infinity written as the string `"inf"`.
pub mod inf_list {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Entry {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> =
            v.iter().map(|&x| if x.is_infinite() && x > 0.0 { Entry::Text("inf".into()) } else { Entry::Num(x) }).collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        entries
            .into_iter()
            .map(|e| match e {
                Entry::Num(x) => Ok(x),
                Entry::Text(t) if t == "inf" => Ok(f64::INFINITY),
                Entry::Text(t) => Err(D::Error::custom(format!("unexpected radius {t:?}"))),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::predictor::ConstantVelocity;
    use proptest::prelude::*;

    fn snap(points: &[(f64, f64)]) -> AgentSnapshot<f64> {
        AgentSnapshot::new(points.iter().map(|&(x, y)| Vec2::new(x, y)).collect())
    }

    #[test]
    fn score_examples() {
        let a = snap(&[(1.0, 2.0), (3.0, -1.0)]);
        assert_eq!(nonconformity(&a, &a).unwrap(), 0.0);
        let b = snap(&[(4.0, 2.0), (3.0, 3.0)]);
        assert_eq!(nonconformity(&a, &b).unwrap(), 5.0);
        assert_eq!(nonconformity_with(&a, &b, ScoreKind::MaxAgent).unwrap(), 4.0);
        let a_swapped = snap(&[(3.0, -1.0), (1.0, 2.0)]);
        let b_swapped = snap(&[(3.0, 3.0), (4.0, 2.0)]);
        assert_eq!(nonconformity(&a_swapped, &b_swapped).unwrap(), 5.0);
        assert!(matches!(nonconformity(&a, &snap(&[(0.0, 0.0)])), Err(Error::AgentCount { .. })));
    }

    #[test]
    fn delta_bar_examples() {
        assert!((compute_delta_bar(0.01, 80).unwrap() - 0.000125).abs() < 1e-18);
        assert_eq!(compute_delta_bar(0.5, 1).unwrap(), 0.5);
        assert!((compute_delta_bar(0.1, 10).unwrap() - 0.01).abs() < 1e-18);
        assert!(compute_delta_bar(0.0, 10).is_err());
        assert!(compute_delta_bar(1.0, 10).is_err());
        assert!(compute_delta_bar(0.1, 0).is_err());
    }

    #[test]
    fn sort_and_index_example() {
        let scores: Vec<f64> = (1..=19).map(|k| k as f64 / 10.0).collect();
        let (p, c) = conformal_quantile(&scores, 0.05);
        assert_eq!(p, 19);
        assert_eq!(c, 1.9);
    }

    #[test]
    fn constant_scores() {
        let (p, c) = conformal_quantile(&[0.7; 50], 0.1);
        assert!(p <= 50);
        assert_eq!(c, 0.7);
    }

    #[test]
    fn paper_numbers_force_infinite_radius() {
        let delta_bar = compute_delta_bar(0.01, 80).unwrap();
        assert_eq!(quantile_index(1000, delta_bar), 1001);
        let table = NonconformityTable { scores: vec![vec![0.5; 1000]; 3], n: 1000 };
        let r = calibrate_table(&table, 0.01, delta_bar);
        assert!(r.radii.iter().all(|c| c.is_infinite()));
        assert_eq!(r.p, Some(1001));
        assert_eq!(min_calibration_size(delta_bar), 7999);
        match r.require_finite() {
            Err(Error::InfiniteRadii { steps, min_calibration }) => {
                assert_eq!(steps, vec![1, 2, 3]);
                assert_eq!(min_calibration, 7999);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn radii_json_uses_inf_string() {
        let r = ConformalRadii {
            schema_version: RADII_SCHEMA_VERSION,
            method: RadiusMethod::Conformal,
            delta: 0.05,
            delta_bar: 0.05 / 40.0,
            n: 10,
            p: Some(11),
            radii: vec![0.25, f64::INFINITY],
            score: Some(ScoreKind::Stacked),
            mean: None,
            std: None,
            z: None,
        };
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains(r#""C":[0.25,"inf"]"#), "{text}");
        let back: ConformalRadii = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn coverage_edge_cases() {
        let table = NonconformityTable { scores: vec![vec![0.1, 0.4, 2.0], vec![0.3, 0.5, 0.9]], n: 3 };
        let all = coverage_from_table(&table, &[f64::INFINITY; 2]).unwrap();
        assert_eq!(all.per_step, vec![1.0, 1.0]);
        assert_eq!(all.joint, 1.0);
        let none = coverage_from_table(&table, &[0.0; 2]).unwrap();
        assert_eq!(none.per_step, vec![0.0, 0.0]);
        let mixed = coverage_from_table(&table, &[0.4, 0.6]).unwrap();
        assert_eq!(mixed.per_step, vec![2.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(mixed.joint, 2.0 / 3.0);
        let empty = NonconformityTable { scores: vec![vec![]], n: 0 };
        assert!(matches!(coverage_from_table(&empty, &[1.0]), Err(Error::Empty(_))));
    }

    #[test]
    fn calibrate_and_cover_with_baseline() {
        let cfg = crate::world::ScenarioConfig { num_agents: 2, horizon_t: 20, ..Default::default() };
        let seeds: Vec<u64> = (0..60).collect();
        let eps = crate::agents::sim::episodes_for_seeds::<f64>(&cfg, &seeds).unwrap();
        let cv = ConstantVelocity { horizon: 3 };
        let r = calibrate(&cv, &eps[..40], 0.5, 1, 8, ScoreKind::Stacked).unwrap();
        assert_eq!(r.horizon(), 3);
        assert!(r.all_finite());
        let cov = empirical_coverage(&cv, &r, &eps[40..], 8).unwrap();
        assert_eq!(cov.n, 20);
        let inf = ConformalRadii { radii: vec![f64::INFINITY; 3], ..r.clone() };
        assert_eq!(empirical_coverage(&cv, &inf, &eps[40..], 8).unwrap().joint, 1.0);
        let none: &[TrajectoryRecord<f64>] = &[];
        assert!(matches!(empirical_coverage(&cv, &r, none, 8), Err(Error::Empty(_))));
        assert!(calibrate(&cv, &eps[..1], 0.5, 1, 30, ScoreKind::Stacked).is_err());
    }

    proptest! {
        #[test]
        fn selection_matches_sort_oracle(scores in proptest::collection::vec(0.0..10.0f64, 1..200), k in 1usize..500) {
            let delta_bar = k as f64 / 1000.0;
            let (p, c) = conformal_quantile(&scores, delta_bar);
            let mut full = scores.clone();
            full.push(f64::INFINITY);
            full.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // exact integer ceiling of (n + 1)(1000 - k) / 1000
            let num = (scores.len() + 1) * (1000 - k);
            let p_exact = num.div_ceil(1000);
            prop_assert_eq!(p, p_exact);
            prop_assert_eq!(c, full[p_exact - 1]);
        }

        #[test]
        fn radius_monotone_in_level(scores in proptest::collection::vec(0.0..10.0f64, 1..100), a in 1usize..999, b in 1usize..999) {
            let (lo, hi) = (a.min(b) as f64 / 1000.0, a.max(b) as f64 / 1000.0);
            prop_assert!(conformal_quantile(&scores, lo).1 >= conformal_quantile(&scores, hi).1);
        }

        #[test]
        fn permutation_invariant(mut scores in proptest::collection::vec(0.0..10.0f64, 1..100), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let before = conformal_quantile(&scores, 0.05);
            scores.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(before, conformal_quantile(&scores, 0.05));
        }
    }
}
