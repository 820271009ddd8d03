//! Paired-seed closed-loop evaluation of several controllers.

use std::path::PathBuf;

use rayon::prelude::*;

use super::config::{ControllerKind, ExperimentConfig};
use super::metrics::{EpisodeMetrics, ExperimentReport, MetricRow};
use crate::agents::{derive_seed, rollout_episode};
use crate::conformal::ConformalRadii;
use crate::controllers::{Policy, PolicyController, StandStill};
use crate::error::{Error, Result};
use crate::filter::{FilterModel, FilteredController};
use crate::predictor::TrajectoryPredictor;

/// Stream tag for evaluation episode seeds.
pub const EVAL_STREAM: u64 = 3;

/// The `n` evaluation seeds shared by every controller.
pub fn evaluation_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(master, EVAL_STREAM, i)).collect()
}

/// A trained filter together with the radii it runs against.
#[derive(Clone, Copy)]
pub struct FilterArtifacts<'a> {
    pub model: &'a FilterModel<f64>,
    pub radii: &'a ConformalRadii,
}

#[derive(Clone, Copy, Default)]
pub struct Artifacts<'a> {
    pub predictor: Option<&'a dyn TrajectoryPredictor<f64>>,
    pub conformal: Option<FilterArtifacts<'a>>,
    pub gaussian: Option<FilterArtifacts<'a>>,
}

fn missing(method: &str) -> Error {
    Error::MissingArtifact { path: PathBuf::from(format!("models/filter_{method}.json")), subcommand: "train-filter" }
}

/// Runs one episode of `kind` on `seed`.
pub fn run_controller(
    config: &ExperimentConfig,
    kind: ControllerKind,
    artifacts: &Artifacts<'_>,
    seed: u64,
) -> Result<EpisodeMetrics> {
    let sc = &config.scenario;
    let nominal: &dyn Policy<f64> = &config.nominal;
    let metrics = match kind {
        ControllerKind::Nominal => rollout_episode(sc, &mut PolicyController { policy: nominal }, seed)?.1,
        ControllerKind::StandStill => {
            let still = StandStill { vehicle: sc.vehicle };
            rollout_episode(sc, &mut PolicyController::<f64> { policy: &still }, seed)?.1
        }
        ControllerKind::Cpsf | ControllerKind::Gasf => {
            let (filter, name) = match kind {
                ControllerKind::Cpsf => (artifacts.conformal, "conformal"),
                _ => (artifacts.gaussian, "gaussian"),
            };
            let filter = filter.ok_or_else(|| missing(name))?;
            let predictor = artifacts.predictor.ok_or(Error::MissingArtifact {
                path: PathBuf::from("models/predictor.json"),
                subcommand: "train-predictor",
            })?;
            let mut c = FilteredController::new(predictor, nominal, filter.model, &filter.radii.radii, config.conformal.t_obs);
            rollout_episode(sc, &mut c, seed)?.1
        }
    };
    Ok(metrics)
}

/// Every controller on the same seed list. Rows are ordered by controller,
/// then by seed.
pub fn evaluate(
    config: &ExperimentConfig,
    controllers: &[ControllerKind],
    seeds: &[u64],
    artifacts: &Artifacts<'_>,
) -> Result<(ExperimentReport, Vec<MetricRow>)> {
    for &kind in controllers {
        match kind {
            ControllerKind::Cpsf if artifacts.conformal.is_none() => return Err(missing("conformal")),
            ControllerKind::Gasf if artifacts.gaussian.is_none() => return Err(missing("gaussian")),
            _ => {}
        }
    }
    let mut rows = Vec::with_capacity(controllers.len() * seeds.len());
    for &kind in controllers {
        let metrics: Vec<Result<EpisodeMetrics>> =
            seeds.par_iter().map(|&s| run_controller(config, kind, artifacts, s)).collect();
        for (&seed, m) in seeds.iter().zip(metrics) {
            let m = m.map_err(|e| e.in_stage("evaluate"))?;
            rows.push(MetricRow::new(kind.label(), seed, &m));
        }
    }
    let report = ExperimentReport::from_rows(&rows, seeds, &config.hash())?;
    Ok((report, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::ScenarioConfig;

    #[test]
    fn stand_still_with_far_agents_always_fails() {
        let sc = ScenarioConfig { num_agents: 2, horizon_t: 30, ..Default::default() };
        let still = StandStill { vehicle: sc.vehicle };
        let seeds = evaluation_seeds(1, 20);
        let rows: Vec<MetricRow> = seeds
            .iter()
            .map(|&seed| {
                let mut scenario: crate::world::Scenario<f64> = crate::world::sample_scenario(&sc, seed).unwrap();
                for (k, a) in scenario.agents.iter_mut().enumerate() {
                    a.start = crate::geometry::Vec2::new(5.0, 5.0 - 2.0 * k as f64);
                    a.goal = crate::geometry::Vec2::new(5.5, 5.0 - 2.0 * k as f64);
                }
                let m = crate::agents::rollout_scenario(&sc, &scenario, &mut PolicyController { policy: &still }, seed).unwrap().1;
                MetricRow::new("stand_still", seed, &m)
            })
            .collect();
        let report = ExperimentReport::from_rows(&rows, &seeds, "h").unwrap();
        let s = report.summary("stand_still").unwrap();
        assert_eq!(s.failure_pct, 100.0);
        assert_eq!(s.collision_pct, 0.0);
    }

    #[test]
    fn cpsf_without_filter_names_train_filter() {
        let config = ExperimentConfig::default();
        let err = match evaluate(&config, &[ControllerKind::Cpsf], &[1], &Artifacts::default()) {
            Err(e) => e,
            Ok(_) => panic!("expected missing artifact"),
        };
        assert!(err.to_string().contains("train-filter"), "{err}");
    }

    #[test]
    fn rows_follow_seed_list_per_controller() {
        let config = ExperimentConfig {
            scenario: ScenarioConfig { num_agents: 2, horizon_t: 20, ..Default::default() },
            ..Default::default()
        };
        let seeds = evaluation_seeds(5, 6);
        let (report, rows) =
            evaluate(&config, &[ControllerKind::Nominal, ControllerKind::StandStill], &seeds, &Artifacts::default()).unwrap();
        assert_eq!(report.seeds, seeds);
        assert_eq!(rows.iter().map(|r| r.seed).take(6).collect::<Vec<_>>(), seeds);
        let again = ExperimentReport::from_rows(&rows, &seeds, &config.hash()).unwrap();
        assert_eq!(again, report);
    }
}
