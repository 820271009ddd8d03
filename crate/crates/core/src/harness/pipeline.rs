//! End-to-end stages reading and writing artifacts under one output
//! directory. Each stage checks for its inputs and names the subcommand that
//! produces a missing one.

use super::config::{ControllerKind, ExperimentConfig};
use super::evaluate::{evaluate, evaluation_seeds, Artifacts, FilterArtifacts};
use super::io::{read_episodes, read_json, require, write_csv, write_json, write_jsonl, write_text, Layout};
use super::metrics::{EpisodeMetrics, ExperimentReport, MetricRow};
use super::reports::{coverage_report, coverage_svg, shift_diagnostic, CoverageReport, ShiftReport};
use crate::agents::{derive_seed, generate_dataset, rollout_episode, sim::episodes_for_seeds, TrajectoryRecord};
use crate::conformal::{calibrate, empirical_coverage, ConformalRadii, RadiusMethod};
use crate::controllers::PolicyController;
use crate::error::{Error, Result};
use crate::filter::{build_sftrain, train_filter, FilterModel, FilterTrainingOutcome, FilteredController};
use crate::gaussian::fit_gaussian;
use crate::learncore::{load_model, save_model};
use crate::predictor::{train_predictor, Contaminated, PredictionBundle, PredictorModel, TrajectoryPredictor, TrainingOutcome};
use crate::world::AgentSnapshot;

/// Stream tags for seeds derived from the master seed.
pub const TEST_STREAM: u64 = 2;
pub const PREDICTOR_STREAM: u64 = 4;
pub const FILTER_STREAM: u64 = 5;
pub const CONTAMINATION_STREAM: u64 = 6;

/// The trained predictor, optionally wrapped in the configured contamination.
#[derive(Clone, Debug)]
pub enum LoadedPredictor {
    Plain(PredictorModel<f64>),
    Contaminated(Contaminated<PredictorModel<f64>>),
}

impl TrajectoryPredictor<f64> for LoadedPredictor {
    fn horizon(&self) -> usize {
        match self {
            LoadedPredictor::Plain(p) => p.horizon,
            LoadedPredictor::Contaminated(c) => c.inner.horizon,
        }
    }

    fn num_agents(&self) -> Option<usize> {
        match self {
            LoadedPredictor::Plain(p) => p.num_agents(),
            LoadedPredictor::Contaminated(c) => c.num_agents(),
        }
    }

    fn predict(&self, history: &[AgentSnapshot<f64>]) -> Result<PredictionBundle<f64>> {
        match self {
            LoadedPredictor::Plain(p) => p.predict(history),
            LoadedPredictor::Contaminated(c) => c.predict(history),
        }
    }
}

pub fn method_name(method: RadiusMethod) -> &'static str {
    match method {
        RadiusMethod::Conformal => "conformal",
        RadiusMethod::Gaussian => "gaussian",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSummary {
    pub train_y: usize,
    pub train_sf: usize,
    pub cal: usize,
    pub test: usize,
}

pub fn gen_data(config: &ExperimentConfig, layout: &Layout) -> Result<DataSummary> {
    let d = generate_dataset::<f64>(&config.scenario, config.dataset.episodes, &config.dataset.split, config.seed)?;
    let test_seeds: Vec<u64> = (0..config.dataset.test_episodes as u64).map(|i| derive_seed(config.seed, TEST_STREAM, i)).collect();
    let test = episodes_for_seeds::<f64>(&config.scenario, &test_seeds)?;
    write_text(&layout.config(), &config.to_toml()?)?;
    write_jsonl(&layout.train_y(), &d.train_y)?;
    write_jsonl(&layout.train_sf(), &d.train_sf)?;
    write_jsonl(&layout.cal(), &d.cal)?;
    write_jsonl(&layout.test(), &test)?;
    Ok(DataSummary { train_y: d.train_y.len(), train_sf: d.train_sf.len(), cal: d.cal.len(), test: test.len() })
}

fn episodes(path: std::path::PathBuf) -> Result<Vec<TrajectoryRecord<f64>>> {
    require(&path, "gen-data")?;
    read_episodes(&path)
}

pub fn train_predictor_stage(config: &ExperimentConfig, layout: &Layout) -> Result<TrainingOutcome<PredictorModel<f64>>> {
    let train = episodes(layout.train_y())?;
    let seed = derive_seed(config.seed, PREDICTOR_STREAM, 0);
    let out = train_predictor(&train, &config.predictor, config.scenario.workspace_half_width, seed)?;
    save_model(&layout.predictor(), &out.model)?;
    write_text(&layout.predictor_curve(), &out.curve.to_csv())?;
    Ok(out)
}

pub fn load_predictor(config: &ExperimentConfig, layout: &Layout) -> Result<LoadedPredictor> {
    require(&layout.predictor(), "train-predictor")?;
    let model: PredictorModel<f64> = load_model(&layout.predictor())?;
    model.validate()?;
    let c = &config.contamination;
    Ok(if c.rate > 0.0 {
        LoadedPredictor::Contaminated(Contaminated {
            inner: model,
            rate: c.rate,
            scale: c.scale,
            tail: c.tail,
            seed: derive_seed(config.seed, CONTAMINATION_STREAM, 0),
        })
    } else {
        LoadedPredictor::Plain(model)
    })
}

pub fn calibrate_stage(config: &ExperimentConfig, layout: &Layout) -> Result<ConformalRadii> {
    let predictor = load_predictor(config, layout)?;
    let cal = episodes(layout.cal())?;
    let radii = calibrate(&predictor, &cal, config.conformal.delta, config.union_steps(), config.conformal.t_obs, config.conformal.score)?;
    write_json(&layout.conformal_radii(), &radii)?;
    Ok(radii)
}

pub fn fit_gaussian_stage(config: &ExperimentConfig, layout: &Layout) -> Result<ConformalRadii> {
    let predictor = load_predictor(config, layout)?;
    let cal = episodes(layout.cal())?;
    let g = fit_gaussian(&predictor, &cal, config.conformal.t_obs, config.delta_bar()?)?;
    let radii = g.to_container(config.conformal.delta);
    write_json(&layout.gaussian_radii(), &radii)?;
    Ok(radii)
}

pub fn load_radii(layout: &Layout, method: RadiusMethod) -> Result<ConformalRadii> {
    let (path, producer) = match method {
        RadiusMethod::Conformal => (layout.conformal_radii(), "calibrate"),
        RadiusMethod::Gaussian => (layout.gaussian_radii(), "fit-gaussian"),
    };
    require(&path, producer)?;
    read_json(&path)
}

pub fn train_filter_stage(config: &ExperimentConfig, layout: &Layout, method: RadiusMethod) -> Result<FilterTrainingOutcome<f64>> {
    let predictor = load_predictor(config, layout)?;
    let radii = load_radii(layout, method)?;
    radii.require_finite()?;
    let train = episodes(layout.train_sf())?;
    let records = build_sftrain(&config.scenario, &train, &predictor, &config.nominal, &radii.radii, &config.sftrain)?;
    log::info!("filter training set: {} records from {} episodes", records.len(), train.len());
    let seed = derive_seed(config.seed, FILTER_STREAM, method as u64);
    let out = train_filter(&records, &config.filter, &config.scenario, seed)?;
    log::info!(
        "filter ({}) validation: imitation {:.5}, hinge {:.5}, violation rate {:.4}, lambda {}",
        method_name(method),
        out.validation.imitation,
        out.validation.hinge,
        out.validation.hinge_rate,
        out.final_lambda
    );
    save_model(&layout.filter(method_name(method)), &out.model)?;
    write_text(&layout.filter_curve(method_name(method)), &out.curve.to_csv())?;
    Ok(out)
}

pub fn load_filter(layout: &Layout, method: RadiusMethod) -> Result<(FilterModel<f64>, ConformalRadii)> {
    let path = layout.filter(method_name(method));
    require(&path, "train-filter")?;
    let model: FilterModel<f64> = load_model(&path)?;
    model.validate()?;
    Ok((model, load_radii(layout, method)?))
}

pub fn evaluate_stage(config: &ExperimentConfig, layout: &Layout) -> Result<ExperimentReport> {
    let controllers = &config.evaluate.controllers;
    let wants = |k: ControllerKind| controllers.contains(&k);
    let needs_predictor = wants(ControllerKind::Cpsf) || wants(ControllerKind::Gasf);
    let conformal = if wants(ControllerKind::Cpsf) { Some(load_filter(layout, RadiusMethod::Conformal)?) } else { None };
    let gaussian = if wants(ControllerKind::Gasf) { Some(load_filter(layout, RadiusMethod::Gaussian)?) } else { None };
    let predictor = if needs_predictor { Some(load_predictor(config, layout)?) } else { None };
    let artifacts = Artifacts {
        predictor: predictor.as_ref().map(|p| p as &dyn TrajectoryPredictor<f64>),
        conformal: conformal.as_ref().map(|(m, r)| FilterArtifacts { model: m, radii: r }),
        gaussian: gaussian.as_ref().map(|(m, r)| FilterArtifacts { model: m, radii: r }),
    };
    let seeds = evaluation_seeds(config.seed, config.evaluate.episodes);
    let (mut report, rows) = evaluate(config, controllers, &seeds, &artifacts)?;
    if let (Some(p), Some((_, radii))) = (&predictor, &conformal) {
        if layout.test().exists() {
            let test = read_episodes::<f64>(&layout.test())?;
            if !test.is_empty() {
                report.coverage = Some(empirical_coverage(p, radii, &test, config.conformal.t_obs)?);
            }
        }
    }
    write_csv(&layout.metrics(), &rows)?;
    write_json(&layout.report(), &report)?;
    Ok(report)
}

/// Rebuilds the report from the stored per-episode CSV.
pub fn report_from_csv(layout: &Layout, config: &ExperimentConfig) -> Result<ExperimentReport> {
    require(&layout.metrics(), "evaluate")?;
    let rows: Vec<MetricRow> = super::io::read_csv(&layout.metrics())?;
    let seeds = evaluation_seeds(config.seed, config.evaluate.episodes);
    ExperimentReport::from_rows(&rows, &seeds, &config.hash())
}

pub fn coverage_stage(config: &ExperimentConfig, layout: &Layout, method: RadiusMethod) -> Result<CoverageReport> {
    let predictor = load_predictor(config, layout)?;
    let radii = load_radii(layout, method)?;
    let test = episodes(layout.test())?;
    let rep = coverage_report(&radii, &predictor, &test, config.conformal.t_obs)?;
    write_csv(&layout.coverage_csv(), &rep.rows)?;
    write_text(&layout.coverage_svg(), &coverage_svg(&rep.rows))?;
    Ok(rep)
}

pub fn shift_stage(config: &ExperimentConfig, layout: &Layout) -> Result<ShiftReport> {
    let predictor = load_predictor(config, layout)?;
    let test = episodes(layout.test())?;
    let rep = shift_diagnostic(&test, &predictor, config.conformal.t_obs, &config.shift)?;
    write_json(&layout.shift(), &rep)?;
    Ok(rep)
}

/// One episode of `controller` on `seed`, with its full record.
pub fn run_stage(
    config: &ExperimentConfig,
    layout: &Layout,
    controller: ControllerKind,
    seed: u64,
) -> Result<(TrajectoryRecord<f64>, EpisodeMetrics)> {
    let sc = &config.scenario;
    match controller {
        ControllerKind::Nominal => rollout_episode(sc, &mut PolicyController { policy: &config.nominal }, seed),
        ControllerKind::StandStill => {
            let still = crate::controllers::StandStill { vehicle: sc.vehicle };
            rollout_episode(sc, &mut PolicyController::<f64> { policy: &still }, seed)
        }
        ControllerKind::Cpsf | ControllerKind::Gasf => {
            let method = if controller == ControllerKind::Cpsf { RadiusMethod::Conformal } else { RadiusMethod::Gaussian };
            let (model, radii) = load_filter(layout, method)?;
            let predictor = load_predictor(config, layout)?;
            let mut c = FilteredController::new(&predictor, &config.nominal, &model, &radii.radii, config.conformal.t_obs);
            rollout_episode(sc, &mut c, seed)
        }
    }
}

/// Parses a controller label, listing the valid ones on failure.
pub fn parse_controller(s: &str) -> Result<ControllerKind> {
    ControllerKind::from_label(s).ok_or_else(|| Error::InvalidInput(format!("unknown controller {s:?}; expected nominal, cpsf, gasf or stand_still")))
}
