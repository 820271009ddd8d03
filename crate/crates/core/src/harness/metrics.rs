//! Per-episode outcomes and their aggregation.

use serde::{Deserialize, Serialize};

/// Outcome of one ego episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Center distance to some agent fell below `system_radius + agent_radius`.
    pub collided: bool,
    /// Goal not reached within the horizon, without a collision.
    pub failed: bool,
    /// Smallest ego-agent center distance over the episode, meters.
    pub min_agent_distance: f64,
    /// Arrival time in seconds, or `horizon_t * dt` when the goal was not reached.
    pub time_to_goal: f64,
    pub steps_taken: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Reached,
    Collided,
    Failed,
}

impl EpisodeMetrics {
    pub fn outcome(&self) -> Outcome {
        match (self.collided, self.failed) {
            (true, _) => Outcome::Collided,
            (false, true) => Outcome::Failed,
            (false, false) => Outcome::Reached,
        }
    }

    pub fn reached(&self) -> bool {
        self.outcome() == Outcome::Reached
    }
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One row of the per-episode metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub controller: String,
    pub seed: u64,
    pub collided: bool,
    pub failed: bool,
    pub min_dist_m: f64,
    pub time_to_goal_s: f64,
}

impl MetricRow {
    pub fn new(controller: &str, seed: u64, m: &EpisodeMetrics) -> Self {
        MetricRow {
            controller: controller.to_string(),
            seed,
            collided: m.collided,
            failed: m.failed,
            min_dist_m: m.min_agent_distance,
            time_to_goal_s: m.time_to_goal,
        }
    }
}

/// Aggregates for one controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub controller: String,
    pub episodes: usize,
    pub collisions: usize,
    pub failures: usize,
    pub reached: usize,
    pub collision_pct: f64,
    pub failure_pct: f64,
    /// Mean over episodes of the per-episode minimum ego-agent distance.
    pub mean_min_distance: Option<f64>,
    /// Mean arrival time over episodes that reached the goal.
    pub mean_time_to_goal: Option<f64>,
    /// Mean of `time_to_goal` over all episodes (non-arrivals count as T·dt).
    pub mean_time_to_goal_all: f64,
}

fn finite_mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    let m = s / n as f64;
    (n > 0 && m.is_finite()).then_some(m)
}

impl ControllerSummary {
    pub fn from_rows(controller: &str, rows: &[&MetricRow]) -> Self {
        let episodes = rows.len();
        let collisions = rows.iter().filter(|r| r.collided).count();
        let failures = rows.iter().filter(|r| r.failed && !r.collided).count();
        let reached = episodes - collisions - failures;
        let pct = |k: usize| if episodes == 0 { 0.0 } else { 100.0 * k as f64 / episodes as f64 };
        ControllerSummary {
            controller: controller.to_string(),
            episodes,
            collisions,
            failures,
            reached,
            collision_pct: pct(collisions),
            failure_pct: pct(failures),
            mean_min_distance: finite_mean(rows.iter().map(|r| r.min_dist_m)),
            mean_time_to_goal: finite_mean(rows.iter().filter(|r| !r.collided && !r.failed).map(|r| r.time_to_goal_s)),
            mean_time_to_goal_all: finite_mean(rows.iter().map(|r| r.time_to_goal_s)).unwrap_or(0.0),
        }
    }
}

/// Per-controller aggregates over a shared seed list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub controllers: Vec<ControllerSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<crate::conformal::Coverage>,
}

impl ExperimentReport {
    /// Aggregates rows grouped by controller, in first-appearance order.
    /// Every controller must have been run on exactly `seeds`, in order.
    pub fn from_rows(rows: &[MetricRow], seeds: &[u64], config_hash: &str) -> crate::Result<Self> {
        let mut names: Vec<&str> = Vec::new();
        for r in rows {
            if !names.contains(&r.controller.as_str()) {
                names.push(&r.controller);
            }
        }
        let mut controllers = Vec::new();
        for name in names {
            let mine: Vec<&MetricRow> = rows.iter().filter(|r| r.controller == name).collect();
            let run: Vec<u64> = mine.iter().map(|r| r.seed).collect();
            if run != seeds {
                return Err(crate::Error::InvalidInput(format!("controller {name} was not run on the shared seed list")));
            }
            controllers.push(ControllerSummary::from_rows(name, &mine));
        }
        Ok(ExperimentReport {
            schema_version: REPORT_SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            seeds: seeds.to_vec(),
            controllers,
            coverage: None,
        })
    }

    pub fn summary(&self, controller: &str) -> Option<&ControllerSummary> {
        self.controllers.iter().find(|c| c.controller == controller)
    }
}
