//! Experiment configuration: one TOML file with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::DatasetSplit;
use crate::conformal::{compute_delta_bar, ScoreKind};
use crate::controllers::{GoalSeeker, NominalPolicy};
use crate::error::{Error, Result};
use crate::filter::{FilterConfig, SftrainOptions};
use crate::predictor::PredictorConfig;
use crate::world::ScenarioConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub dataset: DatasetConfig,
    pub predictor: PredictorConfig,
    pub contamination: ContaminationConfig,
    pub conformal: ConformalConfig,
    pub nominal: NominalPolicy,
    pub sftrain: SftrainOptions,
    pub filter: FilterConfig,
    pub evaluate: EvaluateConfig,
    pub shift: ShiftConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            scenario: ScenarioConfig::default(),
            dataset: DatasetConfig::default(),
            predictor: PredictorConfig::default(),
            contamination: ContaminationConfig::default(),
            conformal: ConformalConfig::default(),
            nominal: NominalPolicy::GoalSeeker(GoalSeeker::default()),
            sftrain: SftrainOptions::default(),
            filter: FilterConfig::default(),
            evaluate: EvaluateConfig::default(),
            shift: ShiftConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// K, the number of episodes shared between the three splits.
    pub episodes: usize,
    pub split: DatasetSplit,
    /// Held-out episodes for coverage and shift reports.
    pub test_episodes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            episodes: 3000,
            split: DatasetSplit { train_y: 1.0 / 3.0, train_sf: 1.0 / 3.0, cal: 1.0 / 3.0, extra_cal: 0 },
            test_episodes: 1000,
        }
    }
}

/// Optional heavy-tailed corruption of the predictor's output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContaminationConfig {
    /// Fraction of histories whose forecast is shifted; 0 disables.
    pub rate: f64,
    pub scale: f64,
    pub tail: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformalConfig {
    /// Mission failure probability δ.
    pub delta: f64,
    /// Number of statements in the union bound; defaults to the episode
    /// horizon `scenario.horizon_t`.
    pub union_steps: Option<usize>,
    /// Steps observed before the first prediction.
    pub t_obs: usize,
    pub score: ScoreKind,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        ConformalConfig { delta: 0.05, union_steps: None, t_obs: 8, score: ScoreKind::Stacked }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Nominal,
    /// Nominal policy under the safety filter with conformal radii.
    Cpsf,
    /// Nominal policy under the safety filter with Gaussian radii.
    Gasf,
    StandStill,
}

impl ControllerKind {
    pub fn label(&self) -> &'static str {
        match self {
            ControllerKind::Nominal => "nominal",
            ControllerKind::Cpsf => "cpsf",
            ControllerKind::Gasf => "gasf",
            ControllerKind::StandStill => "stand_still",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        [ControllerKind::Nominal, ControllerKind::Cpsf, ControllerKind::Gasf, ControllerKind::StandStill]
            .into_iter()
            .find(|k| k.label() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub episodes: usize,
    pub controllers: Vec<ControllerKind>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig { episodes: 200, controllers: vec![ControllerKind::Nominal, ControllerKind::Cpsf] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    /// Upper edges of the inter-agent distance categories, meters.
    pub edges: Vec<f64>,
    /// Prediction steps reported.
    pub steps: Vec<usize>,
    pub histogram_bins: usize,
    /// Adjacent categories count as similar below this KS distance.
    pub threshold: f64,
    /// Spacing of prediction cuts within each episode.
    pub cut_stride: usize,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig { edges: vec![1.5, 2.5, 3.5], steps: vec![1, 4, 7], histogram_bins: 20, threshold: 0.2, cut_stride: 4 }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.dataset.split.sizes(self.dataset.episodes)?;
        compute_delta_bar(self.conformal.delta, self.union_steps())?;
        let h = self.predictor.horizon;
        if h == 0 {
            return Err(Error::Config("predictor.horizon must be at least 1".into()));
        }
        if self.conformal.t_obs + h + 1 > self.scenario.horizon_t + 1 {
            return Err(Error::Config(format!(
                "t_obs ({}) + H ({h}) exceeds the episode horizon ({})",
                self.conformal.t_obs, self.scenario.horizon_t
            )));
        }
        if self.sftrain.t_obs != self.conformal.t_obs {
            return Err(Error::Config("sftrain.t_obs must equal conformal.t_obs".into()));
        }
        let c = &self.contamination;
        if c.rate < 0.0 || c.rate > 1.0 || (c.rate > 0.0 && !(c.scale > 0.0 && c.tail > 0.0)) {
            return Err(Error::Config("contamination needs rate in [0, 1] and positive scale and tail".into()));
        }
        if self.shift.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("shift.edges must increase".into()));
        }
        Ok(())
    }

    pub fn union_steps(&self) -> usize {
        self.conformal.union_steps.unwrap_or(self.scenario.horizon_t)
    }

    pub fn delta_bar(&self) -> Result<f64> {
        compute_delta_bar(self.conformal.delta, self.union_steps())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
