use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::{ActionInterval, MaxRule};
use crate::environments::{AdEnvConfig, LqEnvConfig, RbiasMode};
use crate::error::{Error, Result};
use crate::inference::InferenceSettings;
use crate::sa_core::{LearningSchedule, ProjectionBall};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Rbias,
    IvsgdTable,
    CoverageTable,
    LqRun,
    LqOracle,
    Infer,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rbias" => Ok(Preset::Rbias),
            "ivsgd-table" => Ok(Preset::IvsgdTable),
            "coverage-table" => Ok(Preset::CoverageTable),
            "lq-run" => Ok(Preset::LqRun),
            "lq-oracle" => Ok(Preset::LqOracle),
            "infer" => Ok(Preset::Infer),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Rbias => "rbias",
            Preset::IvsgdTable => "ivsgd-table",
            Preset::CoverageTable => "coverage-table",
            Preset::LqRun => "lq-run",
            Preset::LqOracle => "lq-oracle",
            Preset::Infer => "infer",
        }
    }

    fn default_replications(&self) -> usize {
        match self {
            Preset::IvsgdTable | Preset::CoverageTable => 200,
            Preset::LqRun => 10,
            Preset::Rbias | Preset::LqOracle | Preset::Infer => 1,
        }
    }

    fn default_horizon(&self) -> u64 {
        match self {
            Preset::IvsgdTable | Preset::CoverageTable => 10_000,
            Preset::LqRun | Preset::Infer => 200_000,
            Preset::Rbias => 100_000,
            Preset::LqOracle => 10,
        }
    }
}

/// Advertising-model design grid and iterate initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvsgdBlock {
    pub schedule: LearningSchedule,
    pub projection: ProjectionBall,
    pub theta0: Vec<f64>,
    pub gamma0: Vec<Vec<f64>>,
    /// Leading rows of `gamma0` held fixed (the intercept instrument maps to the intercept regressor).
    pub pinned_gamma_rows: usize,
    pub horizons: Vec<u64>,
    pub p_explore: Vec<f64>,
    pub b: Vec<f64>,
    pub level: f64,
}

impl Default for IvsgdBlock {
    fn default() -> Self {
        Self {
            schedule: LearningSchedule { alpha0: 10.0, kappa: 0.7, beta0: 5.0, delta: 0.9 },
            projection: ProjectionBall::Radius(3.0),
            theta0: vec![0.5, 0.5],
            gamma0: vec![vec![1.0, 0.0], vec![1.0, 1.0]],
            pinned_gamma_rows: 1,
            horizons: vec![10_000, 50_000],
            p_explore: vec![0.3, 0.7],
            b: vec![0.3, 0.7],
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqBlock {
    pub schedule: LearningSchedule,
    pub projection: ProjectionBall,
    pub theta0: [f64; 6],
    pub gamma0_scale: f64,
    /// Initial state; the stationary mean under the behavior policy when absent.
    pub s0: Option<f64>,
    pub max_rule: MaxRule,
    pub action_interval: ActionInterval,
    pub checkpoints: usize,
    pub early_window: u64,
    pub early_stride: u64,
    pub late_window: u64,
    pub ltoc_states: Vec<f64>,
    pub divergence_norm: f64,
}

impl Default for LqBlock {
    fn default() -> Self {
        Self {
            schedule: LearningSchedule { alpha0: 15.0, kappa: 0.7, beta0: 10.0, delta: 1.0 },
            projection: ProjectionBall::Radius(5.0),
            theta0: [2.5, 0.5, 0.2, 0.5, 0.5, -1.5],
            gamma0_scale: 0.1,
            s0: None,
            max_rule: MaxRule::Stationary,
            action_interval: ActionInterval::default(),
            checkpoints: 1000,
            early_window: 5000,
            early_stride: 5,
            late_window: 10_000,
            ltoc_states: vec![1.0, 2.0, 4.0],
            divergence_norm: 1e6,
        }
    }
}

impl LqBlock {
    pub fn initial_state(&self, env: &LqEnvConfig) -> f64 {
        self.s0.unwrap_or_else(|| env.stationary_state_mean())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbiasBlock {
    pub theta_star: f64,
    pub action_beta: f64,
    pub state_beta: f64,
    pub initial_slope: f64,
    pub rounds: usize,
    pub modes: Vec<RbiasMode>,
}

impl Default for RbiasBlock {
    fn default() -> Self {
        Self {
            theta_star: 1.0,
            action_beta: 0.5,
            state_beta: 2.0,
            initial_slope: 1.0,
            rounds: 10,
            modes: vec![RbiasMode::ActionDependent, RbiasMode::StateDependent],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferBlock {
    pub settings: InferenceSettings,
    pub level: f64,
    pub n_boot: usize,
    pub test_level: f64,
    pub test_states: Vec<f64>,
    pub max_visited_states: usize,
}

impl Default for InferBlock {
    fn default() -> Self {
        Self {
            settings: InferenceSettings::default(),
            level: 0.95,
            n_boot: 500,
            test_level: 0.05,
            test_states: vec![1.0, 2.0],
            max_visited_states: 500,
        }
    }
}

/// Everything a preset needs; a run is a pure function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Option<Preset>,
    pub replications: Option<usize>,
    pub horizon: Option<u64>,
    pub master_seed: u64,
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
    pub ad: AdEnvConfig,
    pub lq: LqEnvConfig,
    pub ivsgd: IvsgdBlock,
    pub lq_run: LqBlock,
    pub rbias: RbiasBlock,
    pub infer: InferBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            replications: None,
            horizon: None,
            master_seed: 20240601,
            threads: None,
            output: None,
            ad: AdEnvConfig::default(),
            lq: LqEnvConfig::default(),
            ivsgd: IvsgdBlock::default(),
            lq_run: LqBlock::default(),
            rbias: RbiasBlock::default(),
            infer: InferBlock::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self { preset: Some(preset), ..Default::default() }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn preset(&self) -> Result<Preset> {
        self.preset.ok_or_else(|| Error::Config("no preset given".into()))
    }

    pub fn replications(&self) -> Result<usize> {
        let r = self.replications.unwrap_or(self.preset()?.default_replications());
        if r == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        Ok(r)
    }

    /// Explicit horizon if set, otherwise the preset default.
    pub fn horizon(&self) -> Result<u64> {
        let h = self.horizon.unwrap_or(self.preset()?.default_horizon());
        if h < 10 {
            return Err(Error::Config(format!("horizon must be >= 10, got {h}")));
        }
        Ok(h)
    }

    /// Horizons of the advertising design grid; a single explicit horizon replaces the grid.
    pub fn table_horizons(&self) -> Result<Vec<u64>> {
        match self.horizon {
            Some(h) if h < 10 => Err(Error::Config(format!("horizon must be >= 10, got {h}"))),
            Some(h) => Ok(vec![h]),
            None => Ok(self.ivsgd.horizons.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preset()?;
        self.replications()?;
        self.horizon()?;
        self.ad.validate()?;
        self.lq.validate()?;
        self.ivsgd.schedule.validate()?;
        self.lq_run.schedule.validate()?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.ivsgd.horizons.is_empty() || self.ivsgd.p_explore.is_empty() || self.ivsgd.b.is_empty() {
            return Err(Error::Config("empty design grid".into()));
        }
        for &p in &self.ivsgd.p_explore {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("p_explore {p} outside [0,1]")));
            }
        }
        Ok(())
    }
}
