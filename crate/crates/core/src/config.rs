//! Run configuration, loaded from TOML. Every field has a default, so an
//! empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arm::{JointLimits, PlantParams};
use crate::dynamics::DynTrainConfig;
use crate::env::{ControllerConfig, MdpContext};
use crate::error::{Error, Result};
use crate::mdp::{compute_action_bounds, filter_coefficient, ActionBounds, RewardParams, ScalingStats, StateScaler};
use crate::nn::LrSchedule;
use crate::sac::SacConfig;
use crate::trajectory::TrajectoryConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunCounts {
    pub train_episodes: usize,
    pub collect_trajectories: usize,
    pub test_trajectories: usize,
    /// Episodes between checkpoints.
    pub checkpoint_every: usize,
    /// Periodic checkpoints kept on disk, newest first.
    pub keep_checkpoints: usize,
    /// Episodes averaged when picking the best checkpoint.
    pub best_window: usize,
}

impl Default for RunCounts {
    fn default() -> Self {
        Self {
            train_episodes: 1000,
            collect_trajectories: 200,
            test_trajectories: 100,
            checkpoint_every: 50,
            keep_checkpoints: 3,
            best_window: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InformedInitConfig {
    pub pretrain_episodes: usize,
    /// Model steps run while holding the first reference point.
    pub sim_settle_steps: usize,
    pub dynamics: DynTrainConfig,
}

impl Default for InformedInitConfig {
    fn default() -> Self {
        Self {
            pretrain_episodes: 300,
            sim_settle_steps: 20,
            dynamics: DynTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Payload used by `eval` when none is given, as a fraction of the last
    /// link mass.
    pub payload_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { payload_fraction: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Outer control period in seconds.
    pub dt: f64,
    pub filter_cutoff_hz: f64,
    pub plant: PlantParams,
    pub limits: JointLimits,
    pub controller: ControllerConfig,
    pub trajectories: TrajectoryConfig,
    pub reward: RewardParams,
    pub sac: SacConfig,
    pub schedule: LrSchedule,
    /// Replaces the bounds derived from the joint limits.
    pub action_bounds: Option<ActionBounds>,
    pub counts: RunCounts,
    pub informed_init: InformedInitConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/default"),
            dt: 0.05,
            filter_cutoff_hz: 4.0,
            plant: PlantParams::default(),
            limits: JointLimits::default(),
            controller: ControllerConfig::default(),
            trajectories: TrajectoryConfig::default(),
            reward: RewardParams::default(),
            sac: SacConfig::default(),
            schedule: LrSchedule::default(),
            action_bounds: None,
            counts: RunCounts::default(),
            informed_init: InformedInitConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.plant.n_joints();
        self.plant.validate()?;
        self.limits.validate()?;
        self.controller.validate(n)?;
        self.trajectories.validate()?;
        self.reward.validate()?;
        self.sac.validate()?;
        self.schedule.validate()?;
        self.informed_init.dynamics.validate()?;
        if self.limits.n_joints() != n {
            return Err(Error::Config(format!(
                "limits describe {} joints, plant has {n}",
                self.limits.n_joints()
            )));
        }
        if !(self.dt > 0.0) || (self.trajectories.dt - self.dt).abs() > 1e-12 {
            return Err(Error::Config("dt must be > 0 and equal trajectories.dt".into()));
        }
        let nyquist = 0.5 / self.dt;
        if !(self.filter_cutoff_hz > 0.0 && self.filter_cutoff_hz < nyquist) {
            return Err(Error::Config(format!("filter cutoff must lie in (0, {nyquist}) Hz")));
        }
        if let Some(b) = &self.action_bounds {
            b.validate()?;
            if b.n_joints() != n {
                return Err(Error::Config("action_bounds joint count differs from plant".into()));
            }
        }
        let c = &self.counts;
        if c.checkpoint_every == 0 || c.keep_checkpoints == 0 || c.best_window == 0 {
            return Err(Error::Config(
                "checkpoint_every, keep_checkpoints and best_window must be >= 1".into(),
            ));
        }
        if c.test_trajectories == 0 || c.collect_trajectories == 0 {
            return Err(Error::Config("trajectory counts must be >= 1".into()));
        }
        if !(self.eval.payload_fraction >= 0.0 && self.eval.payload_fraction.is_finite()) {
            return Err(Error::Config("payload_fraction must be >= 0".into()));
        }
        Ok(())
    }

    pub fn n_joints(&self) -> usize {
        self.plant.n_joints()
    }

    pub fn action_bounds(&self) -> Result<ActionBounds> {
        match &self.action_bounds {
            Some(b) => Ok(b.clone()),
            None => compute_action_bounds(&self.limits, self.dt),
        }
    }

    pub fn filter_alpha(&self) -> f64 {
        filter_coefficient(self.filter_cutoff_hz, self.dt)
    }

    pub fn mdp_context(&self, stats: Option<ScalingStats>) -> Result<MdpContext> {
        let bounds = self.action_bounds()?;
        let scaler = stats.map(|stats| StateScaler {
            limits: self.limits.clone(),
            bounds: bounds.clone(),
            stats,
        });
        Ok(MdpContext {
            limits: self.limits.clone(),
            bounds,
            reward: self.reward.clone(),
            filter_alpha: self.filter_alpha(),
            dt: self.dt,
            scaler,
            kinematics: self.plant.clone(),
        })
    }

    /// Payload mass for a fraction of the last link mass.
    pub fn payload_for_fraction(&self, fraction: f64) -> f64 {
        fraction * self.plant.link_masses.last().copied().unwrap_or(0.0)
    }
}
