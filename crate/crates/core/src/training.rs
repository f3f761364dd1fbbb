//! The episodic learning loop, independent of which backend produces
//! observations.

use std::time::{Duration, Instant};

use crate::arm::JointLimits;
use crate::env::{run_episode, stream_rng, Backend, MdpContext, Policy, Purpose};
use crate::error::{Error, Result};
use crate::nn::LrSchedule;
use crate::sac::{ReplayBuffer, SacAgent};
use crate::trajectory::{generate_random_trajectory, TrajectoryConfig};

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub trajectory_id: String,
    pub mean_reward: f64,
    pub mean_e_q: f64,
    pub mean_e_v: f64,
    pub mean_ee_error: f64,
    pub lr: f64,
    pub alpha_temp: f64,
}

impl EpisodeLog {
    pub const HEADER: [&'static str; 8] = [
        "episode",
        "trajectory_id",
        "mean_reward",
        "mean_e_q",
        "mean_e_v",
        "mean_ee_error",
        "lr",
        "alpha_temp",
    ];

    pub fn record(&self) -> Vec<String> {
        use crate::trajectory::fmt_f64;
        vec![
            self.episode.to_string(),
            self.trajectory_id.clone(),
            fmt_f64(self.mean_reward),
            fmt_f64(self.mean_e_q),
            fmt_f64(self.mean_e_v),
            fmt_f64(self.mean_ee_error),
            fmt_f64(self.lr),
            fmt_f64(self.alpha_temp),
        ]
    }

    pub fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        let bad = || Error::Format(format!("bad episode log row: {rec:?}"));
        if rec.len() != Self::HEADER.len() {
            return Err(bad());
        }
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            episode: rec[0].parse().map_err(|_| bad())?,
            trajectory_id: rec[1].to_string(),
            mean_reward: f(2)?,
            mean_e_q: f(3)?,
            mean_e_v: f(4)?,
            mean_ee_error: f(5)?,
            lr: f(6)?,
            alpha_temp: f(7)?,
        })
    }
}

/// Reads a log written with [`EpisodeLog::HEADER`].
pub fn read_episode_log<R: std::io::Read>(reader: R) -> Result<Vec<EpisodeLog>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(EpisodeLog::HEADER) {
        return Err(Error::Format("episode log header mismatch".into()));
    }
    rdr.records().map(|r| EpisodeLog::from_record(&r?)).collect()
}

/// Where the loop draws its trajectories and random streams from.
#[derive(Clone, Debug)]
pub struct LoopSettings {
    pub seed: u64,
    pub trajectory_purpose: Purpose,
    pub id_prefix: String,
    /// Added to the episode index for noise, policy and update streams so
    /// that separate loops sharing a seed stay independent.
    pub stream_offset: u64,
    pub limits: JointLimits,
    pub trajectories: TrajectoryConfig,
    pub schedule: LrSchedule,
}

/// Runs episodes `start..end`, calling `after_episode` once per episode with
/// its log row and wall-clock duration.
///
/// After each episode of `T` transitions the agent performs
/// `round(replay_ratio · T)` updates, provided the buffer holds a minibatch.
pub fn train_episodes<B, F>(
    agent: &mut SacAgent,
    buffer: &mut ReplayBuffer,
    backend: &mut B,
    ctx: &MdpContext,
    settings: &LoopSettings,
    episodes: std::ops::Range<usize>,
    mut after_episode: F,
) -> Result<()>
where
    B: Backend,
    F: FnMut(&EpisodeLog, &SacAgent, &ReplayBuffer, Duration) -> Result<()>,
{
    for episode in episodes {
        let started = Instant::now();
        let e = episode as u64;
        let traj = generate_random_trajectory(
            &mut stream_rng(settings.seed, settings.trajectory_purpose, e),
            format!("{}-{episode:05}", settings.id_prefix),
            &settings.limits,
            &settings.trajectories,
        )?;
        let stream = e + settings.stream_offset;
        let mut noise = stream_rng(settings.seed, Purpose::Noise, stream);
        let mut policy = stream_rng(settings.seed, Purpose::Policy, stream);
        let outcome = run_episode(backend, &traj, Policy::Stochastic(agent), ctx, &mut noise, &mut policy)?;

        let updates = (agent.config.replay_ratio * outcome.transitions.len() as f64).round() as usize;
        for t in outcome.transitions {
            buffer.push(t)?;
        }
        let lr = settings.schedule.lr_at(episode);
        if buffer.len() >= agent.config.minibatch {
            let mut rng = stream_rng(settings.seed, Purpose::Update, stream);
            for _ in 0..updates {
                let batch = buffer.sample(agent.config.minibatch, &mut rng)?;
                agent.sac_update(&batch, lr, &mut rng)?;
            }
        }
        let log = EpisodeLog {
            episode,
            trajectory_id: traj.id,
            mean_reward: outcome.summary.mean_reward,
            mean_e_q: outcome.summary.mean_e_q,
            mean_e_v: outcome.summary.mean_e_v,
            mean_ee_error: outcome.summary.mean_ee_error,
            lr,
            alpha_temp: agent.alpha(),
        };
        after_episode(&log, agent, buffer, started.elapsed())?;
    }
    Ok(())
}
