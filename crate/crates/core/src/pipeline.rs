//! File-based stages of an experiment: collect, pretrain, train, eval and
//! report. Each stage reads its inputs from and writes its outputs to one run
//! directory.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::arm::set_payload;
use crate::config::RunConfig;
use crate::dynamics::{collect_dataset, read_dataset_csv, train_dynamics, write_dataset_csv, DynModel};
use crate::env::{run_episode, stream_rng, LearnedSimBackend, PlantBackend, Policy, Purpose, StepRecord};
use crate::error::{Error, Result};
use crate::mdp::{compute_scaling_stats, state_dim, ErrorRecord, ScalingStats};
use crate::nn::Checkpoint;
use crate::sac::{ReplayBuffer, SacAgent};
use crate::training::{read_episode_log, train_episodes, EpisodeLog, LoopSettings};
use crate::trajectory::{build_corpus, ensure_disjoint, fmt_f64, generate_random_trajectory, ReferenceTrajectory};

pub const DATASET: &str = "dataset.csv";
pub const BASELINE_ERRORS: &str = "baseline_errors.csv";
pub const SCALING_STATS: &str = "scaling_stats.csv";
pub const DYNAMICS_MODEL: &str = "dynamics.ckpt";
pub const DYNAMICS_LOSS: &str = "dynamics_loss.csv";
pub const PRETRAINED_AGENT: &str = "pretrained_agent.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const TRAIN_LOG: &str = "episode_log.csv";
pub const TRAIN_TIMING: &str = "episode_timing.csv";
pub const FINAL_AGENT: &str = "agent.ckpt";
pub const BEST_AGENT: &str = "best.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const RESUME_AGENT: &str = "resume_agent.ckpt";
pub const RESUME_REPLAY: &str = "resume_replay.ckpt";
pub const REPORT_DIR: &str = "report";

/// Keeps pretraining streams apart from the training episodes of a seed.
pub const PRETRAIN_STREAM_OFFSET: u64 = 1 << 32;
/// Agent initialisation stream shared by random-init and pretrained runs.
const AGENT_INIT_INDEX: u64 = 0;

fn missing(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::MissingInput {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn open_input(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| missing(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn training_corpus_ids(cfg: &RunConfig) -> Result<Vec<ReferenceTrajectory>> {
    (0..cfg.counts.train_episodes)
        .map(|e| {
            generate_random_trajectory(
                &mut stream_rng(cfg.seed, Purpose::TrainTrajectory, e as u64),
                format!("train-{e:05}"),
                &cfg.limits,
                &cfg.trajectories,
            )
        })
        .collect()
}

/// The held-out evaluation corpus of a seed.
pub fn test_corpus(cfg: &RunConfig) -> Result<Vec<ReferenceTrajectory>> {
    build_corpus(
        &mut stream_rng(cfg.seed, Purpose::TestCorpus, 0),
        "test",
        cfg.counts.test_trajectories,
        &cfg.limits,
        &cfg.trajectories,
    )
}

// Scaling statistics and agent files.

pub fn write_stats_csv(path: &Path, stats: &ScalingStats) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["joint", "mu_q", "sigma_q", "mu_v", "sigma_v"])?;
    for j in 0..stats.n_joints() {
        w.write_record([
            j.to_string(),
            fmt_f64(stats.mu_q[j]),
            fmt_f64(stats.sigma_q[j]),
            fmt_f64(stats.mu_v[j]),
            fmt_f64(stats.sigma_v[j]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stats_csv(path: &Path) -> Result<ScalingStats> {
    let mut rdr = csv::Reader::from_reader(open_input(path)?);
    let mut stats = ScalingStats {
        mu_q: vec![],
        sigma_q: vec![],
        mu_v: vec![],
        sigma_v: vec![],
    };
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Format(format!("bad scaling stats row in {}", path.display())))
        };
        stats.mu_q.push(f(1)?);
        stats.sigma_q.push(f(2)?);
        stats.mu_v.push(f(3)?);
        stats.sigma_v.push(f(4)?);
    }
    if stats.mu_q.is_empty() {
        return Err(Error::Format(format!("no scaling stats in {}", path.display())));
    }
    Ok(stats)
}

/// An agent together with the statistics its state scaling depends on.
#[derive(Clone, Debug)]
pub struct AgentFile {
    pub agent: SacAgent,
    pub stats: ScalingStats,
    /// First episode not yet run.
    pub next_episode: u64,
}

pub fn save_agent(path: &Path, agent: &SacAgent, stats: &ScalingStats, next_episode: u64) -> Result<()> {
    let mut ck = agent.to_checkpoint();
    ck.vectors.push(stats.to_flat());
    ck.counters.push(next_episode);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    ck.save(path)
}

pub fn load_agent(path: &Path, cfg: &RunConfig) -> Result<AgentFile> {
    if !path.exists() {
        return Err(missing(path, "no such file"));
    }
    let ck = Checkpoint::load(path)?;
    let stats = ck
        .vectors
        .get(SacAgent::CHECKPOINT_VECTORS)
        .ok_or_else(|| Error::Checkpoint("agent file lacks scaling statistics".into()))
        .and_then(|v| ScalingStats::from_flat(v))?;
    let next_episode = *ck
        .counters
        .get(5)
        .ok_or_else(|| Error::Checkpoint("agent file lacks episode counter".into()))?;
    let agent = SacAgent::from_checkpoint(cfg.sac.clone(), &ck)?;
    let n = cfg.n_joints();
    if stats.n_joints() != n || agent.state_dim != state_dim(n, 2 * n) || agent.action_dim != 2 * n {
        return Err(Error::DimensionMismatch {
            context: "agent file vs configuration",
            expected: state_dim(n, 2 * n),
            actual: agent.state_dim,
        });
    }
    Ok(AgentFile {
        agent,
        stats,
        next_episode,
    })
}

// Collect.

#[derive(Clone, Debug)]
pub struct CollectSummary {
    pub trajectories: usize,
    pub samples: usize,
    pub stats: ScalingStats,
}

/// Runs the baseline over a fresh corpus and stores the dynamics dataset,
/// the tracking errors and their scaling statistics.
pub fn collect(cfg: &RunConfig, out: &Path) -> Result<CollectSummary> {
    cfg.validate()?;
    let corpus = build_corpus(
        &mut stream_rng(cfg.seed, Purpose::CollectTrajectory, 0),
        "collect",
        cfg.counts.collect_trajectories,
        &cfg.limits,
        &cfg.trajectories,
    )?;
    let mut backend = PlantBackend::new(cfg.plant.clone(), &cfg.plant, &cfg.controller, cfg.dt)?;
    let ctx = cfg.mdp_context(None)?;
    let data = collect_dataset(&mut backend, &corpus, &ctx, cfg.seed)?;
    let stats = compute_scaling_stats(&data.errors)?;

    fs::create_dir_all(out)?;
    write_dataset_csv(create(&out.join(DATASET))?, &data.samples)?;
    write_errors_csv(&out.join(BASELINE_ERRORS), &data.errors)?;
    write_stats_csv(&out.join(SCALING_STATS), &stats)?;
    Ok(CollectSummary {
        trajectories: corpus.len(),
        samples: data.samples.len(),
        stats,
    })
}

fn write_errors_csv(path: &Path, errors: &[ErrorRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let n = errors.first().map_or(0, |e| e.dq.len());
    let mut header = vec!["index".to_string()];
    header.extend((0..n).map(|j| format!("dq_{j}")));
    header.extend((0..n).map(|j| format!("dqd_{j}")));
    w.write_record(&header)?;
    for (i, e) in errors.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(e.dq.iter().chain(&e.dqd).map(|x| fmt_f64(*x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

// Logs.

struct LogWriter {
    log: csv::Writer<File>,
    timing: csv::Writer<File>,
}

impl LogWriter {
    /// Opens both logs, keeping only rows of episodes before `keep_before`.
    fn open(log_path: &Path, timing_path: &Path, keep_before: Option<usize>) -> Result<Self> {
        let open = |path: &Path, header: &[&str]| -> Result<csv::Writer<File>> {
            let kept = match keep_before {
                Some(limit) if path.exists() => truncate_rows(path, limit)?,
                _ => vec![],
            };
            let mut file = File::create(path)?;
            writeln!(file, "{}", header.join(","))?;
            for line in kept {
                writeln!(file, "{line}")?;
            }
            let file = OpenOptions::new().append(true).open(path)?;
            Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
        };
        Ok(Self {
            log: open(log_path, &EpisodeLog::HEADER)?,
            timing: open(timing_path, &["episode", "seconds"])?,
        })
    }

    fn append(&mut self, row: &EpisodeLog, seconds: f64) -> Result<()> {
        self.log.write_record(row.record())?;
        self.log.flush()?;
        self.timing
            .write_record([row.episode.to_string(), format!("{seconds:.6}")])?;
        self.timing.flush()?;
        Ok(())
    }
}

/// Data lines of a log whose leading episode index is below `limit`.
fn truncate_rows(path: &Path, limit: usize) -> Result<Vec<String>> {
    let mut kept = vec![];
    for line in BufReader::new(open_input(path)?).lines().skip(1) {
        let line = line?;
        let episode: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad row in {}", path.display())))?;
        if episode < limit {
            kept.push(line);
        }
    }
    Ok(kept)
}

pub fn read_log(path: &Path) -> Result<Vec<EpisodeLog>> {
    read_episode_log(open_input(path)?)
}

// Pretrain.

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub loss_history: Vec<f64>,
    pub logs: Vec<EpisodeLog>,
}

/// Fits the dynamics model on the collected data, then trains a fresh agent
/// against it. The replay buffer is discarded afterwards.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainSummary> {
    cfg.validate()?;
    let samples = read_dataset_csv(open_input(&out.join(DATASET))?)?;
    let stats = read_stats_csv(&out.join(SCALING_STATS))?;
    let (model, history) = train_dynamics(
        &samples,
        &cfg.informed_init.dynamics,
        &mut stream_rng(cfg.seed, Purpose::DynamicsInit, 0),
        &mut stream_rng(cfg.seed, Purpose::DynamicsShuffle, 0),
    )?;
    drop(samples);
    model.to_checkpoint().save(&out.join(DYNAMICS_MODEL))?;
    let mut w = csv::Writer::from_writer(create(&out.join(DYNAMICS_LOSS))?);
    w.write_record(["epoch", "loss"])?;
    for (epoch, loss) in history.iter().enumerate() {
        w.write_record([epoch.to_string(), fmt_f64(*loss)])?;
    }
    w.flush()?;

    let mut agent = fresh_agent(cfg)?;
    let logs = pretrain_agent(cfg, &model, &stats, &mut agent, &out.join(PRETRAIN_LOG))?;
    save_agent(&out.join(PRETRAINED_AGENT), &agent, &stats, 0)?;
    Ok(PretrainSummary {
        loss_history: history,
        logs,
    })
}

fn fresh_agent(cfg: &RunConfig) -> Result<SacAgent> {
    let n = cfg.n_joints();
    SacAgent::new(
        cfg.sac.clone(),
        state_dim(n, 2 * n),
        2 * n,
        &mut stream_rng(cfg.seed, Purpose::AgentInit, AGENT_INIT_INDEX),
    )
}

/// Trains `agent` inside the learned model for the configured number of
/// episodes.
pub fn pretrain_agent(
    cfg: &RunConfig,
    model: &DynModel,
    stats: &ScalingStats,
    agent: &mut SacAgent,
    log_path: &Path,
) -> Result<Vec<EpisodeLog>> {
    let mut backend = LearnedSimBackend::new(model, cfg.informed_init.sim_settle_steps);
    let ctx = cfg.mdp_context(Some(stats.clone()))?;
    let settings = LoopSettings {
        seed: cfg.seed,
        trajectory_purpose: Purpose::PretrainTrajectory,
        id_prefix: "pretrain".into(),
        stream_offset: PRETRAIN_STREAM_OFFSET,
        limits: cfg.limits.clone(),
        trajectories: cfg.trajectories.clone(),
        schedule: cfg.schedule.clone(),
    };
    let timing_path = log_path.with_extension("timing.csv");
    let mut writer = LogWriter::open(log_path, &timing_path, None)?;
    let mut buffer = ReplayBuffer::new(cfg.sac.replay_capacity);
    let mut logs = vec![];
    train_episodes(
        agent,
        &mut buffer,
        &mut backend,
        &ctx,
        &settings,
        0..cfg.informed_init.pretrain_episodes,
        |row, _, _, took| {
            writer.append(row, took.as_secs_f64())?;
            logs.push(row.clone());
            Ok(())
        },
    )?;
    Ok(logs)
}

// Train.

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum TrainStart {
    /// Fresh agent from the seed's initialisation stream.
    #[default]
    Random,
    /// Weights, temperature and optimiser state from an agent file.
    From(PathBuf),
    /// Continue from the resume files of the run directory.
    Resume,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    /// Complete log of the run, including rows written before a resume.
    pub logs: Vec<EpisodeLog>,
    pub transitions_checked: u64,
    pub best_episode: Option<usize>,
}

fn window_mean(logs: &[EpisodeLog], end: usize, window: usize) -> f64 {
    let start = end.saturating_sub(window);
    let slice = &logs[start..end];
    slice.iter().map(|l| l.mean_reward).sum::<f64>() / slice.len() as f64
}

/// Trains on the simulated plant, checkpointing as configured.
pub fn train(cfg: &RunConfig, out: &Path, start: &TrainStart) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    let (mut agent, stats, mut buffer, first) = match start {
        TrainStart::Random => {
            let stats = read_stats_csv(&out.join(SCALING_STATS))?;
            (fresh_agent(cfg)?, stats, ReplayBuffer::new(cfg.sac.replay_capacity), 0)
        }
        TrainStart::From(path) => {
            let f = load_agent(path, cfg)?;
            (f.agent, f.stats, ReplayBuffer::new(cfg.sac.replay_capacity), 0)
        }
        TrainStart::Resume => {
            let f = load_agent(&out.join(RESUME_AGENT), cfg)?;
            let replay_path = out.join(RESUME_REPLAY);
            if !replay_path.exists() {
                return Err(missing(&replay_path, "no such file"));
            }
            let buffer = ReplayBuffer::from_checkpoint(&Checkpoint::load(&replay_path)?)?;
            (f.agent, f.stats, buffer, f.next_episode as usize)
        }
    };
    let log_path = out.join(TRAIN_LOG);
    let keep = matches!(start, TrainStart::Resume).then_some(first);
    let mut writer = LogWriter::open(&log_path, &out.join(TRAIN_TIMING), keep)?;
    let mut logs = if keep.is_some() { read_log(&log_path)? } else { vec![] };
    if logs.len() != first {
        return Err(Error::Format(format!(
            "log holds {} rows but the resume point is episode {first}",
            logs.len()
        )));
    }

    let counts = &cfg.counts;
    let mut best: Option<(usize, f64)> = None;
    for end in (counts.checkpoint_every..=first).step_by(counts.checkpoint_every) {
        let score = window_mean(&logs, end, counts.best_window);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((end, score));
        }
    }

    let mut backend = PlantBackend::new(cfg.plant.clone(), &cfg.plant, &cfg.controller, cfg.dt)?;
    let ctx = cfg.mdp_context(Some(stats.clone()))?;
    let settings = LoopSettings {
        seed: cfg.seed,
        trajectory_purpose: Purpose::TrainTrajectory,
        id_prefix: "train".into(),
        stream_offset: 0,
        limits: cfg.limits.clone(),
        trajectories: cfg.trajectories.clone(),
        schedule: cfg.schedule.clone(),
    };
    let mut transitions = 0u64;
    let before = buffer.inserted();
    train_episodes(
        &mut agent,
        &mut buffer,
        &mut backend,
        &ctx,
        &settings,
        first..counts.train_episodes,
        |row, agent, buffer, took| {
            writer.append(row, took.as_secs_f64())?;
            logs.push(row.clone());
            let done = row.episode + 1;
            if done % counts.checkpoint_every == 0 {
                let dir = out.join(CHECKPOINT_DIR);
                save_agent(&dir.join(format!("ckpt-{done:05}.ckpt")), agent, &stats, done as u64)?;
                prune_checkpoints(&dir, counts.keep_checkpoints)?;
                let score = window_mean(&logs, done, counts.best_window);
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((done, score));
                    save_agent(&dir.join(BEST_AGENT), agent, &stats, done as u64)?;
                }
                save_agent(&out.join(RESUME_AGENT), agent, &stats, done as u64)?;
                buffer.to_checkpoint().save(&out.join(RESUME_REPLAY))?;
            }
            Ok(())
        },
    )?;
    transitions += buffer.inserted() - before;
    save_agent(&out.join(FINAL_AGENT), &agent, &stats, counts.train_episodes as u64)?;
    Ok(TrainSummary {
        logs,
        transitions_checked: transitions,
        best_episode: best.map(|(e, _)| e),
    })
}

fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let mut periodic: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".ckpt"))
        })
        .collect();
    periodic.sort();
    let excess = periodic.len().saturating_sub(keep);
    for p in &periodic[..excess] {
        fs::remove_file(p)?;
    }
    Ok(())
}

// Eval.

/// Tracking quality of one test trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEval {
    pub trajectory_id: String,
    /// Mean absolute position error per joint.
    pub joint_abs_error: Vec<f64>,
    /// Mean of the summed absolute position error.
    pub e_q: f64,
    pub e_v: f64,
    pub ee_error: f64,
    pub mean_reward: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics.
    pub fn of(xs: impl Iterator<Item = f64> + Clone) -> Self {
        let n = xs.clone().count().max(1) as f64;
        let mean = xs.clone().sum::<f64>() / n;
        let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub tag: String,
    pub payload: f64,
    pub per_trajectory: Vec<TrajectoryEval>,
    pub joint_abs_error: Vec<MeanStd>,
    pub e_q: MeanStd,
    pub e_v: MeanStd,
    pub ee_error: MeanStd,
    pub mean_reward: f64,
}

impl EvalReport {
    /// `1 - policy / baseline` on the summed position error.
    pub fn improvement_over(&self, baseline: &EvalReport) -> f64 {
        1.0 - self.e_q.mean / baseline.e_q.mean
    }
}

/// What `eval` runs on the test corpus.
#[derive(Clone, Debug)]
pub enum EvalPolicy {
    Baseline,
    Agent(PathBuf),
}

pub fn eval_tag(policy: &EvalPolicy, payload: f64) -> String {
    let who = match policy {
        EvalPolicy::Baseline => "baseline",
        EvalPolicy::Agent(_) => "policy",
    };
    format!("{who}-payload{payload:.3}")
}

/// Evaluates on the test corpus with mode actions and the given payload.
/// Writes `eval_<tag>.csv`, `eval_<tag>_summary.csv` and an overlay of the
/// first test trajectory.
pub fn eval(cfg: &RunConfig, out: &Path, policy: &EvalPolicy, payload: f64, tag: Option<&str>) -> Result<EvalReport> {
    cfg.validate()?;
    let corpus = test_corpus(cfg)?;
    ensure_disjoint(&corpus, &training_corpus_ids(cfg)?)?;
    let agent_file = match policy {
        EvalPolicy::Baseline => None,
        EvalPolicy::Agent(path) => Some(load_agent(path, cfg)?),
    };
    let ctx = cfg.mdp_context(agent_file.as_ref().map(|f| f.stats.clone()))?;
    let plant = set_payload(&cfg.plant, payload)?;
    let results: Vec<(TrajectoryEval, Vec<StepRecord>)> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, traj)| {
            let mut backend = PlantBackend::new(plant.clone(), &cfg.plant, &cfg.controller, cfg.dt)?;
            let mut noise = stream_rng(cfg.seed, Purpose::EvalNoise, i as u64);
            let mut unused = stream_rng(cfg.seed, Purpose::EvalNoise, i as u64 | 1 << 40);
            let p = match &agent_file {
                None => Policy::Baseline,
                Some(f) => Policy::Mode(&f.agent),
            };
            let outcome = run_episode(&mut backend, traj, p, &ctx, &mut noise, &mut unused)?;
            let n = traj.n_joints();
            let steps = outcome.steps.len() as f64;
            let joint_abs_error = (0..n)
                .map(|j| outcome.steps.iter().map(|s| (s.q_o[j] - s.q_r[j]).abs()).sum::<f64>() / steps)
                .collect();
            Ok((
                TrajectoryEval {
                    trajectory_id: traj.id.clone(),
                    joint_abs_error,
                    e_q: outcome.summary.mean_e_q,
                    e_v: outcome.summary.mean_e_v,
                    ee_error: outcome.summary.mean_ee_error,
                    mean_reward: outcome.summary.mean_reward,
                },
                if i == 0 { outcome.steps } else { vec![] },
            ))
        })
        .collect::<Result<_>>()?;

    let tag = tag.map_or_else(|| eval_tag(policy, payload), str::to_string);
    let overlay = &results[0].1;
    let per: Vec<TrajectoryEval> = results.iter().map(|(e, _)| e.clone()).collect();
    let n = cfg.n_joints();
    let report = EvalReport {
        joint_abs_error: (0..n)
            .map(|j| MeanStd::of(per.iter().map(|e| e.joint_abs_error[j])))
            .collect(),
        e_q: MeanStd::of(per.iter().map(|e| e.e_q)),
        e_v: MeanStd::of(per.iter().map(|e| e.e_v)),
        ee_error: MeanStd::of(per.iter().map(|e| e.ee_error)),
        mean_reward: per.iter().map(|e| e.mean_reward).sum::<f64>() / per.len() as f64,
        per_trajectory: per,
        payload,
        tag,
    };
    fs::create_dir_all(out)?;
    write_eval_files(out, &report)?;
    write_overlay(&out.join(format!("overlay_{}.csv", report.tag)), overlay, cfg.dt)?;
    Ok(report)
}

fn write_eval_files(out: &Path, r: &EvalReport) -> Result<()> {
    let n = r.joint_abs_error.len();
    let mut w = csv::Writer::from_writer(create(&out.join(format!("eval_{}.csv", r.tag)))?);
    let mut header = vec!["trajectory_id".to_string()];
    header.extend((0..n).map(|j| format!("abs_err_q{j}")));
    header.extend(["e_q", "e_v", "ee_error", "mean_reward"].map(String::from));
    w.write_record(&header)?;
    for e in &r.per_trajectory {
        let mut row = vec![e.trajectory_id.clone()];
        row.extend(e.joint_abs_error.iter().map(|x| fmt_f64(*x)));
        row.extend([e.e_q, e.e_v, e.ee_error, e.mean_reward].map(fmt_f64));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&out.join(format!("eval_{}_summary.csv", r.tag)))?);
    w.write_record(["tag", "payload", "metric", "mean", "std"])?;
    let mut put = |metric: String, m: &MeanStd| {
        w.write_record([
            r.tag.clone(),
            fmt_f64(r.payload),
            metric,
            fmt_f64(m.mean),
            fmt_f64(m.std),
        ])
    };
    for (j, m) in r.joint_abs_error.iter().enumerate() {
        put(format!("abs_err_q{j}"), m)?;
    }
    put("e_q".into(), &r.e_q)?;
    put("e_v".into(), &r.e_v)?;
    put("ee_error".into(), &r.ee_error)?;
    put(
        "mean_reward".into(),
        &MeanStd {
            mean: r.mean_reward,
            std: 0.0,
        },
    )?;
    w.flush()?;
    Ok(())
}

fn write_overlay(path: &Path, steps: &[StepRecord], dt: f64) -> Result<()> {
    let n = steps.first().map_or(0, |s| s.q_r.len());
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["t".to_string()];
    for j in 0..n {
        header.extend([format!("q_r{j}"), format!("q_f{j}"), format!("q_o{j}")]);
    }
    w.write_record(&header)?;
    for s in steps {
        let mut row = vec![fmt_f64(s.index as f64 * dt)];
        for j in 0..n {
            row.extend([s.q_r[j], s.q_f[j], s.q_o[j]].map(fmt_f64));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

// Report.

/// Mean with a normal-approximation 95% interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl MeanCi {
    /// `mean ± 1.96 · s / √n` with the sample standard deviation; zero width
    /// for a single value.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let half = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            lo: mean - half,
            hi: mean + half,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReportSummary {
    pub runs: Vec<PathBuf>,
    pub episodes: usize,
    pub eval_files: usize,
}

/// Directories under `dir` (including itself) that hold a training log.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut runs = vec![];
    if dir.join(TRAIN_LOG).exists() {
        runs.push(dir.to_path_buf());
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| missing(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join(TRAIN_LOG).exists())
        .collect();
    subdirs.sort();
    runs.extend(subdirs);
    Ok(runs)
}

type Metric = (&'static str, fn(&EpisodeLog) -> f64);

/// Aggregates training logs across the runs under `dir` (one per seed) and
/// collects their evaluation summaries into `dir/report/`.
pub fn report(dir: &Path) -> Result<ReportSummary> {
    let runs = find_runs(dir)?;
    if runs.is_empty() {
        return Err(missing(&dir.join(TRAIN_LOG), "no training logs under this directory"));
    }
    let logs: Vec<Vec<EpisodeLog>> = runs
        .iter()
        .map(|r| read_log(&r.join(TRAIN_LOG)))
        .collect::<Result<_>>()?;
    let episodes = logs.iter().map(Vec::len).min().unwrap_or(0);
    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out)?;

    let mut w = csv::Writer::from_writer(create(&out.join("training_aggregate.csv"))?);
    let metrics: [Metric; 4] = [
        ("reward", |l| l.mean_reward),
        ("e_q", |l| l.mean_e_q),
        ("e_v", |l| l.mean_e_v),
        ("ee_error", |l| l.mean_ee_error),
    ];
    let mut header = vec!["episode".to_string(), "runs".to_string()];
    for (name, _) in &metrics {
        header.extend([format!("{name}_mean"), format!("{name}_ci_lo"), format!("{name}_ci_hi")]);
    }
    w.write_record(&header)?;
    for e in 0..episodes {
        let mut row = vec![e.to_string(), runs.len().to_string()];
        for (_, get) in &metrics {
            let xs: Vec<f64> = logs.iter().map(|l| get(&l[e])).collect();
            let ci = MeanCi::of(&xs);
            row.extend([ci.mean, ci.lo, ci.hi].map(fmt_f64));
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut eval_files = 0;
    let mut w = csv::Writer::from_writer(create(&out.join("eval_table.csv"))?);
    w.write_record(["run", "tag", "payload", "metric", "mean", "std"])?;
    for run in &runs {
        let mut files: Vec<PathBuf> = fs::read_dir(run)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("eval_") && n.ends_with("_summary.csv"))
            })
            .collect();
        files.sort();
        for f in files {
            eval_files += 1;
            let mut rdr = csv::Reader::from_reader(open_input(&f)?);
            for rec in rdr.records() {
                let rec = rec?;
                let mut row = vec![run.display().to_string()];
                row.extend(rec.iter().map(str::to_string));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(ReportSummary {
        runs,
        episodes,
        eval_files,
    })
}
