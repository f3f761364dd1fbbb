//! Learned one-step dynamics of the controlled plant, used as a cheap
//! simulator for policy pretraining.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arm::ObservedPoint;
use crate::env::{run_episode, Backend, MdpContext, Policy, Purpose};
use crate::error::{check_dim, Error, Result};
use crate::mdp::ErrorRecord;
use crate::nn::{adam_step, Activation, AdamState, Checkpoint, Mlp};
use crate::trajectory::{fmt_f64, ReferenceTrajectory};

/// One supervised pair recorded under baseline control:
/// `[q_o(t), q̇_o(t), q_r(t+1), q̇_r(t+1)] → [q_o(t+1), q̇_o(t+1)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynSample {
    pub trajectory_id: String,
    pub step: usize,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// Output of a baseline collection campaign.
#[derive(Clone, Debug, Default)]
pub struct CollectedData {
    pub samples: Vec<DynSample>,
    pub errors: Vec<ErrorRecord>,
}

/// Keeps collection noise apart from the training episodes of the same seed.
pub const COLLECT_STREAM_OFFSET: u64 = 1 << 33;

/// Runs the baseline controller alone over `corpus`.
pub fn collect_dataset<B: Backend>(
    backend: &mut B,
    corpus: &[ReferenceTrajectory],
    ctx: &MdpContext,
    seed: u64,
) -> Result<CollectedData> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("collection corpus"));
    }
    let mut data = CollectedData::default();
    for (i, traj) in corpus.iter().enumerate() {
        let stream = i as u64 + COLLECT_STREAM_OFFSET;
        let mut noise = crate::env::stream_rng(seed, Purpose::Noise, stream);
        let mut unused = crate::env::stream_rng(seed, Purpose::Policy, stream);
        let out = run_episode(backend, traj, Policy::Baseline, ctx, &mut noise, &mut unused)?;
        for s in out.steps {
            let mut input = s.q_o_prev;
            input.extend_from_slice(&s.qd_o_prev);
            input.extend_from_slice(&s.q_f);
            input.extend_from_slice(&s.qd_f);
            data.errors.push(ErrorRecord {
                dq: s.q_o.iter().zip(&s.q_r).map(|(o, r)| o - r).collect(),
                dqd: s.qd_o.iter().zip(&s.qd_r).map(|(o, r)| o - r).collect(),
            });
            let mut target = s.q_o;
            target.extend_from_slice(&s.qd_o);
            data.samples.push(DynSample {
                trajectory_id: traj.id.clone(),
                step: s.index - 1,
                input,
                target,
            });
        }
    }
    Ok(data)
}

/// Writes `trajectory_id,step,in_0..,out_0..`.
pub fn write_dataset_csv<W: Write>(writer: W, samples: &[DynSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let (ni, no) = samples.first().map_or((0, 0), |s| (s.input.len(), s.target.len()));
    let mut header = vec!["trajectory_id".to_string(), "step".to_string()];
    header.extend((0..ni).map(|i| format!("in_{i}")));
    header.extend((0..no).map(|i| format!("out_{i}")));
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![s.trajectory_id.clone(), s.step.to_string()];
        row.extend(s.input.iter().chain(&s.target).map(|x| fmt_f64(*x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: Read>(reader: R) -> Result<Vec<DynSample>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let ni = header.iter().filter(|h| h.starts_with("in_")).count();
    let no = header.iter().filter(|h| h.starts_with("out_")).count();
    if header.len() != 2 + ni + no || ni != 2 * no || no == 0 {
        return Err(Error::Format(
            "dataset header must be trajectory_id,step,in_*,out_*".into(),
        ));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad number {:?} in dataset", &rec[i])))
        };
        out.push(DynSample {
            trajectory_id: rec[0].to_string(),
            step: rec[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad step {:?}", &rec[1])))?,
            input: (2..2 + ni).map(num).collect::<Result<_>>()?,
            target: (2 + ni..2 + ni + no).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

/// Per-dimension affine normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    const STD_FLOOR: f64 = 1e-8;

    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> Self {
        let count = rows.clone().count().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; dim];
        for r in rows {
            for i in 0..dim {
                var[i] += (r[i] - mean[i]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / count).sqrt().max(Self::STD_FLOOR))
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(x.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s));
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((y, m), s)| y * s + m)
            .collect()
    }
}

/// One-step model: the network predicts the normalized change of the
/// observation over one outer step.
#[derive(Clone, Debug, PartialEq)]
pub struct DynModel {
    pub net: Mlp,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
}

impl DynModel {
    pub fn n_joints(&self) -> usize {
        self.net.output_dim() / 2
    }

    /// Predicts `p_o(t+1)` from `p_o(t)` and the command sent for `t+1`.
    pub fn predict(&self, current: &ObservedPoint, command_q: &[f64], command_qd: &[f64]) -> Result<ObservedPoint> {
        let n = self.n_joints();
        check_dim("dynamics model observation", n, current.q.len())?;
        check_dim("dynamics model command", n, command_q.len())?;
        let mut raw = Vec::with_capacity(4 * n);
        raw.extend_from_slice(&current.q);
        raw.extend_from_slice(&current.qd);
        raw.extend_from_slice(command_q);
        raw.extend_from_slice(command_qd);
        let mut x = Vec::with_capacity(4 * n);
        self.input_norm.apply(&raw, &mut x);
        let y = self.net.predict_batch(&x, 1)?;
        let delta = self.output_norm.invert(&y);
        Ok(ObservedPoint {
            q: (0..n).map(|j| current.q[j] + delta[j]).collect(),
            qd: (0..n).map(|j| current.qd[j] + delta[n + j]).collect(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            networks: vec![self.net.clone()],
            vectors: vec![
                self.input_norm.mean.clone(),
                self.input_norm.std.clone(),
                self.output_norm.mean.clone(),
                self.output_norm.std.clone(),
            ],
            counters: vec![],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = || Error::Checkpoint("dynamics model: expected one network and four vectors".into());
        if ck.networks.len() != 1 || ck.vectors.len() != 4 {
            return Err(bad());
        }
        let net = ck.networks[0].clone();
        let (ni, no) = (net.input_dim(), net.output_dim());
        if ni != 2 * no || ck.vectors[0].len() != ni || ck.vectors[1].len() != ni {
            return Err(bad());
        }
        if ck.vectors[2].len() != no || ck.vectors[3].len() != no {
            return Err(bad());
        }
        Ok(Self {
            net,
            input_norm: Normalizer {
                mean: ck.vectors[0].clone(),
                std: ck.vectors[1].clone(),
            },
            output_norm: Normalizer {
                mean: ck.vectors[2].clone(),
                std: ck.vectors[3].clone(),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynTrainConfig {
    pub lr: f64,
    pub minibatch: usize,
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    /// Stop when the loss improved by less than `rel_tol` (relative) over
    /// the last `window` epochs.
    pub window: usize,
    pub rel_tol: f64,
}

impl Default for DynTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            minibatch: 64,
            hidden: vec![64, 32],
            max_epochs: 400,
            window: 20,
            rel_tol: 1e-4,
        }
    }
}

impl DynTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.minibatch == 0 || self.window == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidParameter(
                "dynamics training needs lr > 0, minibatch >= 1, window >= 1 and positive widths".into(),
            ));
        }
        Ok(())
    }
}

/// Normalized design matrices of a dataset.
struct Design {
    x: Vec<f64>,
    y: Vec<f64>,
    ni: usize,
    no: usize,
}

impl Design {
    fn rows(&self) -> usize {
        self.y.len() / self.no
    }

    fn mse(&self, net: &Mlp) -> Result<f64> {
        let pred = net.predict_batch(&self.x, self.rows())?;
        Ok(pred.iter().zip(&self.y).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / self.y.len() as f64)
    }
}

fn residuals(samples: &[DynSample], no: usize) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| (0..no).map(|i| s.target[i] - s.input[i]).collect())
        .collect()
}

/// Fits a [`DynModel`] by minibatch Adam on the mean squared error of the
/// normalized targets. Returns the model and the full-dataset loss after
/// every epoch, entry 0 being the loss before training.
pub fn train_dynamics<R: Rng + ?Sized>(
    samples: &[DynSample],
    config: &DynTrainConfig,
    init_rng: &mut R,
    shuffle_rng: &mut R,
) -> Result<(DynModel, Vec<f64>)> {
    config.validate()?;
    let first = samples.first().ok_or(Error::EmptyDataset("dynamics dataset"))?;
    if samples.len() < config.minibatch {
        return Err(Error::InsufficientData {
            available: samples.len(),
            requested: config.minibatch,
        });
    }
    let (ni, no) = (first.input.len(), first.target.len());
    if ni != 2 * no {
        return Err(Error::InvalidParameter(
            "dynamics samples need 4N inputs and 2N targets".into(),
        ));
    }
    for s in samples {
        check_dim("dynamics sample input", ni, s.input.len())?;
        check_dim("dynamics sample target", no, s.target.len())?;
    }
    let deltas = residuals(samples, no);
    let input_norm = Normalizer::fit(samples.iter().map(|s| s.input.as_slice()), ni);
    let output_norm = Normalizer::fit(deltas.iter().map(Vec::as_slice), no);
    let mut design = Design {
        x: Vec::with_capacity(samples.len() * ni),
        y: Vec::with_capacity(samples.len() * no),
        ni,
        no,
    };
    for (s, d) in samples.iter().zip(&deltas) {
        input_norm.apply(&s.input, &mut design.x);
        output_norm.apply(d, &mut design.y);
    }

    let mut sizes = vec![ni];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(no);
    let mut net = Mlp::new(&sizes, Activation::Tanh, Activation::Linear, init_rng);
    let last = net.layers.last_mut().unwrap();
    last.weights.iter_mut().for_each(|w| *w = 0.0);
    let mut adam = AdamState::for_mlp(&net);

    let mut history = vec![design.mse(&net)?];
    let mut order: Vec<usize> = (0..design.rows()).collect();
    let mut bx = Vec::with_capacity(config.minibatch * ni);
    let mut by = Vec::with_capacity(config.minibatch * no);
    for _epoch in 0..config.max_epochs {
        order.shuffle(shuffle_rng);
        for chunk in order.chunks(config.minibatch) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(&design.x[i * ni..(i + 1) * ni]);
                by.extend_from_slice(&design.y[i * no..(i + 1) * no]);
            }
            let cache = net.forward_batch(&bx, chunk.len())?;
            let scale = 2.0 / by.len() as f64;
            let grad: Vec<f64> = cache.output().iter().zip(&by).map(|(p, y)| scale * (p - y)).collect();
            let (g, _) = net.backward(&cache, &grad, false)?;
            adam_step(&mut net, &g, &mut adam, config.lr)?;
        }
        let loss = design.mse(&net)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("dynamics training loss"));
        }
        history.push(loss);
        let e = history.len() - 1;
        if e >= config.window {
            let old = history[e - config.window];
            if (old - loss) / old < config.rel_tol {
                break;
            }
        }
    }
    debug_assert_eq!(design.ni, ni);
    Ok((
        DynModel {
            net,
            input_norm,
            output_norm,
        },
        history,
    ))
}

/// Mean squared error of normalized residual predictions on `samples`.
pub fn evaluate_dynamics(model: &DynModel, samples: &[DynSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("dynamics evaluation set"));
    }
    let no = model.net.output_dim();
    let ni = model.net.input_dim();
    let deltas = residuals(samples, no);
    let mut x = Vec::with_capacity(samples.len() * ni);
    let mut y = Vec::with_capacity(samples.len() * no);
    for (s, d) in samples.iter().zip(&deltas) {
        check_dim("dynamics sample input", ni, s.input.len())?;
        model.input_norm.apply(&s.input, &mut x);
        model.output_norm.apply(d, &mut y);
    }
    let design = Design { x, y, ni, no };
    design.mse(&model.net)
}
