//! The two-timescale loop: fast weights evolve within an episode, static
//! parameters (including the plasticity rates) are optimised across
//! episodes on the masked task loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{RunConfig, TaskKind, TrainConfig};
use crate::diagnostics::{EpisodeLog, EpochSummary, EvalPoint, RunRecord, TraceRow, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::model::{Dropout, PlasticTransformer, StaticParams};
use crate::plasticity::{plastic_step, PlasticityTracePoint, StepMode};
use crate::tasks::{self, Episode, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: TaskKind,
    /// Mean masked task loss.
    pub loss: f64,
    /// The task's headline metric (see [`TaskKind::metric_name`]).
    pub metric: f64,
    pub mean_eta: f64,
    /// Mean over steps and plastic layers of `‖w_l‖_F`.
    pub mean_norm: f64,
    pub seed: u64,
    pub episodes: usize,
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &StaticParams) -> Self {
        let zeros = || params.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Global gradient norm over all tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Global-norm clipping followed by an AdamW update with decoupled weight
/// decay and bias correction. Returns the pre-clip gradient norm.
pub fn outer_step(params: &mut StaticParams, opt: &mut OptimState, grads: &[Tensor], cfg: &TrainConfig) -> Result<f64> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (g, name) in grads.iter().zip(&params.names) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    let norm = global_norm(grads);
    let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lr = cfg.learning_rate;
    for (i, p) in params.tensors.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = opt.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj * clip;
        }
        let v = opt.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            let gc = gj * clip;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gc * gc;
        }
        let (m, v) = (opt.m[i].data(), opt.v[i].data());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
            *pj -= lr * (update + cfg.weight_decay * *pj);
        }
    }
    if let Some(name) = params.first_non_finite() {
        return Err(Error::NonFinite(format!("parameter `{name}` after the outer step")));
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Tape everything and return gradients for every static parameter.
    Train,
    Eval,
}

/// What one episode produced.
#[derive(Clone, Debug)]
pub struct EpisodeRun {
    pub meta_loss: f64,
    /// Task metric on this episode.
    pub metric: f64,
    /// Gradients of the meta-loss, one per static parameter (train mode).
    pub grads: Option<Vec<Tensor>>,
    /// Prediction `y_t` for every step.
    pub outputs: Vec<Tensor>,
    pub trace: Vec<PlasticityTracePoint>,
}

impl EpisodeRun {
    pub fn mean_eta(&self) -> f64 {
        mean(self.trace.iter().map(|p| p.eta))
    }

    /// Mean over steps and layers of the fast-weight norms.
    pub fn mean_norm(&self) -> f64 {
        mean(self.trace.iter().flat_map(|p| p.norms.iter().copied()))
    }

    /// Per layer, the mean norm over steps.
    pub fn layer_norms(&self) -> Vec<f64> {
        let layers = self.trace.first().map_or(0, |p| p.norms.len());
        (0..layers).map(|l| mean(self.trace.iter().map(|p| p.norms[l]))).collect()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-step task loss: softmax cross-entropy against a one-hot target, or
/// squared error averaged over output channels.
fn step_loss(g: &mut Graph, task: TaskKind, y: Var, target: &Tensor) -> Result<Var> {
    if task.is_discrete() {
        let ls = g.log_softmax_rows(y)?;
        let t = g.constant(target.clone());
        let prod = g.mul(ls, t)?;
        let s = g.sum(prod)?;
        Ok(g.scale(s, -1.0)?)
    } else {
        let neg = target.map(|v| -v);
        let diff = g.add_const(y, &neg)?;
        let ss = g.sum_squares(diff)?;
        Ok(g.scale(ss, 1.0 / target.numel() as f64)?)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Masked loss and task metric from per-step predictions: argmax accuracy
/// for discrete tasks, mean squared error for continuous ones.
pub fn metrics(task: TaskKind, outputs: &[Tensor], episode: &Episode) -> Result<(f64, f64)> {
    if outputs.len() != episode.len() {
        return Err(Error::Contract(format!(
            "{} outputs for an episode of {} steps",
            outputs.len(),
            episode.len()
        )));
    }
    let masked: Vec<usize> = episode.masked_positions().collect();
    if masked.is_empty() {
        return Err(Error::Contract("episode has no scored positions".into()));
    }
    let n = masked.len() as f64;
    if task.is_discrete() {
        let mut loss = 0.0;
        let mut correct = 0usize;
        for &t in &masked {
            let y = outputs[t].data();
            let target = argmax(episode.targets[t].data());
            let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + y.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - y[target];
            if argmax(y) == target {
                correct += 1;
            }
        }
        Ok((loss / n, correct as f64 / n))
    } else {
        let mut se = 0.0;
        for &t in &masked {
            let y = outputs[t].data();
            let target = episode.targets[t].data();
            se += y.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
        }
        let mse = se / n;
        Ok((mse, mse))
    }
}

/// Options for one episode.
pub struct EpisodeOptions<'a> {
    pub mode: Mode,
    /// Dropout rate and its random stream (training only).
    pub dropout: Option<(f64, &'a mut ChaCha8Rng)>,
    /// Cut the fast-weight history from the outer gradient every this many
    /// steps; 0 disables truncation.
    pub truncate: usize,
    pub checked: bool,
    /// Run the plasticity-free architecture (no fast-weight buffers).
    pub ablated: bool,
}

impl EpisodeOptions<'_> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout: None,
            truncate: 0,
            checked: true,
            ablated: false,
        }
    }

    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            ..Self::eval()
        }
    }
}

/// Runs the inner loop over one episode: zero fast weights, then per step
/// forward → masked task loss → plastic update. The meta-loss is the mean
/// masked task loss; in train mode it is differentiated with respect to
/// every static parameter through the whole inner loop.
pub fn run_episode(model: &PlasticTransformer, episode: &Episode, mut opts: EpisodeOptions<'_>) -> Result<EpisodeRun> {
    let train = opts.mode == Mode::Train;
    let mut g = Graph::new();
    g.set_checked(opts.checked);
    let bound = model.bind(&mut g, train);
    let mut state = if opts.ablated {
        model.init_ablated_state()
    } else {
        model.init_fast_state(&mut g)
    };
    let step_mode = StepMode {
        train,
        inner_grad_mode: model.config.inner_grad_mode,
    };
    let masked = episode.masked_count();
    if masked == 0 {
        return Err(Error::Contract("episode has no scored positions".into()));
    }
    let mut total: Option<Var> = None;
    let mut outputs = Vec::with_capacity(episode.len());
    let mut trace = Vec::with_capacity(episode.len());
    let wrap = |e: Error, t: usize| match e {
        Error::Tensor(crate::tensor::TensorError::NonFinite { op }) => Error::NonFinite(format!(
            "`{op}` produced a non-finite value at step {t} of episode seed {}",
            episode.seed
        )),
        other => other,
    };
    for (t, x) in episode.inputs.iter().enumerate() {
        if opts.truncate > 0 && t > 0 && t % opts.truncate == 0 {
            for w in state.w.iter_mut().chain(state.b.iter_mut()) {
                *w = g.detach_leaf(*w);
            }
        }
        let dropout = match (&mut opts.dropout, train) {
            (Some((rate, rng)), true) => Some(Dropout { rate: *rate, rng: &mut **rng }),
            _ => None,
        };
        let out = model
            .forward_step(&mut g, &bound, &mut state, x, dropout)
            .map_err(|e| wrap(e, t))?;
        outputs.push(g.value(out.y).clone());
        if episode.loss_mask[t] {
            let l = step_loss(&mut g, episode.task, out.y, &episode.targets[t]).map_err(|e| wrap(e, t))?;
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        trace.push(plastic_step(&mut g, model, &bound, &mut state, &out, step_mode).map_err(|e| wrap(e, t))?);
    }
    let total = total.expect("at least one scored position");
    let loss = g.scale(total, 1.0 / masked as f64)?;
    let meta_loss = g.scalar(loss);
    if !meta_loss.is_finite() {
        return Err(Error::NonFinite(format!("meta-loss of episode seed {}", episode.seed)));
    }
    let grads = if train {
        Some(g.gradients(loss, &bound.vars)?)
    } else {
        None
    };
    let (_, metric) = metrics(episode.task, &outputs, episode)?;
    Ok(EpisodeRun {
        meta_loss,
        metric,
        grads,
        outputs,
        trace,
    })
}

/// Meta-loss only, with dropout off: the function finite differences probe.
pub fn meta_loss(model: &PlasticTransformer, episode: &Episode) -> Result<f64> {
    Ok(run_episode(model, episode, EpisodeOptions::eval())?.meta_loss)
}

/// Mean loss, metric, η and plastic norm over a set of episodes, dropout off.
pub fn evaluate(model: &PlasticTransformer, episodes: &[Episode], seed: u64, checked: bool) -> Result<EvalResult> {
    let mut loss = 0.0;
    let mut metric = 0.0;
    let mut eta = 0.0;
    let mut norm = 0.0;
    for ep in episodes {
        let run = run_episode(
            model,
            ep,
            EpisodeOptions {
                checked,
                ..EpisodeOptions::eval()
            },
        )?;
        loss += run.meta_loss;
        metric += run.metric;
        eta += run.mean_eta();
        norm += run.mean_norm();
    }
    let n = episodes.len().max(1) as f64;
    Ok(EvalResult {
        task: episodes.first().map_or(TaskKind::Copying, |e| e.task),
        loss: loss / n,
        metric: metric / n,
        mean_eta: eta / n,
        mean_norm: norm / n,
        seed,
        episodes: episodes.len(),
    })
}

/// Training set and validation set for a run.
pub fn datasets(cfg: &RunConfig) -> Result<(Vec<Episode>, Vec<Episode>)> {
    let train = tasks::dataset(cfg.task, &cfg.tasks, cfg.seed, Split::Train, cfg.tasks.train_size(cfg.task))?;
    let n_val = if cfg.task == TaskKind::Classification {
        cfg.tasks.classification.val_episodes
    } else {
        cfg.train.val_episodes
    };
    let val = tasks::dataset(cfg.task, &cfg.tasks, cfg.seed, Split::Validation, n_val)?;
    Ok((train, val))
}

pub struct TrainOutput {
    pub record: RunRecord,
    pub trace: Vec<TraceRow>,
    pub model: PlasticTransformer,
}

/// Trains one run to completion. Deterministic per configuration.
pub fn train(cfg: &RunConfig) -> Result<TrainOutput> {
    train_with(cfg, &mut |_, _| Ok(()))
}

/// As [`train`], calling `progress` with the partial record after every
/// validation so callers can persist it; the record is also passed on
/// abort, marked incomplete, before the error is returned.
pub fn train_with(cfg: &RunConfig, progress: &mut dyn FnMut(&RunRecord, &[TraceRow]) -> Result<()>) -> Result<TrainOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = PlasticTransformer::new(cfg.model.clone(), cfg.seed)?;
    let (train_set, val_set) = datasets(cfg)?;
    let tc = &cfg.train;
    let mut opt = OptimState::new(&model.params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(3);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut record = RunRecord {
        schema_version: SCHEMA_VERSION,
        task: cfg.task,
        rule: cfg.model.rule,
        seed: cfg.seed,
        config: cfg.to_json_value(),
        config_hash: cfg.hash(),
        parameter_count: model.parameter_count(),
        evals: Vec::new(),
        epochs: Vec::new(),
        episodes: Vec::new(),
        summary: None,
        completed: false,
        wall_clock_seconds: 0.0,
    };
    let mut trace = Vec::new();
    let result = (|| -> Result<()> {
        let mut seen = 0usize;
        let mut pending: Option<Vec<Tensor>> = None;
        let mut pending_count = 0usize;
        for epoch in 1..=tc.epochs {
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            order.shuffle(&mut order_rng);
            let mut epoch_loss = 0.0;
            let mut epoch_eta = 0.0;
            let mut epoch_norm = 0.0;
            for k in 0..tc.episodes_per_epoch {
                let ep = &train_set[order[k % order.len()]];
                let run = run_episode(
                    &model,
                    ep,
                    EpisodeOptions {
                        mode: Mode::Train,
                        dropout: Some((cfg.model.dropout, &mut dropout_rng)),
                        truncate: tc.truncate,
                        checked: tc.checked,
                        ablated: false,
                    },
                )?;
                let grads = run.grads.as_ref().expect("train mode returns gradients");
                match pending.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            a.add_assign(g)?;
                        }
                    }
                    None => pending = Some(grads.clone()),
                }
                pending_count += 1;
                if pending_count == tc.accumulate {
                    let mut acc = pending.take().expect("accumulated gradients");
                    if pending_count > 1 {
                        let s = 1.0 / pending_count as f64;
                        for a in acc.iter_mut() {
                            *a = a.map(|v| v * s);
                        }
                    }
                    outer_step(&mut model.params, &mut opt, &acc, tc)?;
                    pending_count = 0;
                }
                for p in run.trace.iter().filter(|p| p.t % tc.trace_every == 0) {
                    trace.push(TraceRow {
                        epoch,
                        episode: seen,
                        t: p.t,
                        eta: p.eta,
                        delta_norm: p.delta_norm,
                        norms: p.norms.clone(),
                    });
                }
                record.episodes.push(EpisodeLog {
                    epoch,
                    index: seen,
                    episode_seed: ep.seed,
                    meta_loss: run.meta_loss,
                    mean_eta: run.mean_eta(),
                    layer_norms: run.layer_norms(),
                });
                epoch_loss += run.meta_loss;
                epoch_eta += run.mean_eta();
                epoch_norm += run.mean_norm();
                seen += 1;
                let last = k + 1 == tc.episodes_per_epoch;
                if last || (tc.val_every > 0 && seen.is_multiple_of(tc.val_every)) {
                    let result = evaluate(&model, &val_set, cfg.seed, tc.checked)?;
                    record.evals.push(EvalPoint {
                        epoch,
                        episodes_seen: seen,
                        end_of_epoch: last,
                        result: result.clone(),
                    });
                    record.summary = Some(result);
                    record.wall_clock_seconds = start.elapsed().as_secs_f64();
                    progress(&record, &trace)?;
                }
            }
            let n = tc.episodes_per_epoch as f64;
            record.epochs.push(EpochSummary {
                epoch,
                train_loss: epoch_loss / n,
                mean_eta: epoch_eta / n,
                mean_norm: epoch_norm / n,
                validation: record.summary.clone().expect("validated at end of epoch"),
            });
        }
        Ok(())
    })();
    record.wall_clock_seconds = start.elapsed().as_secs_f64();
    if let Err(e) = result {
        progress(&record, &trace)?;
        return Err(e);
    }
    record.completed = true;
    Ok(TrainOutput { record, trace, model })
}
