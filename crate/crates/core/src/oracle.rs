//! Independent reference computations.
//!
//! The recursion oracle and the gate fuzzer redo their arithmetic with plain
//! scalar loops over `f64` slices; the tensor and tape routines are used only
//! to run the engine being checked and to read its recorded signals. The
//! finite-difference checks treat the engine as a black-box function.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::{CopyingConfig, InnerGradMode, ModelConfig, Rule, RunConfig, TaskKind};
use crate::diagnostics::write_atomic;
use crate::error::{Error, Result};
use crate::gradcheck::central_differences;
use crate::meta_train::{run_episode, EpisodeOptions};
use crate::model::PlasticTransformer;
use crate::plasticity::{self, plastic_step, StepMode};
use crate::tasks::{self, Episode};
use crate::tensor::Tensor;

/// Largest width any dimension of a model may have for the recursion and
/// outer finite-difference oracles.
pub const TINY_BOUND: usize = 4;
/// Exact-arithmetic recursions.
pub const RECURSION_TOLERANCE: f64 = 1e-10;
/// Gradient checks of a single differentiation level.
pub const FIRST_ORDER_TOLERANCE: f64 = 1e-6;
/// Gradients through Hebbian updates.
pub const HEBBIAN_OUTER_TOLERANCE: f64 = 1e-4;
/// Gradients through the whole inner loop of the gradient rule.
pub const SECOND_ORDER_TOLERANCE: f64 = 1e-3;
/// Magnitudes below this are compared absolutely rather than relatively in
/// the outer finite-difference check; central differences cannot resolve
/// relative accuracy on gradients this small.
pub const RELATIVE_FLOOR: f64 = 1e-4;
/// Step of the central differences.
pub const FD_EPSILON: f64 = 1e-5;

/// Outcome of one oracle check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub check: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seed: u64,
    /// Deviation is expected and reported for contrast only; never fails.
    pub informational: bool,
    pub detail: String,
}

impl OracleReport {
    pub fn new(check: impl Into<String>, max_deviation: f64, tolerance: f64, seed: u64) -> Self {
        Self {
            check: check.into(),
            max_deviation,
            tolerance,
            // NaN deviations fail
            pass: max_deviation <= tolerance,
            seed,
            informational: false,
            detail: String::new(),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn informational(mut self) -> Self {
        self.informational = true;
        self
    }

    /// A failing, non-informational check.
    pub fn is_hard_failure(&self) -> bool {
        !self.pass && !self.informational
    }

    pub fn summary_line(&self) -> String {
        let status = match (self.pass, self.informational) {
            (true, _) => "PASS",
            (false, true) => "INFO",
            (false, false) => "FAIL",
        };
        let mut line = format!(
            "{status} {}: max deviation {:.3e} (tolerance {:.0e}, seed {})",
            self.check, self.max_deviation, self.tolerance, self.seed
        );
        if !self.detail.is_empty() {
            line.push_str(" — ");
            line.push_str(&self.detail);
        }
        line
    }
}

/// Writes each report to `<dir>/oracle/<check>.json`; returns the paths.
pub fn write_reports(dir: &Path, reports: &[OracleReport]) -> Result<Vec<PathBuf>> {
    let root = dir.join("oracle");
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut paths = Vec::with_capacity(reports.len());
    for r in reports {
        let name: String = r
            .check
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let path = root.join(format!("{name}.json"));
        let mut text = serde_json::to_string_pretty(r)?;
        text.push('\n');
        write_atomic(&path, &text)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Refuses models too wide for the scalar-loop oracles.
pub fn check_tiny(cfg: &ModelConfig) -> Result<()> {
    let dims = [
        ("d_model", cfg.d_model),
        ("d_ff", cfg.d_ff),
        ("input_dim", cfg.input_dim),
        ("output_dim", cfg.output_dim),
        ("aux_dim", cfg.aux_dim),
    ];
    for (name, v) in dims {
        if v > TINY_BOUND {
            return Err(Error::Oracle(format!(
                "{name} = {v} exceeds the tiny-model bound of {TINY_BOUND}"
            )));
        }
    }
    Ok(())
}

// ── fast-weight recursion ───────────────────────────────────────────────

/// What the engine exposed at one step, before its update: activations
/// around each plastic layer, the gate logit and, for the gradient rule,
/// the inner gradients. Matrices are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSignals {
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub eta_logit: f64,
    pub grad_w: Vec<Vec<f64>>,
    pub grad_b: Vec<Vec<f64>>,
}

/// Fast weights of every plastic layer after one step, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FastSnapshot {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

/// Constants of the recursion, copied out of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct RecursionParams {
    pub rule: Rule,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub eta0: f64,
    pub max_norm: f64,
}

impl RecursionParams {
    pub fn from_model(model: &PlasticTransformer) -> Self {
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        for (a, b) in model.rate_indices() {
            alpha.push(model.params.tensors[a].data().to_vec());
            if let Some(b) = b {
                beta.push(model.params.tensors[b].data().to_vec());
            }
        }
        Self {
            rule: model.config.rule,
            alpha,
            beta,
            eta0: model.config.eta0,
            max_norm: model.config.max_norm,
        }
    }
}

/// The engine's per-step signals and fast-weight snapshots for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineRecording {
    pub signals: Vec<StepSignals>,
    pub snapshots: Vec<FastSnapshot>,
}

/// Runs `episode` through the engine (dropout off) and records what the
/// recursion oracle consumes alongside the engine's own fast weights.
pub fn record_engine(model: &PlasticTransformer, episode: &Episode) -> Result<EngineRecording> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let mut state = model.init_fast_state(&mut g);
    let mode = StepMode {
        train: false,
        inner_grad_mode: model.config.inner_grad_mode,
    };
    let mut signals = Vec::with_capacity(episode.len());
    let mut snapshots = Vec::with_capacity(episode.len());
    for x in &episode.inputs {
        let out = model.forward_step(&mut g, &bound, &mut state, x, None)?;
        let flat = |g: &Graph, vs: &[crate::autodiff::Var]| -> Vec<Vec<f64>> {
            vs.iter().map(|&v| g.value(v).data().to_vec()).collect()
        };
        let (grad_w, grad_b) = if model.config.rule == Rule::Gradient {
            let (gw, gb) = plasticity::inner_gradients(&mut g, model, &bound, &state, &out, false)?;
            (flat(&g, &gw), flat(&g, &gb))
        } else {
            (Vec::new(), Vec::new())
        };
        signals.push(StepSignals {
            p: flat(&g, &out.p),
            q: flat(&g, &out.q),
            eta_logit: g.scalar(out.eta_logit),
            grad_w,
            grad_b,
        });
        plastic_step(&mut g, model, &bound, &mut state, &out, mode)?;
        snapshots.push(FastSnapshot {
            w: flat(&g, &state.w),
            b: flat(&g, &state.b),
        });
    }
    Ok(EngineRecording { signals, snapshots })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sum_of_squares(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in v {
        s += x * x;
    }
    s
}

fn scalar_gate(logit: f64, norm: f64, eta0: f64, max_norm: f64) -> f64 {
    let mut eta = eta0 * sigmoid(logit);
    if norm > max_norm {
        eta *= max_norm / norm;
    }
    eta
}

/// Recomputes the fast-weight recursion
/// `w(t) = (1 − η(t))·w(t−1) + η(t)·α ⊙ Δw(t)` from zero with scalar loops,
/// taking `Δw` as `p qᵀ` (Hebbian) or the recorded inner gradients
/// (gradient rule, which also updates the biases with `β`).
pub fn fastweight_recursion_oracle(params: &RecursionParams, signals: &[StepSignals]) -> Result<Vec<FastSnapshot>> {
    if params.rule == Rule::None {
        return Ok(signals
            .iter()
            .map(|_| FastSnapshot {
                w: Vec::new(),
                b: Vec::new(),
            })
            .collect());
    }
    let slots = params.alpha.len();
    for a in &params.alpha {
        if a.len() > TINY_BOUND * TINY_BOUND {
            return Err(Error::Oracle(format!(
                "plastic matrix of {} entries exceeds the tiny-model bound",
                a.len()
            )));
        }
    }
    let mut w: Vec<Vec<f64>> = params.alpha.iter().map(|a| vec![0.0; a.len()]).collect();
    let mut b: Vec<Vec<f64>> = match params.rule {
        Rule::Gradient => params.beta.iter().map(|x| vec![0.0; x.len()]).collect(),
        _ => vec![Vec::new(); slots],
    };
    let mut out = Vec::with_capacity(signals.len());
    for (t, s) in signals.iter().enumerate() {
        let (inc_w, inc_b): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match params.rule {
            Rule::Hebbian => {
                if s.p.len() != slots || s.q.len() != slots {
                    return Err(Error::Oracle(format!("step {t}: activations missing for some plastic layer")));
                }
                let mut incs = Vec::with_capacity(slots);
                for l in 0..slots {
                    let (p, q) = (&s.p[l], &s.q[l]);
                    if p.len() * q.len() != w[l].len() {
                        return Err(Error::Oracle(format!("step {t}: activation widths do not match layer {l}")));
                    }
                    let mut inc = vec![0.0; p.len() * q.len()];
                    for i in 0..p.len() {
                        for j in 0..q.len() {
                            inc[i * q.len() + j] = p[i] * q[j];
                        }
                    }
                    incs.push(inc);
                }
                (incs, vec![Vec::new(); slots])
            }
            Rule::Gradient => {
                if s.grad_w.len() != slots || s.grad_b.len() != slots {
                    return Err(Error::Oracle(format!("step {t}: inner gradients missing for some plastic layer")));
                }
                (s.grad_w.clone(), s.grad_b.clone())
            }
            Rule::None => unreachable!("handled above"),
        };
        let mut sq = 0.0;
        for v in inc_w.iter().chain(&inc_b) {
            sq += sum_of_squares(v);
        }
        let eta = scalar_gate(s.eta_logit, sq.sqrt(), params.eta0, params.max_norm);
        for l in 0..slots {
            for i in 0..w[l].len() {
                w[l][i] = (1.0 - eta) * w[l][i] + eta * (params.alpha[l][i] * inc_w[l][i]);
            }
            if params.rule == Rule::Gradient {
                for i in 0..b[l].len() {
                    b[l][i] = (1.0 - eta) * b[l][i] + eta * (params.beta[l][i] * inc_b[l][i]);
                }
            }
        }
        out.push(FastSnapshot {
            w: w.clone(),
            b: b.clone(),
        });
    }
    Ok(out)
}

fn max_abs_deviation(a: &[FastSnapshot], b: &[FastSnapshot], with_bias: bool) -> f64 {
    let mut dev = if a.len() == b.len() { 0.0 } else { f64::INFINITY };
    for (x, y) in a.iter().zip(b) {
        let mut pairs: Vec<(&Vec<f64>, &Vec<f64>)> = x.w.iter().zip(&y.w).collect();
        if with_bias {
            pairs.extend(x.b.iter().zip(&y.b));
        }
        for (u, v) in pairs {
            if u.len() != v.len() {
                return f64::INFINITY;
            }
            for (p, q) in u.iter().zip(v) {
                let d = (p - q).abs();
                if d.is_nan() {
                    return f64::NAN;
                }
                dev = f64::max(dev, d);
            }
        }
    }
    dev
}

/// Engine fast weights versus the scalar-loop recursion on one episode.
pub fn check_recursion(model: &PlasticTransformer, episode: &Episode, seed: u64) -> Result<OracleReport> {
    check_tiny(&model.config)?;
    let rec = record_engine(model, episode)?;
    let oracle = fastweight_recursion_oracle(&RecursionParams::from_model(model), &rec.signals)?;
    let with_bias = model.config.rule == Rule::Gradient;
    let dev = max_abs_deviation(&rec.snapshots, &oracle, with_bias);
    Ok(OracleReport::new(
        format!("recursion_{}", model.config.rule),
        dev,
        RECURSION_TOLERANCE,
        seed,
    )
    .with_detail(format!("{} steps", episode.len())))
}

// ── gradients ───────────────────────────────────────────────────────────

/// `|a − n| / max(|a| + |n|, floor)`
pub fn floored_relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Inner gradients `∂L/∂w_l`, `∂L/∂b_l` of the internal loss at the last
/// of `inputs`, with every plastic layer held at `fast[l] = (w_l, b_l)`,
/// versus central differences of the same loss.
pub fn check_inner_gradients(
    model: &PlasticTransformer,
    inputs: &[Tensor],
    fast: &[(Tensor, Tensor)],
    eps: f64,
    seed: u64,
) -> Result<OracleReport> {
    if model.config.rule != Rule::Gradient {
        return Err(Error::Contract("inner gradients exist only for the gradient rule".into()));
    }
    let loss_at = |fast: &[Tensor], leaves: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let mut s = model.init_fast_state(&mut g);
        if s.w.len() * 2 != fast.len() {
            return Err(Error::Contract(format!(
                "{} fast tensors for {} plastic layers",
                fast.len(),
                s.w.len()
            )));
        }
        let mut last = None;
        for x in inputs {
            for l in 0..s.w.len() {
                let (w, b) = (fast[2 * l].clone(), fast[2 * l + 1].clone());
                s.w[l] = if leaves { g.leaf(w) } else { g.constant(w) };
                s.b[l] = if leaves { g.leaf(b) } else { g.constant(b) };
            }
            last = Some(model.forward_step(&mut g, &bound, &mut s, x, None)?);
        }
        let out = last.ok_or_else(|| Error::Contract("no inputs".into()))?;
        if !leaves {
            let l = plasticity::internal_loss_taped(&mut g, model, &bound, &out)?;
            return Ok((g.scalar(l), Vec::new()));
        }
        let (gw, gb) = plasticity::inner_gradients(&mut g, model, &bound, &s, &out, false)?;
        let mut grads = Vec::new();
        for (w, b) in gw.iter().zip(&gb) {
            grads.push(g.value(*w).clone());
            grads.push(g.value(*b).clone());
        }
        Ok((0.0, grads))
    };
    let flat: Vec<Tensor> = fast.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect();
    let (_, analytic) = loss_at(&flat, true)?;
    let numeric = central_differences(|p| Ok(loss_at(p, false)?.0), &flat, eps)?;
    let mut dev: f64 = 0.0;
    let mut worst = String::new();
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let e = floored_relative_error(x, y, RELATIVE_FLOOR);
            if e > dev || e.is_nan() {
                dev = e;
                let which = if k % 2 == 0 { "w" } else { "b" };
                worst = format!("{which}_{}[{i}]: taped {x:.6e}, numeric {y:.6e}", k / 2);
            }
        }
    }
    let coords: usize = flat.iter().map(Tensor::numel).sum();
    Ok(OracleReport::new("inner_gradients", dev, FIRST_ORDER_TOLERANCE, seed)
        .with_detail(format!("{coords} coordinates; worst {worst}")))
}

/// Tolerance for the outer check of a model, and whether it is only
/// informational (first-order gradient rule drops the second-order terms).
pub fn outer_tolerance(cfg: &ModelConfig) -> (f64, bool) {
    match cfg.rule {
        Rule::None => (FIRST_ORDER_TOLERANCE, false),
        Rule::Hebbian => (HEBBIAN_OUTER_TOLERANCE, false),
        Rule::Gradient => (SECOND_ORDER_TOLERANCE, cfg.inner_grad_mode == InnerGradMode::FirstOrder),
    }
}

/// Taped meta-loss gradients of every static parameter through the whole
/// inner loop versus central differences of the meta-loss.
pub fn finite_difference_outer(model: &PlasticTransformer, episode: &Episode, eps: f64, seed: u64) -> Result<OracleReport> {
    check_tiny(&model.config)?;
    let run = run_episode(model, episode, EpisodeOptions::train())?;
    let analytic = run.grads.expect("train mode returns gradients");
    let mut probe = model.clone();
    let numeric = central_differences(
        |ps| {
            probe.params.tensors.clone_from_slice(ps);
            run_episode(&probe, episode, EpisodeOptions::eval()).map(|r| r.meta_loss)
        },
        &model.params.tensors,
        eps,
    )
    .map_err(|e| match e {
        Error::Oracle(m) => Error::Oracle(format!("{m} ({})", name_coordinates(model))),
        other => other,
    })?;
    let mut dev: f64 = 0.0;
    let mut worst = String::new();
    let mut flagged = 0usize;
    let (tolerance, informational) = outer_tolerance(&model.config);
    for (pi, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let e = floored_relative_error(x, y, RELATIVE_FLOOR);
            if e > tolerance || e.is_nan() {
                flagged += 1;
            }
            if e > dev || e.is_nan() {
                dev = e;
                worst = format!("{}[{i}]: taped {x:.6e}, numeric {y:.6e}", model.params.names[pi]);
            }
        }
    }
    let coords: usize = analytic.iter().map(Tensor::numel).sum();
    let mode = match (model.config.rule, model.config.inner_grad_mode) {
        (Rule::Gradient, InnerGradMode::FirstOrder) => "_first_order",
        (Rule::Gradient, InnerGradMode::SecondOrder) => "_second_order",
        _ => "",
    };
    let report = OracleReport::new(format!("outer_gradients_{}{mode}", model.config.rule), dev, tolerance, seed)
        .with_detail(format!(
            "{coords} coordinates over {} steps, {flagged} above tolerance; worst {worst}",
            episode.len()
        ));
    Ok(if informational { report.informational() } else { report })
}

fn name_coordinates(model: &PlasticTransformer) -> String {
    format!("parameters in order: {}", model.params.names.join(", "))
}

// ── gate ────────────────────────────────────────────────────────────────

/// Samples random `(η̃, δ, η0, max_norm)` and checks the engine's gate
/// against `0 < η ≤ η0` and `η·‖δ‖ ≤ η0·max_norm`, with `‖δ‖` from a
/// scalar loop. Sample 0 has `δ = 0`; every sample is also evaluated with
/// `η0 = 0`, where `η` must be exactly zero.
pub fn eta_bound_fuzzer(n_samples: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut worst: f64 = 0.0;
    let mut first: Option<String> = None;
    let mut note = |kind: &str, excess: f64, sample: String, worst: &mut f64, violations: &mut usize| {
        *violations += 1;
        *worst = worst.max(excess);
        if first.is_none() {
            first = Some(format!("{kind}: {sample}"));
        }
    };
    for k in 0..n_samples {
        let logit = rng.random_range(-20.0..20.0);
        let eta0 = rng.random_range(1e-3..=1.0);
        let max_norm = 10f64.powf(rng.random_range(-2.0..2.0));
        let len = rng.random_range(1..=16usize);
        let scale = 10f64.powf(rng.random_range(-4.0..4.0));
        let zero = k == 0 || rng.random_range(0..50) == 0;
        let delta: Vec<f64> = (0..len)
            .map(|_| {
                if zero {
                    0.0
                } else {
                    scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                }
            })
            .collect();
        let norm = sum_of_squares(&delta).sqrt();
        let tensor = Tensor::row(delta);
        let eta = plasticity::compute_eta(logit, &tensor, eta0, max_norm);
        let sample = || format!("logit {logit}, ‖δ‖ {norm}, eta0 {eta0}, max_norm {max_norm}, eta {eta}");
        if eta.is_nan() || eta <= 0.0 {
            note("η ≤ 0", f64::INFINITY, sample(), &mut worst, &mut violations);
        }
        if eta > eta0 {
            note("η > η0", eta - eta0, sample(), &mut worst, &mut violations);
        }
        if eta * norm > eta0 * max_norm {
            note("η‖δ‖ > η0·max_norm", eta * norm - eta0 * max_norm, sample(), &mut worst, &mut violations);
        }
        if zero && eta != eta0 * sigmoid(logit) {
            note("δ = 0 not unclipped", (eta - eta0 * sigmoid(logit)).abs(), sample(), &mut worst, &mut violations);
        }
        let frozen = plasticity::compute_eta(logit, &tensor, 0.0, max_norm);
        if frozen != 0.0 {
            note("η0 = 0 gives η ≠ 0", frozen.abs(), sample(), &mut worst, &mut violations);
        }
    }
    let report = OracleReport::new("eta_bound_fuzz", worst, 0.0, seed);
    let detail = match first {
        None => format!("{n_samples} samples, no violations"),
        Some(s) => format!("{n_samples} samples, {violations} violations; first {s}"),
    };
    OracleReport {
        pass: violations == 0,
        ..report.with_detail(detail)
    }
}

// ── suite ───────────────────────────────────────────────────────────────

/// A copying run small enough for every oracle: one symbol from a
/// three-letter vocabulary recalled after two blank steps (four steps in
/// all) on a model whose widths are all at most four.
pub fn tiny_run_config(rule: Rule, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(TaskKind::Copying, rule, seed);
    cfg.tasks.copying = CopyingConfig {
        n: 1,
        delay: 2,
        vocab: 3,
        dataset_size: 1,
    };
    cfg.model = ModelConfig::tiny(rule, 0, 0);
    cfg.sync_dims();
    cfg
}

/// Every oracle check on the tiny model of `cfg` for each of `rules`: the
/// recursion over an eight-step episode, inner gradients, outer gradients
/// through the whole inner loop (plus the first-order contrast for the
/// gradient rule) and the gate fuzz.
pub fn tiny_suite(cfg: &RunConfig, rules: &[Rule], fuzz_samples: usize, seed: u64) -> Result<Vec<OracleReport>> {
    check_tiny(&cfg.model)?;
    let short = tasks::gen_copying(&cfg.tasks.copying, seed);
    let long_cfg = CopyingConfig {
        n: 3,
        delay: 2,
        ..cfg.tasks.copying.clone()
    };
    let long = tasks::gen_copying(&long_cfg, seed);
    let mut reports = Vec::new();
    for &rule in rules {
        let mut mc = cfg.model.clone();
        mc.rule = rule;
        let model = PlasticTransformer::new(mc.clone(), seed)?;
        if rule != Rule::None {
            reports.push(check_recursion(&model, &long, seed)?);
        }
        if rule == Rule::Gradient {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut r = |rows, cols| Tensor::from_fn(rows, cols, |_, _| rng.random_range(-0.5..0.5));
            let d = mc.d_model;
            let fast: Vec<(Tensor, Tensor)> = mc.plastic_set().iter().map(|_| (r(d, d), r(1, d))).collect();
            let inputs: Vec<Tensor> = long.inputs.iter().take(3).cloned().collect();
            reports.push(check_inner_gradients(&model, &inputs, &fast, FD_EPSILON, seed)?);
        }
        reports.push(finite_difference_outer(&model, &short, FD_EPSILON, seed)?);
        if rule == Rule::Gradient && mc.inner_grad_mode == InnerGradMode::SecondOrder {
            let mut first = model.clone();
            first.config.inner_grad_mode = InnerGradMode::FirstOrder;
            reports.push(finite_difference_outer(&first, &short, FD_EPSILON, seed)?);
        }
    }
    reports.push(eta_bound_fuzzer(fuzz_samples, seed));
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::gen_copying;

    fn tiny_copying() -> (CopyingConfig, Episode) {
        let cfg = CopyingConfig {
            n: 2,
            delay: 2,
            vocab: 3,
            dataset_size: 1,
        };
        let ep = gen_copying(&cfg, 11);
        (cfg, ep)
    }

    fn model(rule: Rule, seed: u64) -> PlasticTransformer {
        PlasticTransformer::new(ModelConfig::tiny(rule, 4, 3), seed).unwrap()
    }

    #[test]
    fn report_pass_flag_follows_tolerance() {
        assert!(OracleReport::new("a", 1e-11, 1e-10, 0).pass);
        assert!(!OracleReport::new("a", 2e-10, 1e-10, 0).pass);
        assert!(!OracleReport::new("a", f64::NAN, 1e-10, 0).pass);
        let info = OracleReport::new("a", 1.0, 1e-10, 0).informational();
        assert!(!info.pass && !info.is_hard_failure());
    }

    #[test]
    fn wide_models_are_refused() {
        let m = PlasticTransformer::new(ModelConfig::tiny(Rule::Hebbian, 8, 3), 1).unwrap();
        let (_, ep) = tiny_copying();
        assert!(matches!(check_recursion(&m, &ep, 0), Err(Error::Oracle(_))));
    }

    #[test]
    fn recursion_matches_engine_for_both_rules() {
        let (_, ep) = tiny_copying();
        for rule in [Rule::Hebbian, Rule::Gradient] {
            for seed in 0..3 {
                let r = check_recursion(&model(rule, seed), &ep, seed).unwrap();
                assert!(r.pass, "{}", r.summary_line());
            }
        }
    }

    #[test]
    fn frozen_gate_keeps_snapshots_zero() {
        let (_, ep) = tiny_copying();
        for rule in [Rule::Hebbian, Rule::Gradient] {
            let mut m = model(rule, 2);
            m.config.eta0 = 0.0;
            let rec = record_engine(&m, &ep).unwrap();
            let oracle = fastweight_recursion_oracle(&RecursionParams::from_model(&m), &rec.signals).unwrap();
            for s in oracle.iter().chain(&rec.snapshots) {
                assert!(s.w.iter().chain(&s.b).flatten().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn one_by_one_layer_by_hand() {
        let mut cfg = ModelConfig::tiny(Rule::Hebbian, 2, 2);
        cfg.d_model = 1;
        cfg.n_heads = 1;
        let m = PlasticTransformer::new(cfg, 5).unwrap();
        let ep = Episode {
            task: crate::config::TaskKind::Regression,
            seed: 0,
            inputs: vec![Tensor::row(vec![0.3, -0.7]), Tensor::row(vec![1.1, 0.4])],
            targets: vec![Tensor::row(vec![0.0, 0.0]); 2],
            loss_mask: vec![true; 2],
            phases: vec![crate::tasks::Phase::Query; 2],
        };
        let rec = record_engine(&m, &ep).unwrap();
        let alpha = m.params.tensors[m.rate_indices()[0].0].data()[0];
        let (eta0, max_norm) = (m.config.eta0, m.config.max_norm);
        let step = |s: &StepSignals| {
            let inc = s.p[0][0] * s.q[0][0];
            let mut eta = eta0 / (1.0 + (-s.eta_logit).exp());
            if inc.abs() > max_norm {
                eta *= max_norm / inc.abs();
            }
            (eta, inc)
        };
        let (e1, d1) = step(&rec.signals[0]);
        let (e2, d2) = step(&rec.signals[1]);
        let w1 = e1 * alpha * d1;
        let w2 = (1.0 - e2) * w1 + e2 * alpha * d2;
        assert!((rec.snapshots[0].w[0][0] - w1).abs() < 1e-15);
        assert!((rec.snapshots[1].w[0][0] - w2).abs() < 1e-15);
    }

    #[test]
    fn flipped_hebbian_sign_is_caught() {
        let (_, ep) = tiny_copying();
        let mut m = model(Rule::Hebbian, 1);
        m.config.flip_hebbian_sign = true;
        let r = check_recursion(&m, &ep, 1).unwrap();
        assert!(!r.pass, "{}", r.summary_line());
    }

    #[test]
    fn inner_gradients_pass() {
        let m = model(Rule::Gradient, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = |rows, cols| Tensor::from_fn(rows, cols, |_, _| rng.random_range(-0.3..0.3));
        let fast = vec![(r(4, 4), r(1, 4))];
        let inputs: Vec<Tensor> = (0..3).map(|_| r(1, 4)).collect();
        let rep = check_inner_gradients(&m, &inputs, &fast, FD_EPSILON, 3).unwrap();
        assert!(rep.pass, "{}", rep.summary_line());
    }

    #[test]
    fn outer_gradients_pass_for_every_rule() {
        let cfg = CopyingConfig {
            n: 1,
            delay: 2,
            vocab: 3,
            dataset_size: 1,
        };
        let ep = gen_copying(&cfg, 4);
        assert_eq!(ep.len(), 4);
        for rule in [Rule::None, Rule::Hebbian, Rule::Gradient] {
            let r = finite_difference_outer(&model(rule, 7), &ep, FD_EPSILON, 7).unwrap();
            assert!(r.pass, "{}", r.summary_line());
        }
    }

    #[test]
    fn first_order_outer_check_is_informational() {
        let cfg = CopyingConfig {
            n: 1,
            delay: 2,
            vocab: 3,
            dataset_size: 1,
        };
        let ep = gen_copying(&cfg, 4);
        let mut m = model(Rule::Gradient, 7);
        m.config.inner_grad_mode = InnerGradMode::FirstOrder;
        let r = finite_difference_outer(&m, &ep, FD_EPSILON, 7).unwrap();
        assert!(r.informational && !r.is_hard_failure());
        assert!(r.check.ends_with("first_order"));
    }

    #[test]
    fn gate_fuzz_has_no_violations() {
        let r = eta_bound_fuzzer(20_000, 9);
        assert!(r.pass, "{}", r.summary_line());
    }

    #[test]
    fn tiny_suite_passes_and_catches_a_sign_flip() {
        let cfg = tiny_run_config(Rule::Hebbian, 0);
        cfg.validate().unwrap();
        let reports = tiny_suite(&cfg, &Rule::ALL, 2000, 0).unwrap();
        assert!(reports.iter().all(|r| !r.is_hard_failure()));
        let mut flipped = cfg.clone();
        flipped.model.flip_hebbian_sign = true;
        let reports = tiny_suite(&flipped, &[Rule::Hebbian], 100, 0).unwrap();
        assert!(reports.iter().any(OracleReport::is_hard_failure));
    }

    #[test]
    fn reports_are_written_under_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let r = OracleReport::new("recursion_hebbian", 0.0, 1e-10, 1);
        let paths = write_reports(dir.path(), std::slice::from_ref(&r)).unwrap();
        assert_eq!(paths[0], dir.path().join("oracle/recursion_hebbian.json"));
        let back: OracleReport = serde_json::from_str(&std::fs::read_to_string(&paths[0]).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
