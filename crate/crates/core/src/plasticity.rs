//! Fast-weight update rules and the shared neuromodulation gate.
//!
//! The free functions on plain tensors are the reference forms; the taped
//! [`plastic_step`] builds the same computation on a [`Graph`] so the outer
//! loop can differentiate through every update.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{InnerGradMode, Rule};
use crate::error::{Error, Result};
use crate::model::{BoundParams, FastState, PlasticTransformer, StepOutput};
use crate::tensor::{self, Tensor};

/// Mechanistic signals of one update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlasticityTracePoint {
    pub t: usize,
    pub eta: f64,
    pub delta_norm: f64,
    /// Frobenius norm of each plastic matrix after the update.
    pub norms: Vec<f64>,
    pub rule: Rule,
}

/// Activity-dependent increment `p qᵀ` for flat `p` (pre-synaptic) and
/// `q` (post-synaptic) activations.
pub fn hebbian_increment(p: &Tensor, q: &Tensor) -> Tensor {
    let (m, n) = (p.numel(), q.numel());
    let (pd, qd) = (p.data(), q.data());
    Tensor::from_fn(m, n, |i, j| pd[i] * qd[j])
}

/// Row-major flattening of per-layer increments, concatenated in ascending
/// layer order. Every layer in `layers` must have exactly one increment.
pub fn compute_delta(layers: &[usize], increments: &[(usize, Tensor)]) -> Result<Tensor> {
    let mut order = layers.to_vec();
    order.sort_unstable();
    let mut flat = Vec::new();
    for l in &order {
        let mut found = increments.iter().filter(|(k, _)| k == l);
        let Some((_, inc)) = found.next() else {
            return Err(Error::Contract(format!("no increment for plastic layer {l}")));
        };
        if found.next().is_some() {
            return Err(Error::Contract(format!("two increments for plastic layer {l}")));
        }
        flat.extend_from_slice(inc.data());
    }
    if increments.len() != order.len() {
        return Err(Error::Contract("increment for a layer outside the plastic set".into()));
    }
    Ok(Tensor::row(flat))
}

/// `η0 · σ(η̃) · min(1, max_norm / ‖δ‖)` given `‖δ‖`; a null update is
/// never clipped.
pub fn gate(eta_logit: f64, delta_norm: f64, eta0: f64, max_norm: f64) -> f64 {
    let base = eta0 * tensor::sigmoid(eta_logit);
    if delta_norm > max_norm {
        base * (max_norm / delta_norm)
    } else {
        base
    }
}

/// The neuromodulation gate for an update direction `δ`.
pub fn compute_eta(eta_logit: f64, delta: &Tensor, eta0: f64, max_norm: f64) -> f64 {
    gate(eta_logit, delta.frobenius_norm(), eta0, max_norm)
}

/// `(1 − η)·w + η·(α ⊙ Δ)`
pub fn apply_update(w: &Tensor, delta: &Tensor, alpha: &Tensor, eta: f64) -> Result<Tensor> {
    Ok(tensor::decay_mix(w, alpha, delta, eta)?)
}

/// `(1/d_o) · ‖W_outᵀ · [y, ȳ, η̃]‖²` with `W_out` stored `d_model × width`.
pub fn internal_loss(y: &Tensor, aux: &Tensor, eta_logit: f64, w_out: &Tensor) -> Result<f64> {
    let mut c = y.data().to_vec();
    c.extend_from_slice(aux.data());
    c.push(eta_logit);
    if c.len() != w_out.cols() {
        return Err(Error::Contract(format!(
            "output width {} does not match head width {}",
            c.len(),
            w_out.cols()
        )));
    }
    let back = tensor::gemm(&Tensor::row(c), w_out, tensor::Transpose::Right)?;
    let d_o = y.numel() as f64;
    Ok(back.data().iter().map(|v| v * v).sum::<f64>() / d_o)
}

/// Taped form of [`internal_loss`] on a step's head output.
pub fn internal_loss_taped(g: &mut Graph, model: &PlasticTransformer, bound: &BoundParams, out: &StepOutput) -> Result<Var> {
    let back = g.matmul_nt(out.head, model.head_weight(bound))?;
    let ss = g.sum_squares(back)?;
    Ok(g.scale(ss, 1.0 / model.config.output_dim as f64)?)
}

/// `∂L(t)/∂w_l` then `∂L(t)/∂b_l` for every plastic layer, with the fast
/// weights of step `t` treated as leaves. With `create_graph` the results
/// stay on the tape for outer differentiation.
pub fn inner_gradients(
    g: &mut Graph,
    model: &PlasticTransformer,
    bound: &BoundParams,
    state: &FastState,
    out: &StepOutput,
    create_graph: bool,
) -> Result<(Vec<Var>, Vec<Var>)> {
    if model.config.rule != Rule::Gradient {
        return Err(Error::Contract(format!(
            "inner gradients requested for rule `{}`",
            model.config.rule
        )));
    }
    let loss = internal_loss_taped(g, model, bound, out)?;
    let mut wrt = state.w.clone();
    wrt.extend_from_slice(&state.b);
    let mut grads = g.grad(loss, &wrt, create_graph)?;
    let gb = grads.split_off(state.w.len());
    Ok((grads, gb))
}

/// How the update is recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepMode {
    /// The outer loop will differentiate through this update.
    pub train: bool,
    pub inner_grad_mode: InnerGradMode,
}

/// Taped gate: returns the `η` node and the value of `‖δ‖`.
fn gate_taped(g: &mut Graph, logit: Var, delta_sq: Var, eta0: f64, max_norm: f64) -> Result<(Var, f64)> {
    let norm = g.scalar(delta_sq).sqrt();
    let s = g.sigmoid(logit)?;
    let mut eta = g.scale(s, eta0)?;
    if norm > max_norm {
        let n = g.sqrt(delta_sq)?;
        let r = g.recip(n)?;
        let clip = g.scale(r, max_norm)?;
        eta = g.mul(eta, clip)?;
    }
    Ok((eta, norm))
}

fn sum_all(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = g.sum_squares(parts[0])?;
    for &p in &parts[1..] {
        let s = g.sum_squares(p)?;
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// One inner-loop update of the fast weights after `forward_step`.
pub fn plastic_step(
    g: &mut Graph,
    model: &PlasticTransformer,
    bound: &BoundParams,
    state: &mut FastState,
    out: &StepOutput,
    mode: StepMode,
) -> Result<PlasticityTracePoint> {
    let cfg = &model.config;
    let t = state.t.saturating_sub(1);
    if cfg.rule == Rule::None || state.is_ablated() || state.w.is_empty() {
        return Ok(PlasticityTracePoint {
            t,
            eta: 0.0,
            delta_norm: 0.0,
            norms: state.norms(g),
            rule: cfg.rule,
        });
    }
    if out.p.len() != state.w.len() || out.q.len() != state.w.len() {
        return Err(Error::Contract(format!(
            "step captured {} activations for {} plastic layers",
            out.p.len(),
            state.w.len()
        )));
    }
    let (eta, delta_norm) = match cfg.rule {
        Rule::Hebbian => {
            let mut incs = Vec::with_capacity(state.w.len());
            for (&p, &q) in out.p.iter().zip(&out.q) {
                let inc = g.outer(p, q)?;
                incs.push(if cfg.flip_hebbian_sign { g.scale(inc, -1.0)? } else { inc });
            }
            let sq = sum_all(g, &incs)?;
            let (eta, norm) = gate_taped(g, out.eta_logit, sq, cfg.eta0, cfg.max_norm)?;
            for (slot, inc) in incs.into_iter().enumerate() {
                let alpha = rate(model.alpha(bound, slot), slot)?;
                state.w[slot] = g.decay_mix(state.w[slot], alpha, inc, eta)?;
            }
            (g.scalar(eta), norm)
        }
        Rule::Gradient => {
            let second = mode.train && mode.inner_grad_mode == InnerGradMode::SecondOrder;
            let (gw, gb) = inner_gradients(g, model, bound, state, out, second)?;
            if second && gw.iter().chain(&gb).any(|&v| !g.requires_grad(v)) {
                return Err(Error::Tensor(tensor::TensorError::InnerGradientDetached));
            }
            let mut all = gw.clone();
            all.extend_from_slice(&gb);
            let sq = sum_all(g, &all)?;
            let (eta, norm) = gate_taped(g, out.eta_logit, sq, cfg.eta0, cfg.max_norm)?;
            for slot in 0..state.w.len() {
                let alpha = rate(model.alpha(bound, slot), slot)?;
                let beta = rate(model.beta(bound, slot), slot)?;
                let w = g.decay_mix(state.w[slot], alpha, gw[slot], eta)?;
                let b = g.decay_mix(state.b[slot], beta, gb[slot], eta)?;
                // The next step differentiates with respect to these, so
                // they must stay on the tape even when nothing upstream is
                // trainable.
                state.w[slot] = if g.requires_grad(w) { w } else { g.detach_leaf(w) };
                state.b[slot] = if g.requires_grad(b) { b } else { g.detach_leaf(b) };
            }
            (g.scalar(eta), norm)
        }
        Rule::None => unreachable!("handled above"),
    };
    Ok(PlasticityTracePoint {
        t,
        eta,
        delta_norm,
        norms: state.norms(g),
        rule: cfg.rule,
    })
}

fn rate(v: Option<Var>, slot: usize) -> Result<Var> {
    v.ok_or_else(|| Error::Contract(format!("plastic slot {slot} has no plasticity rate")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::gradcheck::{central_differences, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn zero_pre_synaptic_gives_zero_increment() {
        let z = hebbian_increment(&Tensor::row(vec![0.0, 0.0]), &Tensor::row(vec![3.0, 1.0]));
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn increment_by_hand() {
        let d = hebbian_increment(&Tensor::row(vec![1.0, 0.0]), &Tensor::row(vec![0.0, 2.0]));
        assert_eq!(d, Tensor::matrix(2, 2, vec![0.0, 2.0, 0.0, 0.0]).unwrap());
    }

    #[test]
    fn increment_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_tensor(&mut rng, 1, 5);
        let q = rand_tensor(&mut rng, 1, 3);
        let d = hebbian_increment(&p, &q);
        for i in 0..5 {
            for j in 0..3 {
                assert_eq!(d.get(i, j), p.data()[i] * q.data()[j]);
            }
        }
    }

    #[test]
    fn delta_is_row_major_in_layer_order() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(compute_delta(&[0], &[(0, a.clone())]).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::matrix(1, 2, vec![9.0, 8.0]).unwrap();
        let d = compute_delta(&[1, 0], &[(1, b), (0, a)]).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0, 3.0, 4.0, 9.0, 8.0]);
    }

    #[test]
    fn zero_layers_give_zero_delta() {
        let d = compute_delta(&[0, 1], &[(0, Tensor::zeros(2, 2)), (1, Tensor::zeros(3, 3))]).unwrap();
        assert_eq!(d.numel(), 13);
        assert!(d.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn missing_layer_is_a_contract_error() {
        let err = compute_delta(&[0, 1], &[(0, Tensor::zeros(2, 2))]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn delta_norm_is_root_sum_of_frobenius_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let incs: Vec<(usize, Tensor)> = (0..3)
            .map(|l| {
                let p = rand_tensor(&mut rng, 1, 4);
                let q = rand_tensor(&mut rng, 1, 4);
                (l, hebbian_increment(&p, &q))
            })
            .collect();
        let d = compute_delta(&[0, 1, 2], &incs).unwrap();
        let expect = incs.iter().map(|(_, t)| t.frobenius_norm().powi(2)).sum::<f64>().sqrt();
        assert!((d.frobenius_norm() - expect).abs() < 1e-12);
    }

    #[test]
    fn gate_saturates_off() {
        let eta = compute_eta(-30.0, &Tensor::row(vec![0.1]), 0.2, 1.0);
        assert!(eta < 0.2 * 1e-12);
        assert!(eta > 0.0);
    }

    #[test]
    fn gate_half_open_without_clipping() {
        assert_eq!(compute_eta(0.0, &Tensor::row(vec![0.6, 0.8]), 0.2, 1.0), 0.1);
    }

    #[test]
    fn gate_clips_large_updates() {
        let delta = Tensor::row(vec![0.0, 4.0, 0.0]);
        let eta = compute_eta(0.0, &delta, 0.2, 1.0);
        assert!((eta - 0.025).abs() < 1e-15);
    }

    #[test]
    fn gate_leaves_null_updates_unclipped() {
        assert_eq!(compute_eta(1.0, &Tensor::zeros(1, 4), 0.2, 1.0), 0.2 * tensor::sigmoid(1.0));
    }

    #[test]
    fn update_with_closed_gate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_tensor(&mut rng, 3, 3);
        let out = apply_update(&w, &rand_tensor(&mut rng, 3, 3), &rand_tensor(&mut rng, 3, 3), 0.0).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn full_gate_with_unit_rates_overwrites() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_tensor(&mut rng, 2, 3);
        let d = rand_tensor(&mut rng, 2, 3);
        let out = apply_update(&w, &d, &Tensor::filled(2, 3, 1.0), 1.0).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn zero_rates_decay_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = rand_tensor(&mut rng, 3, 3);
        let mut w = w0.clone();
        let eta = 0.15;
        for t in 1..=10 {
            w = apply_update(&w, &rand_tensor(&mut rng, 3, 3), &Tensor::zeros(3, 3), eta).unwrap();
            let expect = (1.0 - eta).powi(t) * w0.frobenius_norm();
            assert!((w.frobenius_norm() - expect).abs() < 1e-12);
        }
    }

    fn scalar_internal_loss(c: &[f64], w_out: &Tensor, d_o: usize) -> f64 {
        let mut total = 0.0;
        for i in 0..w_out.rows() {
            let mut s = 0.0;
            for (j, cj) in c.iter().enumerate() {
                s += w_out.get(i, j) * cj;
            }
            total += s * s;
        }
        total / d_o as f64
    }

    #[test]
    fn internal_loss_of_zero_outputs_is_zero() {
        let w = Tensor::filled(4, 5, 0.3);
        assert_eq!(internal_loss(&Tensor::zeros(1, 2), &Tensor::zeros(1, 2), 0.0, &w).unwrap(), 0.0);
    }

    #[test]
    fn internal_loss_of_unit_vector() {
        let w = Tensor::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let l = internal_loss(&Tensor::row(vec![1.0]), &Tensor::row(vec![0.0]), 0.0, &w).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn internal_loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = rand_tensor(&mut rng, 6, 7);
        let y = rand_tensor(&mut rng, 1, 2);
        let a = rand_tensor(&mut rng, 1, 4);
        let e = 0.37;
        let mut c = y.data().to_vec();
        c.extend_from_slice(a.data());
        c.push(e);
        let got = internal_loss(&y, &a, e, &w).unwrap();
        assert!((got - scalar_internal_loss(&c, &w, 2)).abs() < 1e-12);
    }

    #[test]
    fn internal_loss_width_mismatch() {
        let w = Tensor::zeros(3, 3);
        let err = internal_loss(&Tensor::row(vec![1.0]), &Tensor::row(vec![1.0, 2.0]), 0.0, &w);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn internal_loss_is_homogeneous_of_degree_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_tensor(&mut rng, 4, 5);
        let y = rand_tensor(&mut rng, 1, 2);
        let a = rand_tensor(&mut rng, 1, 2);
        let l1 = internal_loss(&y, &a, 0.4, &w).unwrap();
        let c = 3.0;
        let l2 = internal_loss(&y.map(|v| v * c), &a.map(|v| v * c), 0.4 * c, &w).unwrap();
        assert!((l2 - c * c * l1).abs() < 1e-12);
    }

    fn tiny(rule: Rule) -> PlasticTransformer {
        PlasticTransformer::new(ModelConfig::tiny(rule, 3, 2), 9).unwrap()
    }

    fn input(t: usize) -> Tensor {
        Tensor::row(vec![0.3 * t as f64 - 0.4, 0.5, -0.2 * t as f64])
    }

    fn eval_mode() -> StepMode {
        StepMode {
            train: false,
            inner_grad_mode: InnerGradMode::SecondOrder,
        }
    }

    #[test]
    fn none_rule_is_a_no_op() {
        let m = tiny(Rule::None);
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let mut s = m.init_fast_state(&mut g);
        for t in 0..4 {
            let out = m.forward_step(&mut g, &bound, &mut s, &input(t), None).unwrap();
            let tp = plastic_step(&mut g, &m, &bound, &mut s, &out, eval_mode()).unwrap();
            assert_eq!(tp.eta, 0.0);
            assert_eq!(tp.norms, vec![0.0]);
        }
    }

    #[test]
    fn inner_gradients_refuse_other_rules() {
        let m = tiny(Rule::Hebbian);
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let mut s = m.init_fast_state(&mut g);
        let out = m.forward_step(&mut g, &bound, &mut s, &input(0), None).unwrap();
        let err = inner_gradients(&mut g, &m, &bound, &s, &out, false);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn hebbian_step_with_zero_presynaptic_is_pure_decay() {
        let m = tiny(Rule::Hebbian);
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let mut s = m.init_fast_state(&mut g);
        let w0 = Tensor::from_fn(4, 4, |i, j| 0.1 * (i as f64 - j as f64));
        s.w[0] = g.constant(w0.clone());
        let mut out = m.forward_step(&mut g, &bound, &mut s, &input(1), None).unwrap();
        out.p[0] = g.constant(Tensor::zeros(1, 4));
        let tp = plastic_step(&mut g, &m, &bound, &mut s, &out, eval_mode()).unwrap();
        let expect = w0.map(|v| (1.0 - tp.eta) * v);
        assert!(g.value(s.w[0]).max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn trace_respects_gate_bound() {
        for rule in [Rule::Hebbian, Rule::Gradient] {
            let m = tiny(rule);
            let mut g = Graph::new();
            let bound = m.bind(&mut g, false);
            let mut s = m.init_fast_state(&mut g);
            for t in 0..6 {
                let out = m.forward_step(&mut g, &bound, &mut s, &input(t), None).unwrap();
                let tp = plastic_step(&mut g, &m, &bound, &mut s, &out, eval_mode()).unwrap();
                assert!(tp.eta > 0.0 && tp.eta <= m.config.eta0);
                assert!(tp.eta * tp.delta_norm <= m.config.eta0 * m.config.max_norm + 1e-9);
                assert_eq!(tp.t, t);
            }
            assert!(s.norms(&g)[0] > 0.0);
        }
    }

    /// Rebuilds step `t` with fixed fast weights and returns `L(t)`.
    fn loss_at(m: &PlasticTransformer, xs: &[Tensor], fast: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let mut s = m.init_fast_state(&mut g);
        let mut last = None;
        for x in xs {
            s.w[0] = g.constant(fast[0].clone());
            s.b[0] = g.constant(fast[1].clone());
            last = Some(m.forward_step(&mut g, &bound, &mut s, x, None).unwrap());
        }
        let out = last.unwrap();
        let l = internal_loss_taped(&mut g, m, &bound, &out).unwrap();
        g.scalar(l)
    }

    #[test]
    fn inner_gradients_match_finite_differences() {
        let m = tiny(Rule::Gradient);
        let xs: Vec<Tensor> = (0..3).map(input).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fast = vec![rand_tensor(&mut rng, 4, 4).map(|v| 0.3 * v), rand_tensor(&mut rng, 1, 4).map(|v| 0.3 * v)];
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let mut s = m.init_fast_state(&mut g);
        let mut last = None;
        for x in &xs {
            s.w[0] = g.leaf(fast[0].clone());
            s.b[0] = g.leaf(fast[1].clone());
            last = Some(m.forward_step(&mut g, &bound, &mut s, x, None).unwrap());
        }
        let (gw, gb) = inner_gradients(&mut g, &m, &bound, &s, &last.unwrap(), false).unwrap();
        let numeric = central_differences(|p| Ok(loss_at(&m, &xs, p)), &fast, 1e-6).unwrap();
        for (a, n) in [g.value(gw[0]), g.value(gb[0])].into_iter().zip(&numeric) {
            for (&x, &y) in a.data().iter().zip(n.data()) {
                assert!(relative_error(x, y) < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn scaling_the_loss_projection_scales_inner_gradients_quadratically() {
        let m = tiny(Rule::Gradient);
        let c = 3.0;
        let run = |scale: f64| {
            let mut g = Graph::new();
            let bound = m.bind(&mut g, false);
            let mut s = m.init_fast_state(&mut g);
            let out = m.forward_step(&mut g, &bound, &mut s, &input(2), None).unwrap();
            let w = g.value(m.head_weight(&bound)).map(|v| v * scale);
            let w = g.constant(w);
            let back = g.matmul_nt(out.head, w).unwrap();
            let ss = g.sum_squares(back).unwrap();
            let l = g.scale(ss, 0.5).unwrap();
            let grads = g.gradients(l, &[s.w[0], s.b[0]]).unwrap();
            (g.scalar(l), grads)
        };
        let (l1, g1) = run(1.0);
        let (l2, g2) = run(c);
        assert!((l2 - c * c * l1).abs() < 1e-12 * l2.abs().max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.map(|v| v * c * c).max_abs_diff(b) < 1e-12 * b.frobenius_norm().max(1.0));
        }
    }
}
