//! Decoder-only Transformer whose position-wise feed-forward blocks carry a
//! plastic linear path `W̃_l + w_l(t)`, executed one token at a time with a
//! key/value cache so the fast weights can change between positions.
//!
//! Row-vector convention throughout: a token is a `1 × d` row and a linear
//! map is `x · W` with `W` stored `d_in × d_out`.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, Rule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Score added to masked attention logits in the full-sequence reference.
const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug)]
struct PlasticIdx {
    alpha: usize,
    beta: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct LayerIdx {
    ln1_gain: usize,
    ln1_bias: usize,
    attn: AttnIdx,
    ln2_gain: usize,
    ln2_bias: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    /// The static plastic-path weight `W̃_l` and bias `b̃_l`.
    w_tilde: usize,
    b_tilde: usize,
    plastic: Option<PlasticIdx>,
}

#[derive(Clone, Debug)]
struct Layout {
    embed_weight: usize,
    embed_bias: usize,
    layers: Vec<LayerIdx>,
    final_gain: usize,
    final_bias: usize,
    head_weight: usize,
    head_bias: usize,
}

/// All meta-trained tensors, addressed by stable names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl StaticParams {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .position(|t| !t.is_finite())
            .map(|i| self.names[i].as_str())
    }
}

/// Static parameters placed on a tape, in the same order as
/// [`StaticParams::tensors`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Per-episode mutable state: fast weights for each plastic layer, the
/// step counter and the key/value cache of every attention layer.
#[derive(Clone, Debug)]
pub struct FastState {
    /// Plastic layer indices in ascending order; `w`, `b` align with it.
    pub layers: Vec<usize>,
    pub w: Vec<Var>,
    pub b: Vec<Var>,
    pub t: usize,
    keys: Vec<Option<Var>>,
    values: Vec<Option<Var>>,
    /// No fast-weight buffers at all: the plasticity-free architecture.
    ablated: bool,
}

impl FastState {
    pub fn is_ablated(&self) -> bool {
        self.ablated
    }

    /// Number of cached positions in every attention layer.
    pub fn cache_len(&self, g: &Graph) -> usize {
        self.keys
            .first()
            .and_then(|k| k.map(|k| g.value(k).rows()))
            .unwrap_or(0)
    }

    /// Current fast-weight values.
    pub fn snapshot(&self, g: &Graph) -> Vec<Tensor> {
        self.w.iter().map(|&w| g.value(w).clone()).collect()
    }

    pub fn bias_snapshot(&self, g: &Graph) -> Vec<Tensor> {
        self.b.iter().map(|&b| g.value(b).clone()).collect()
    }

    /// Frobenius norm of each plastic matrix.
    pub fn norms(&self, g: &Graph) -> Vec<f64> {
        self.w.iter().map(|&w| g.value(w).frobenius_norm()).collect()
    }
}

/// Everything one decoding step exposes to the plasticity rules and losses.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Full head output `[y, ȳ, η̃]`, `1 × (d_o + aux + 1)`.
    pub head: Var,
    pub y: Var,
    pub aux: Option<Var>,
    pub eta_logit: Var,
    /// FFN input (after layer norm) for each plastic layer.
    pub p: Vec<Var>,
    /// FFN output (before the residual) for each plastic layer.
    pub q: Vec<Var>,
}

/// Dropout applied on residual branches while training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

#[derive(Clone, Debug)]
pub struct PlasticTransformer {
    pub config: ModelConfig,
    pub params: StaticParams,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    seed: u64,
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "plasticformer-checkpoint-v1";

struct Builder {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random::<f64>() * hi)
}

impl PlasticTransformer {
    /// Builds a model with seeded initial weights. Plasticity rates come
    /// from a separate random stream so that the remaining weights are
    /// identical across rules for the same seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rate_rng = ChaCha8Rng::seed_from_u64(seed);
        rate_rng.set_stream(1);

        let d = config.d_model;
        let f = config.d_ff;
        let sd = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let embed_weight = b.push("embed.weight".into(), normal(&mut rng, config.input_dim, d, sd(config.input_dim)));
        let embed_bias = b.push("embed.bias".into(), Tensor::zeros(1, d));
        let plastic = config.plastic_set();
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            let ln1_gain = b.push(n("ln1.gain"), Tensor::filled(1, d, 1.0));
            let ln1_bias = b.push(n("ln1.bias"), Tensor::zeros(1, d));
            let proj = |name: &str, b: &mut Builder, rng: &mut ChaCha8Rng| {
                let w = b.push(n(&format!("attn.{name}.weight")), normal(rng, d, d, sd(d)));
                let bias = b.push(n(&format!("attn.{name}.bias")), Tensor::zeros(1, d));
                (w, bias)
            };
            let (wq, bq) = proj("q", &mut b, &mut rng);
            let (wk, bk) = proj("k", &mut b, &mut rng);
            let (wv, bv) = proj("v", &mut b, &mut rng);
            let (wo, bo) = proj("o", &mut b, &mut rng);
            let ln2_gain = b.push(n("ln2.gain"), Tensor::filled(1, d, 1.0));
            let ln2_bias = b.push(n("ln2.bias"), Tensor::zeros(1, d));
            let w1 = b.push(n("ffn.w1"), normal(&mut rng, d, f, sd(d)));
            let b1 = b.push(n("ffn.b1"), Tensor::zeros(1, f));
            let w2 = b.push(n("ffn.w2"), normal(&mut rng, f, d, sd(f)));
            let b2 = b.push(n("ffn.b2"), Tensor::zeros(1, d));
            let w_tilde = b.push(n("ffn.w_tilde"), normal(&mut rng, d, d, sd(d)));
            let b_tilde = b.push(n("ffn.b_tilde"), Tensor::zeros(1, d));
            let plastic = if plastic.contains(&l) && config.rule != Rule::None {
                let hi = 2.0 * config.alpha_init;
                let alpha = b.push(n("ffn.alpha"), uniform(&mut rate_rng, d, d, hi));
                let beta = (config.rule == Rule::Gradient)
                    .then(|| b.push(n("ffn.beta"), uniform(&mut rate_rng, 1, d, hi)));
                Some(PlasticIdx { alpha, beta })
            } else {
                None
            };
            layers.push(LayerIdx {
                ln1_gain,
                ln1_bias,
                attn: AttnIdx {
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                },
                ln2_gain,
                ln2_bias,
                w1,
                b1,
                w2,
                b2,
                w_tilde,
                b_tilde,
                plastic,
            });
        }
        let final_gain = b.push("final_ln.gain".into(), Tensor::filled(1, d, 1.0));
        let final_bias = b.push("final_ln.bias".into(), Tensor::zeros(1, d));
        let hw = config.head_width();
        let head_weight = b.push("head.weight".into(), normal(&mut rng, d, hw, sd(d)));
        let head_bias = b.push("head.bias".into(), Tensor::zeros(1, hw));
        Ok(Self {
            config,
            params: StaticParams {
                names: b.names,
                tensors: b.tensors,
            },
            layout: Layout {
                embed_weight,
                embed_bias,
                layers,
                final_gain,
                final_bias,
                head_weight,
                head_bias,
            },
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Index of `W_out` among the static parameters.
    pub fn head_weight_index(&self) -> usize {
        self.layout.head_weight
    }

    /// Indices of `α_l` (and `β_l`) for each plastic layer, ascending.
    pub fn rate_indices(&self) -> Vec<(usize, Option<usize>)> {
        self.layout
            .layers
            .iter()
            .filter_map(|l| l.plastic.map(|p| (p.alpha, p.beta)))
            .collect()
    }

    /// Places every static tensor on the tape, as differentiable leaves
    /// when `trainable`, constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    pub fn alpha(&self, bound: &BoundParams, slot: usize) -> Option<Var> {
        self.plastic_layer(slot).map(|p| bound.vars[p.alpha])
    }

    pub fn beta(&self, bound: &BoundParams, slot: usize) -> Option<Var> {
        self.plastic_layer(slot).and_then(|p| p.beta.map(|i| bound.vars[i]))
    }

    pub fn head_weight(&self, bound: &BoundParams) -> Var {
        bound.vars[self.layout.head_weight]
    }

    fn plastic_layer(&self, slot: usize) -> Option<PlasticIdx> {
        let l = *self.config.plastic_set().get(slot)?;
        self.layout.layers[l].plastic
    }

    /// Zero fast weights, `t = 0`, empty caches. The fast weights are
    /// tape leaves when the gradient rule needs to differentiate with
    /// respect to them.
    pub fn init_fast_state(&self, g: &mut Graph) -> FastState {
        let d = self.config.d_model;
        let layers = self.config.plastic_set();
        let leaves = self.config.rule == Rule::Gradient;
        let mut zero = |rows, cols| {
            let z = Tensor::zeros(rows, cols);
            if leaves {
                g.leaf(z)
            } else {
                g.constant(z)
            }
        };
        let w = layers.iter().map(|_| zero(d, d)).collect();
        let b = layers.iter().map(|_| zero(1, d)).collect();
        FastState {
            layers,
            w,
            b,
            t: 0,
            keys: vec![None; self.config.n_layers],
            values: vec![None; self.config.n_layers],
            ablated: false,
        }
    }

    /// A state with no fast-weight buffers: the same network with the
    /// plasticity module removed.
    pub fn init_ablated_state(&self) -> FastState {
        FastState {
            layers: Vec::new(),
            w: Vec::new(),
            b: Vec::new(),
            t: 0,
            keys: vec![None; self.config.n_layers],
            values: vec![None; self.config.n_layers],
            ablated: true,
        }
    }

    fn linear(&self, g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = g.matmul(x, w)?;
        Ok(add_bias(g, h, b)?)
    }

    fn norm(&self, g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x, self.config.layer_norm_eps)?;
        let rows = g.value(x).rows();
        let gain = if rows == 1 { gain } else { g.broadcast_rows(gain, rows)? };
        let scaled = g.mul(n, gain)?;
        Ok(add_bias(g, scaled, bias)?)
    }

    fn dropout(&self, g: &mut Graph, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
        let Some(d) = dropout.as_mut() else {
            return Ok(x);
        };
        if d.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - d.rate);
        let n = g.value(x).numel();
        let mask: Rc<[f64]> = (0..n)
            .map(|_| if d.rng.random::<f64>() < d.rate { 0.0 } else { keep })
            .collect();
        Ok(g.mask(x, mask)?)
    }

    /// The FFN block on rows `p`: ReLU MLP plus the plastic linear path.
    /// `fast` carries `(w_l, b_l)` when the layer has fast weights.
    fn ffn(&self, g: &mut Graph, li: &LayerIdx, bound: &BoundParams, p: Var, fast: Option<(Var, Var)>) -> Result<Var> {
        let v = &bound.vars;
        let h = self.linear(g, p, v[li.w1], v[li.b1])?;
        let h = g.relu(h)?;
        let mlp = self.linear(g, h, v[li.w2], v[li.b2])?;
        let (w_eff, b_eff) = match fast {
            Some((w, b)) => (g.add(v[li.w_tilde], w)?, g.add(v[li.b_tilde], b)?),
            None => (v[li.w_tilde], v[li.b_tilde]),
        };
        let direct = self.linear(g, p, w_eff, b_eff)?;
        Ok(g.add(mlp, direct)?)
    }

    fn head(&self, g: &mut Graph, bound: &BoundParams, h: Var) -> Result<Var> {
        let v = &bound.vars;
        let n = self.norm(g, h, v[self.layout.final_gain], v[self.layout.final_bias])?;
        self.linear(g, n, v[self.layout.head_weight], v[self.layout.head_bias])
    }

    fn split_head(&self, g: &mut Graph, head: Var) -> Result<(Var, Option<Var>, Var)> {
        let c = &self.config;
        let y = g.slice_cols(head, 0, c.output_dim)?;
        let aux = if c.aux_dim > 0 {
            Some(g.slice_cols(head, c.output_dim, c.aux_dim)?)
        } else {
            None
        };
        let eta = g.slice_cols(head, c.output_dim + c.aux_dim, 1)?;
        Ok((y, aux, eta))
    }

    /// Consumes one token: causal attention over the cached prefix plus
    /// this token, plastic FFNs with effective weights `W̃_l + w_l(t)`.
    /// Extends the caches and advances `t`; the fast weights themselves
    /// are left for the plasticity rule to update.
    pub fn forward_step(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        state: &mut FastState,
        x: &Tensor,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<StepOutput> {
        let c = &self.config;
        if x.numel() != c.input_dim {
            return Err(Error::Contract(format!(
                "input has {} features, model expects {}",
                x.numel(),
                c.input_dim
            )));
        }
        let v = &bound.vars;
        let xv = g.constant(Tensor::row(x.data().to_vec()));
        let h = self.linear(g, xv, v[self.layout.embed_weight], v[self.layout.embed_bias])?;
        let mut h = g.add_const(h, &positional_row(state.t, c.d_model))?;
        let dh = c.d_model / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ps = Vec::new();
        let mut qs = Vec::new();
        for (l, li) in self.layout.layers.iter().enumerate() {
            let a = &li.attn;
            let n1 = self.norm(g, h, v[li.ln1_gain], v[li.ln1_bias])?;
            let qv = self.linear(g, n1, v[a.wq], v[a.bq])?;
            let kv = self.linear(g, n1, v[a.wk], v[a.bk])?;
            let vv = self.linear(g, n1, v[a.wv], v[a.bv])?;
            let keys = match state.keys[l] {
                Some(prev) => g.concat_rows(&[prev, kv])?,
                None => kv,
            };
            let values = match state.values[l] {
                Some(prev) => g.concat_rows(&[prev, vv])?,
                None => vv,
            };
            state.keys[l] = Some(keys);
            state.values[l] = Some(values);
            let mut heads = Vec::with_capacity(c.n_heads);
            for hd in 0..c.n_heads {
                let qh = g.slice_cols(qv, hd * dh, dh)?;
                let kh = g.slice_cols(keys, hd * dh, dh)?;
                let vh = g.slice_cols(values, hd * dh, dh)?;
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, scale)?;
                let a = g.softmax_rows(s)?;
                heads.push(g.matmul(a, vh)?);
            }
            let cat = g.concat_cols(&heads)?;
            let att = self.linear(g, cat, v[a.wo], v[a.bo])?;
            let att = self.dropout(g, att, &mut dropout)?;
            h = g.add(h, att)?;

            let p = self.norm(g, h, v[li.ln2_gain], v[li.ln2_bias])?;
            let slot = state.layers.iter().position(|&k| k == l);
            let fast = slot.map(|s| (state.w[s], state.b[s]));
            let q = self.ffn(g, li, bound, p, fast)?;
            if slot.is_some() {
                ps.push(p);
                qs.push(q);
            }
            let q_drop = self.dropout(g, q, &mut dropout)?;
            h = g.add(h, q_drop)?;
        }
        let head = self.head(g, bound, h)?;
        let (y, aux, eta_logit) = self.split_head(g, head)?;
        state.t += 1;
        Ok(StepOutput {
            head,
            y,
            aux,
            eta_logit,
            p: ps,
            q: qs,
        })
    }

    /// Whole-sequence causal forward without a cache, with fixed fast
    /// weights (one `(w_l, b_l)` per plastic layer, or none). Returns the
    /// head output for every position, `T × (d_o + aux + 1)`. This is the
    /// reference the incremental decoder is checked against.
    pub fn forward_sequence(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        inputs: &[Tensor],
        fast: Option<&[(Tensor, Tensor)]>,
    ) -> Result<Var> {
        let c = &self.config;
        let t_len = inputs.len();
        if t_len == 0 {
            return Err(Error::Contract("empty input sequence".into()));
        }
        let mut data = Vec::with_capacity(t_len * c.input_dim);
        for x in inputs {
            if x.numel() != c.input_dim {
                return Err(Error::Contract(format!(
                    "input has {} features, model expects {}",
                    x.numel(),
                    c.input_dim
                )));
            }
            data.extend_from_slice(x.data());
        }
        let v = &bound.vars;
        let x = g.constant(Tensor::matrix(t_len, c.input_dim, data)?);
        let h = g.matmul(x, v[self.layout.embed_weight])?;
        let h = add_bias(g, h, v[self.layout.embed_bias])?;
        let pe = Tensor::from_fn(t_len, c.d_model, |t, j| positional(t, j, c.d_model));
        let mut h = g.add_const(h, &pe)?;
        let causal = Tensor::from_fn(t_len, t_len, |i, j| if j > i { MASKED } else { 0.0 });
        let dh = c.d_model / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let plastic = c.plastic_set();
        for (l, li) in self.layout.layers.iter().enumerate() {
            let a = &li.attn;
            let n1 = self.norm(g, h, v[li.ln1_gain], v[li.ln1_bias])?;
            let qv = self.linear(g, n1, v[a.wq], v[a.bq])?;
            let kv = self.linear(g, n1, v[a.wk], v[a.bk])?;
            let vv = self.linear(g, n1, v[a.wv], v[a.bv])?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for hd in 0..c.n_heads {
                let qh = g.slice_cols(qv, hd * dh, dh)?;
                let kh = g.slice_cols(kv, hd * dh, dh)?;
                let vh = g.slice_cols(vv, hd * dh, dh)?;
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, scale)?;
                let s = g.add_const(s, &causal)?;
                let a = g.softmax_rows(s)?;
                heads.push(g.matmul(a, vh)?);
            }
            let cat = g.concat_cols(&heads)?;
            let att = self.linear(g, cat, v[a.wo], v[a.bo])?;
            h = g.add(h, att)?;
            let p = self.norm(g, h, v[li.ln2_gain], v[li.ln2_bias])?;
            let fw = match (fast, plastic.iter().position(|&k| k == l)) {
                (Some(f), Some(s)) => {
                    let (w, b) = &f[s];
                    Some((g.constant(w.clone()), g.constant(b.clone())))
                }
                _ => None,
            };
            let q = self.ffn(g, li, bound, p, fw)?;
            h = g.add(h, q)?;
        }
        self.head(g, bound, h)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            seed,
            config: self.config.clone(),
            params: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&ck)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; returns the model and the seed it was built with.
    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        let mut model = Self::new(ck.config, ck.seed)?;
        if ck.params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, architecture expects {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        for (i, nt) in ck.params.into_iter().enumerate() {
            if nt.name != model.params.names[i] || nt.shape != model.params.tensors[i].shape() {
                return Err(Error::Config(format!("checkpoint tensor `{}` does not match the architecture", nt.name)));
            }
            model.params.tensors[i] = Tensor::new(nt.shape, nt.data)?;
        }
        Ok((model, ck.seed))
    }
}

fn add_bias(g: &mut Graph, x: Var, b: Var) -> crate::tensor::Result<Var> {
    if g.value(x).rows() == 1 {
        g.add(x, b)
    } else {
        g.add_row(x, b)
    }
}

fn positional(t: usize, j: usize, d: usize) -> f64 {
    let i = (j / 2) as f64;
    let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
    if j.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Sinusoidal positional encoding for position `t`.
pub fn positional_row(t: usize, d: usize) -> Tensor {
    Tensor::from_fn(1, d, |_, j| positional(t, j, d))
}
