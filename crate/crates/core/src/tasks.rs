//! Seeded episode generators for the four task families. Every generator
//! is a pure function of its configuration and seed.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{ClassificationConfig, CopyingConfig, CueRewardConfig, RegressionConfig, TaskConfig, TaskKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Information the model must store (symbols, revealed rewards, supports).
    Present,
    Delay,
    /// Positions where the model is scored.
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task: TaskKind,
    pub seed: u64,
    pub inputs: Vec<Tensor>,
    /// Zero rows where no target is defined.
    pub targets: Vec<Tensor>,
    pub loss_mask: Vec<bool>,
    pub phases: Vec<Phase>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.loss_mask.iter().enumerate().filter(|(_, &m)| m).map(|(t, _)| t)
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    fn new(task: TaskKind, seed: u64) -> Self {
        Self {
            task,
            seed,
            inputs: Vec::new(),
            targets: Vec::new(),
            loss_mask: Vec::new(),
            phases: Vec::new(),
        }
    }

    fn push(&mut self, input: Vec<f64>, target: Vec<f64>, phase: Phase) {
        self.inputs.push(Tensor::row(input));
        self.targets.push(Tensor::row(target));
        self.loss_mask.push(phase == Phase::Query);
        self.phases.push(phase);
    }
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// `n` symbols, `delay` blank steps, then `n` recall steps flagged by the
/// last input channel; the targets are the original symbols.
pub fn gen_copying(cfg: &CopyingConfig, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ep = Episode::new(TaskKind::Copying, seed);
    let v = cfg.vocab;
    let symbols: Vec<usize> = (0..cfg.n).map(|_| rng.random_range(0..v)).collect();
    for &s in &symbols {
        let mut x = one_hot(v + 1, s);
        x[v] = 0.0;
        ep.push(x, vec![0.0; v], Phase::Present);
    }
    for _ in 0..cfg.delay {
        ep.push(vec![0.0; v + 1], vec![0.0; v], Phase::Delay);
    }
    for &s in &symbols {
        ep.push(one_hot(v + 1, v), one_hot(v, s), Phase::Query);
    }
    ep
}

/// A reveal phase presenting (cue, reward) pairs followed by a query
/// phase presenting the cues alone; targets are the associated rewards.
pub fn gen_cue_reward(cfg: &CueRewardConfig, seed: u64) -> Result<Episode> {
    let reveal = cfg.episode_len / 2;
    if cfg.pairs == 0 || cfg.pairs > reveal {
        return Err(Error::Config(format!(
            "{} cue-reward pairs do not fit in {} reveal steps",
            cfg.pairs, reveal
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cues: Vec<Vec<f64>> = (0..cfg.pairs)
        .map(|_| (0..cfg.cue_dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let rewards: Vec<f64> = (0..cfg.pairs).map(|_| rng.random::<f64>()).collect();
    let mut order: Vec<usize> = (0..cfg.pairs).collect();
    order.shuffle(&mut rng);
    let mut ep = Episode::new(TaskKind::CueReward, seed);
    for s in 0..reveal {
        let k = order[s % cfg.pairs];
        let mut x = cues[k].clone();
        x.push(rewards[k]);
        x.push(1.0);
        ep.push(x, vec![0.0], Phase::Present);
    }
    for _ in reveal..cfg.episode_len {
        let k = rng.random_range(0..cfg.pairs);
        let mut x = cues[k].clone();
        x.push(0.0);
        x.push(0.0);
        ep.push(x, vec![rewards[k]], Phase::Query);
    }
    Ok(ep)
}

/// The hidden affine map behind a regression episode.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub w: Vec<f64>,
    pub b: f64,
}

/// Samples the affine map first, then the episode, from one stream; the
/// map is returned for oracle checks.
pub fn gen_regression_with_map(cfg: &RegressionConfig, seed: u64) -> (Episode, AffineMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let w: Vec<f64> = (0..cfg.input_dim).map(|_| cfg.weight_scale * normal(&mut rng)).collect();
    let b = cfg.weight_scale * normal(&mut rng);
    let f = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
    let mut ep = Episode::new(TaskKind::Regression, seed);
    for _ in 0..cfg.k_support {
        let x: Vec<f64> = (0..cfg.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = f(&x) + cfg.noise_sigma * normal(&mut rng);
        let mut input = x;
        input.push(y);
        input.push(1.0);
        ep.push(input, vec![0.0], Phase::Present);
    }
    for _ in 0..cfg.k_query {
        let x: Vec<f64> = (0..cfg.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = f(&x);
        let mut input = x;
        input.push(0.0);
        input.push(0.0);
        ep.push(input, vec![y], Phase::Query);
    }
    (ep, AffineMap { w, b })
}

/// Noisy support pairs `(x, w·x + b + ε)` then query inputs `x` with
/// noise-free targets.
pub fn gen_regression(cfg: &RegressionConfig, seed: u64) -> Episode {
    gen_regression_with_map(cfg, seed).0
}

/// Synthetic few-shot classification: one support token per (class, shot)
/// carrying an embedding and its one-hot label, then shuffled queries with
/// the label channel zeroed. Embeddings are `μ_c + noise·ε` rescaled to unit
/// per-coordinate variance.
pub fn gen_classification(cfg: &ClassificationConfig, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.embed_dim;
    let protos: Vec<Vec<f64>> = (0..cfg.ways)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let norm = 1.0 / (1.0 + cfg.noise * cfg.noise).sqrt();
    let sample = |c: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        protos[c]
            .iter()
            .map(|&m| {
                let e: f64 = StandardNormal.sample(rng);
                (m + cfg.noise * e) * norm
            })
            .collect()
    };
    let mut support: Vec<usize> = (0..cfg.ways).flat_map(|c| std::iter::repeat_n(c, cfg.shots)).collect();
    support.shuffle(&mut rng);
    let mut ep = Episode::new(TaskKind::Classification, seed);
    for &c in &support {
        let mut x = sample(c, &mut rng);
        x.extend(one_hot(cfg.ways, c));
        ep.push(x, vec![0.0; cfg.ways], Phase::Present);
    }
    let mut queries: Vec<usize> = (0..cfg.ways)
        .flat_map(|c| std::iter::repeat_n(c, cfg.queries_per_class))
        .collect();
    queries.shuffle(&mut rng);
    for &c in &queries {
        let mut x = sample(c, &mut rng);
        x.extend(vec![0.0; cfg.ways]);
        ep.push(x, one_hot(cfg.ways, c), Phase::Query);
    }
    ep
}

pub fn generate(task: TaskKind, cfg: &TaskConfig, seed: u64) -> Result<Episode> {
    Ok(match task {
        TaskKind::Copying => gen_copying(&cfg.copying, seed),
        TaskKind::CueReward => gen_cue_reward(&cfg.cue_reward, seed)?,
        TaskKind::Regression => gen_regression(&cfg.regression, seed),
        TaskKind::Classification => gen_classification(&cfg.classification, seed),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Per-episode seed derived from a run seed, split and index
/// (splitmix64 finaliser over the combined key).
pub fn episode_seed(run_seed: u64, split: Split, index: usize) -> u64 {
    let tag: u64 = match split {
        Split::Train => 0x5452_4149_4e00_0000,
        Split::Validation => 0x5641_4c49_4400_0000,
    };
    let mut z = run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag)
        .wrapping_add(index as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A fixed set of `n` episodes for one split.
pub fn dataset(task: TaskKind, cfg: &TaskConfig, run_seed: u64, split: Split, n: usize) -> Result<Vec<Episode>> {
    (0..n)
        .map(|i| generate(task, cfg, episode_seed(run_seed, split, i)))
        .collect()
}

/// Writes one JSON object per line.
pub fn dump_jsonl(episodes: &[Episode], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Episode>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Accuracy of the nearest-support-embedding classifier on an episode's
/// queries (squared Euclidean distance to each class's mean support).
pub fn nearest_centroid_accuracy(ep: &Episode, ways: usize) -> f64 {
    let d = ep.inputs[0].numel() - ways;
    let mut centroids = vec![vec![0.0; d]; ways];
    let mut counts = vec![0usize; ways];
    for (x, ph) in ep.inputs.iter().zip(&ep.phases) {
        if *ph != Phase::Present {
            continue;
        }
        let xd = x.data();
        let c = (0..ways).find(|&k| xd[d + k] == 1.0).expect("support carries a label");
        for j in 0..d {
            centroids[c][j] += xd[j];
        }
        counts[c] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= *n as f64;
        }
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for t in ep.masked_positions() {
        let xd = ep.inputs[t].data();
        let best = (0..ways)
            .map(|c| {
                let dist: f64 = (0..d).map(|j| (xd[j] - centroids[c][j]).powi(2)).sum();
                (c, dist)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .unwrap_or(0);
        let target = ep.targets[t].data();
        if target[best] == 1.0 {
            correct += 1;
        }
        total += 1;
    }
    correct as f64 / total as f64
}
