//! Run configuration: model, plasticity rule, task and training settings,
//! with layered TOML files and dotted-path overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    None,
    Hebbian,
    Gradient,
}

impl Rule {
    pub const ALL: [Rule; 3] = [Rule::Gradient, Rule::Hebbian, Rule::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Rule::None => "none",
            Rule::Hebbian => "hebbian",
            Rule::Gradient => "gradient",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Rule::None),
            "hebbian" => Ok(Rule::Hebbian),
            "gradient" => Ok(Rule::Gradient),
            other => Err(Error::Config(format!(
                "unknown rule `{other}` (expected none, hebbian or gradient)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerGradMode {
    /// Inner gradients stay on the tape; the outer loop differentiates
    /// through them.
    SecondOrder,
    /// Inner gradients are detached constants in the outer pass.
    FirstOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copying,
    CueReward,
    Regression,
    Classification,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Copying,
        TaskKind::CueReward,
        TaskKind::Regression,
        TaskKind::Classification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copying => "copying",
            TaskKind::CueReward => "cue_reward",
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        }
    }

    /// Discrete targets use softmax cross-entropy, continuous ones squared error.
    pub fn is_discrete(self) -> bool {
        matches!(self, TaskKind::Copying | TaskKind::Classification)
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Copying => "recall_accuracy",
            TaskKind::CueReward => "query_loss",
            TaskKind::Regression => "query_mse",
            TaskKind::Classification => "accuracy",
        }
    }

    /// Whether larger values of the task metric are better.
    pub fn higher_is_better(self) -> bool {
        self.is_discrete()
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copying" => Ok(TaskKind::Copying),
            "cue_reward" | "cue-reward" => Ok(TaskKind::CueReward),
            "regression" => Ok(TaskKind::Regression),
            "classification" => Ok(TaskKind::Classification),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub aux_dim: usize,
    pub dropout: f64,
    /// Indices of the layers whose FFN carries fast weights.
    pub plastic_layers: Vec<usize>,
    pub rule: Rule,
    pub eta0: f64,
    pub max_norm: f64,
    pub inner_grad_mode: InnerGradMode,
    pub layer_norm_eps: f64,
    /// Initial plasticity rates are drawn uniformly from `[0, 2·alpha_init]`.
    pub alpha_init: f64,
    /// Test hook: negates the Hebbian increment so oracle checks can be
    /// shown to catch a corrupted rule.
    #[serde(default)]
    pub flip_hebbian_sign: bool,
}

impl ModelConfig {
    /// Desk-scale defaults for the low-dimensional sequence tasks.
    pub fn compact(rule: Rule) -> Self {
        Self {
            d_model: 128,
            d_ff: 256,
            n_heads: 4,
            n_layers: 2,
            input_dim: 1,
            output_dim: 1,
            aux_dim: 4,
            dropout: 0.1,
            plastic_layers: vec![0, 1],
            rule,
            eta0: 0.2,
            max_norm: 1.0,
            inner_grad_mode: InnerGradMode::SecondOrder,
            layer_norm_eps: 1e-5,
            alpha_init: 0.1,
            flip_hebbian_sign: false,
        }
    }

    /// Widened configuration used for episodic classification.
    pub fn wide(rule: Rule) -> Self {
        Self {
            d_model: 256,
            d_ff: 512,
            ..Self::compact(rule)
        }
    }

    /// A model small enough for exhaustive finite-difference checks.
    pub fn tiny(rule: Rule, input_dim: usize, output_dim: usize) -> Self {
        Self {
            d_model: 4,
            d_ff: 4,
            n_heads: 2,
            n_layers: 1,
            input_dim,
            output_dim,
            aux_dim: 2,
            dropout: 0.0,
            plastic_layers: vec![0],
            rule,
            eta0: 0.2,
            max_norm: 1.0,
            inner_grad_mode: InnerGradMode::SecondOrder,
            layer_norm_eps: 1e-5,
            alpha_init: 0.5,
            flip_hebbian_sign: false,
        }
    }

    /// Width of the output head: prediction, auxiliary outputs, gate logit.
    pub fn head_width(&self) -> usize {
        self.output_dim + self.aux_dim + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must lie in [0, 1)".into()));
        }
        if self.eta0 < 0.0 || !self.eta0.is_finite() {
            return Err(Error::Config("model.eta0 must be ≥ 0".into()));
        }
        if self.max_norm <= 0.0 || !self.max_norm.is_finite() {
            return Err(Error::Config("model.max_norm must be > 0".into()));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("model.layer_norm_eps must be > 0".into()));
        }
        let mut seen = vec![false; self.n_layers];
        for &l in &self.plastic_layers {
            if l >= self.n_layers {
                return Err(Error::Config(format!(
                    "model.plastic_layers contains {l} but the model has {} layers",
                    self.n_layers
                )));
            }
            if std::mem::replace(&mut seen[l], true) {
                return Err(Error::Config(format!("model.plastic_layers repeats {l}")));
            }
        }
        Ok(())
    }

    /// Plastic layer indices in ascending order.
    pub fn plastic_set(&self) -> Vec<usize> {
        let mut s = self.plastic_layers.clone();
        s.sort_unstable();
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopyingConfig {
    pub n: usize,
    pub delay: usize,
    pub vocab: usize,
    pub dataset_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CueRewardConfig {
    pub pairs: usize,
    pub cue_dim: usize,
    pub episode_len: usize,
    pub dataset_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    pub input_dim: usize,
    pub k_support: usize,
    pub k_query: usize,
    pub weight_scale: f64,
    pub noise_sigma: f64,
    pub dataset_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub embed_dim: usize,
    /// Per-coordinate standard deviation of the sample noise around each
    /// class prototype (prototypes have unit per-coordinate variance).
    pub noise: f64,
    pub train_episodes: usize,
    pub val_episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub copying: CopyingConfig,
    pub cue_reward: CueRewardConfig,
    pub regression: RegressionConfig,
    pub classification: ClassificationConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            copying: CopyingConfig {
                n: 5,
                delay: 20,
                vocab: 10,
                dataset_size: 50,
            },
            cue_reward: CueRewardConfig {
                pairs: 8,
                cue_dim: 20,
                episode_len: 20,
                dataset_size: 100,
            },
            regression: RegressionConfig {
                input_dim: 3,
                k_support: 10,
                k_query: 10,
                weight_scale: 1.0,
                noise_sigma: 0.1,
                dataset_size: 150,
            },
            classification: ClassificationConfig {
                ways: 5,
                shots: 1,
                queries_per_class: 15,
                embed_dim: 256,
                noise: 5.0,
                train_episodes: 80,
                val_episodes: 50,
            },
        }
    }
}

impl TaskConfig {
    /// Width of one input token for the given task.
    pub fn input_dim(&self, task: TaskKind) -> usize {
        match task {
            // one-hot symbol + recall indicator
            TaskKind::Copying => self.copying.vocab + 1,
            // cue + reward + reveal flag
            TaskKind::CueReward => self.cue_reward.cue_dim + 2,
            // x + y + support flag
            TaskKind::Regression => self.regression.input_dim + 2,
            // embedding + label channel
            TaskKind::Classification => self.classification.embed_dim + self.classification.ways,
        }
    }

    pub fn output_dim(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Copying => self.copying.vocab,
            TaskKind::CueReward | TaskKind::Regression => 1,
            TaskKind::Classification => self.classification.ways,
        }
    }

    pub fn train_size(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Copying => self.copying.dataset_size,
            TaskKind::CueReward => self.cue_reward.dataset_size,
            TaskKind::Regression => self.regression.dataset_size,
            TaskKind::Classification => self.classification.train_episodes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.copying;
        if c.n == 0 || c.vocab < 2 || c.dataset_size == 0 {
            return Err(Error::Config("tasks.copying needs n ≥ 1, vocab ≥ 2, dataset_size ≥ 1".into()));
        }
        let r = &self.cue_reward;
        if r.pairs == 0 || r.cue_dim == 0 || r.episode_len < 2 || r.dataset_size == 0 {
            return Err(Error::Config("tasks.cue_reward counts must be positive and episode_len ≥ 2".into()));
        }
        if r.pairs > r.episode_len / 2 {
            return Err(Error::Config(format!(
                "tasks.cue_reward: {} pairs do not fit in {} reveal steps",
                r.pairs,
                r.episode_len / 2
            )));
        }
        let g = &self.regression;
        if g.input_dim == 0 || g.k_support == 0 || g.k_query == 0 || g.dataset_size == 0 {
            return Err(Error::Config("tasks.regression counts must be positive".into()));
        }
        if g.noise_sigma < 0.0 || g.weight_scale < 0.0 {
            return Err(Error::Config("tasks.regression scales must be ≥ 0".into()));
        }
        let k = &self.classification;
        if k.ways == 0 || k.shots == 0 || k.queries_per_class == 0 || k.train_episodes == 0 || k.val_episodes == 0 {
            return Err(Error::Config("tasks.classification counts must be positive".into()));
        }
        if k.ways > k.embed_dim {
            return Err(Error::Config("tasks.classification.ways must not exceed embed_dim".into()));
        }
        if k.noise < 0.0 {
            return Err(Error::Config("tasks.classification.noise must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Training episodes per epoch (cycled from the fixed training set).
    pub episodes_per_epoch: usize,
    pub val_episodes: usize,
    /// Validate every this many training episodes; 0 means end of epoch only.
    pub val_every: usize,
    /// Episodes whose gradients are summed before one outer step.
    pub accumulate: usize,
    /// Cut the fast-weight recursion from the outer gradient every this many
    /// steps; 0 keeps full backpropagation through the episode.
    pub truncate: usize,
    /// Keep every k-th per-step trace point.
    pub trace_every: usize,
    /// Abort on any non-finite intermediate.
    pub checked: bool,
}

impl TrainConfig {
    pub fn for_task(task: TaskKind) -> Self {
        let (epochs, per_epoch, val_every, wd) = match task {
            TaskKind::Copying => (2, 50, 0, 1e-4),
            TaskKind::CueReward => (4, 100, 0, 1e-4),
            TaskKind::Regression => (5, 150, 20, 1e-4),
            TaskKind::Classification => (5, 80, 50, 5e-4),
        };
        Self {
            learning_rate: 1e-3,
            weight_decay: wd,
            grad_clip: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs,
            episodes_per_epoch: per_epoch,
            val_episodes: 50,
            val_every,
            accumulate: 1,
            truncate: 0,
            trace_every: 1,
            checked: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("train.learning_rate and train.grad_clip must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("train.beta1/beta2 must lie in [0, 1) and adam_eps > 0".into()));
        }
        if self.epochs == 0 || self.episodes_per_epoch == 0 || self.val_episodes == 0 {
            return Err(Error::Config("train.epochs, episodes_per_epoch and val_episodes must be positive".into()));
        }
        if self.accumulate == 0 || self.trace_every == 0 {
            return Err(Error::Config("train.accumulate and train.trace_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub model: ModelConfig,
    pub tasks: TaskConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(task: TaskKind, rule: Rule, seed: u64) -> Self {
        let model = match task {
            TaskKind::Classification => ModelConfig::wide(rule),
            _ => ModelConfig::compact(rule),
        };
        let mut cfg = Self {
            task,
            seed,
            model,
            tasks: TaskConfig::default(),
            train: TrainConfig::for_task(task),
        };
        if task == TaskKind::Classification {
            cfg.train.val_episodes = cfg.tasks.classification.val_episodes;
        }
        cfg.sync_dims();
        cfg
    }

    /// Derives the model's token and output widths from the task settings.
    pub fn sync_dims(&mut self) {
        self.model.input_dim = self.tasks.input_dim(self.task);
        self.model.output_dim = self.tasks.output_dim(self.task);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tasks.validate()?;
        self.train.validate()?;
        if self.model.input_dim != self.tasks.input_dim(self.task)
            || self.model.output_dim != self.tasks.output_dim(self.task)
        {
            return Err(Error::Config(format!(
                "model dims {}→{} do not match task {} ({}→{})",
                self.model.input_dim,
                self.model.output_dim,
                self.task,
                self.tasks.input_dim(self.task),
                self.tasks.output_dim(self.task)
            )));
        }
        Ok(())
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// SHA-256 of the canonical (key-sorted) JSON form with the seed
    /// removed, so runs that differ only by seed share a hash.
    pub fn hash(&self) -> String {
        let mut v = self.to_json_value();
        if let Some(obj) = v.as_object_mut() {
            obj.remove("seed");
        }
        canonical_hash(&v)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// Layers TOML files over `self` and then applies `key=value` overrides.
    /// Every key in a file or override must already exist in the config.
    pub fn layered(
        self,
        files: &[impl AsRef<Path>],
        overrides: &[(String, String)],
    ) -> Result<RunConfig> {
        let mut root = toml::Value::try_from(&self)
            .map_err(|e| Error::Config(format!("serialising base config: {e}")))?;
        for file in files {
            let path = file.as_ref();
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let layer: toml::Value = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut root, layer, &mut Vec::new())
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        let mut touched_dims = false;
        for (key, value) in overrides {
            set_path(&mut root, key, value)?;
            touched_dims |= key == "model.input_dim" || key == "model.output_dim";
        }
        let mut cfg: RunConfig = root
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        if !touched_dims {
            cfg.sync_dims();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn canonical_hash(v: &serde_json::Value) -> String {
    // serde_json maps are ordered by key, so this rendering is canonical
    let text = serde_json::to_string(v).expect("json renders");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut toml::Value, layer: toml::Value, path: &mut Vec<String>) -> std::result::Result<(), String> {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                path.push(k.clone());
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, path)?,
                    None => return Err(format!("unknown config key `{}`", path.join("."))),
                }
                path.pop();
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set_path(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{}` is not a table", parts[..i].join("."))))?;
        cur = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    *cur = parsed;
    Ok(())
}

/// Parses `key=value` into its two halves.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_task() {
        for task in TaskKind::ALL {
            for rule in Rule::ALL {
                RunConfig::new(task, rule, 3000).validate().unwrap();
            }
        }
    }

    #[test]
    fn override_reaches_nested_keys() {
        let cfg = RunConfig::new(TaskKind::Copying, Rule::Gradient, 1)
            .layered(&[] as &[&str], &[("model.aux_dim".into(), "0".into())])
            .unwrap();
        assert_eq!(cfg.model.aux_dim, 0);
        let cfg = RunConfig::new(TaskKind::Copying, Rule::Gradient, 1)
            .layered(&[] as &[&str], &[("model.inner_grad_mode".into(), "first_order".into())])
            .unwrap();
        assert_eq!(cfg.model.inner_grad_mode, InnerGradMode::FirstOrder);
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        let err = RunConfig::new(TaskKind::Copying, Rule::Gradient, 1)
            .layered(&[] as &[&str], &[("model.nope".into(), "1".into())])
            .unwrap_err();
        assert!(err.to_string().contains("model.nope"));
    }

    #[test]
    fn task_changes_propagate_to_model_dims() {
        let cfg = RunConfig::new(TaskKind::Copying, Rule::None, 1)
            .layered(&[] as &[&str], &[("tasks.copying.vocab".into(), "4".into())])
            .unwrap();
        assert_eq!(cfg.model.input_dim, 5);
        assert_eq!(cfg.model.output_dim, 4);
    }

    #[test]
    fn file_layers_merge_and_reject_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.toml");
        std::fs::write(&good, "[train]\nepochs = 7\n[model]\neta0 = 0.0\n").unwrap();
        let cfg = RunConfig::new(TaskKind::Regression, Rule::Hebbian, 1)
            .layered(&[&good], &[])
            .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.eta0, 0.0);
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "[train]\nepoch = 7\n").unwrap();
        assert!(RunConfig::new(TaskKind::Regression, Rule::Hebbian, 1)
            .layered(&[&bad], &[])
            .is_err());
    }

    #[test]
    fn hash_ignores_seed_and_key_order() {
        let a = RunConfig::new(TaskKind::Copying, Rule::Hebbian, 3000);
        let b = RunConfig::new(TaskKind::Copying, Rule::Hebbian, 3001);
        assert_eq!(a.hash(), b.hash());
        let v1: serde_json::Value = serde_json::from_str(r#"{"a":1,"b":{"c":2,"d":3}}"#).unwrap();
        let v2: serde_json::Value = serde_json::from_str(r#"{"b":{"d":3,"c":2},"a":1}"#).unwrap();
        assert_eq!(canonical_hash(&v1), canonical_hash(&v2));
        let c = RunConfig::new(TaskKind::Copying, Rule::Gradient, 3000);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut m = ModelConfig::compact(Rule::None);
        m.n_heads = 3;
        assert!(m.validate().is_err());
    }

    #[test]
    fn cue_pairs_beyond_capacity_rejected() {
        let mut t = TaskConfig::default();
        t.cue_reward.pairs = 11;
        assert!(t.validate().is_err());
    }

    #[test]
    fn unknown_rule_string() {
        assert!("sgd".parse::<Rule>().is_err());
        assert_eq!("hebbian".parse::<Rule>().unwrap(), Rule::Hebbian);
    }
}
