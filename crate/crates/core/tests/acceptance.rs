//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Select criteria with `PLASTICFORMER_ACCEPTANCE=1,2,3`; all run by default.
//!
//! Correctness criteria (oracles, equivalences, determinism) fail the process.
//! Empirical criteria compare trained models at desk scale; their FAIL lines
//! are printed but only fail the process when
//! `PLASTICFORMER_ACCEPTANCE_STRICT=1` is set.

use std::collections::BTreeMap;
use std::time::Instant;

use plasticformer::config::{CopyingConfig, Rule, RunConfig, TaskKind};
use plasticformer::diagnostics::{mean_std, pooled_std, RunRecord};
use plasticformer::meta_train::{datasets, run_episode, train, EpisodeOptions, TrainOutput};
use plasticformer::model::PlasticTransformer;
use plasticformer::oracle::{
    check_inner_gradients, check_recursion, eta_bound_fuzzer, finite_difference_outer, tiny_run_config, FD_EPSILON,
};
use plasticformer::tasks::gen_copying;
use plasticformer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [3000, 3001, 3002];
const RECURSION_TOL: f64 = 1e-10;
const INNER_GRAD_TOL: f64 = 1e-6;
const OUTER_GRAD_TOL: f64 = 1e-3;
const GATE_SAMPLES: usize = 100_000;
const ETA_RATIO: f64 = 10.0;
/// Mean square of a uniform [0, 1] reward: the error of predicting zero.
const CONSTANT_PREDICTION_MSE: f64 = 1.0 / 3.0;
/// Variance of a uniform [0, 1] reward: the error of predicting its mean.
const MEAN_PREDICTION_MSE: f64 = 1.0 / 12.0;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Trained runs shared between criteria.
#[derive(Default)]
struct Runs {
    done: BTreeMap<(TaskKind, Rule, u64, String), TrainOutput>,
}

impl Runs {
    fn get(&mut self, cfg: &RunConfig, tag: &str) -> &TrainOutput {
        let key = (cfg.task, cfg.model.rule, cfg.seed, tag.to_string());
        self.done.entry(key).or_insert_with(|| {
            let t = Instant::now();
            let out = train(cfg).unwrap_or_else(|e| panic!("{}/{}/{}: {e}", cfg.task, cfg.model.rule, cfg.seed));
            let s = out.record.summary.as_ref().expect("validation result");
            println!(
                "      run {}/{}/{}{}: loss {:.4}, {} {:.4}, mean η {:.3e} ({:.0}s)",
                cfg.task,
                cfg.model.rule,
                cfg.seed,
                if tag.is_empty() { String::new() } else { format!(" [{tag}]") },
                s.loss,
                cfg.task.metric_name(),
                s.metric,
                s.mean_eta,
                t.elapsed().as_secs_f64()
            );
            out
        })
    }

    fn records(&mut self, task: TaskKind, rule: Rule, tag: &str, tweak: impl Fn(&mut RunConfig)) -> Vec<RunRecord> {
        SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = RunConfig::new(task, rule, seed);
                tweak(&mut cfg);
                self.get(&cfg, tag).record.clone()
            })
            .collect()
    }
}

fn summary_values(records: &[RunRecord], pick: impl Fn(&RunRecord) -> f64) -> (f64, f64, Vec<f64>) {
    let xs: Vec<f64> = records.iter().map(pick).collect();
    let (m, s) = mean_std(&xs);
    (m, s, xs)
}

fn metric(r: &RunRecord) -> f64 {
    r.summary.as_ref().expect("validation result").metric
}

fn loss(r: &RunRecord) -> f64 {
    r.summary.as_ref().expect("validation result").loss
}

fn eta(r: &RunRecord) -> f64 {
    r.summary.as_ref().expect("validation result").mean_eta
}

// ── criteria ────────────────────────────────────────────────────────────

fn static_equivalence(_: &mut Runs) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for task in TaskKind::ALL {
        let mut cfg = RunConfig::new(task, Rule::None, 3000);
        cfg.train.epochs = 1;
        cfg.train.episodes_per_epoch = 3;
        cfg.train.val_episodes = 3;
        cfg.train.val_every = 0;
        cfg.tasks.classification.val_episodes = 3;
        let out = train(&cfg).expect("rule=none training");
        let trace_zero = out.trace.iter().all(|r| r.eta == 0.0 && r.norms.iter().all(|&n| n == 0.0));
        let (_, val) = datasets(&cfg).expect("datasets");
        let mut bitwise = true;
        let mut steps = 0;
        for ep in &val {
            let plain = run_episode(&out.model, ep, EpisodeOptions::eval()).expect("episode");
            let ablated = run_episode(
                &out.model,
                ep,
                EpisodeOptions {
                    ablated: true,
                    ..EpisodeOptions::eval()
                },
            )
            .expect("ablated episode");
            bitwise &= plain.outputs.len() == ablated.outputs.len()
                && plain
                    .outputs
                    .iter()
                    .zip(&ablated.outputs)
                    .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            bitwise &= plain.trace.iter().all(|p| p.eta == 0.0 && p.norms.iter().all(|&n| n == 0.0));
            steps += plain.outputs.len();
        }
        ok &= trace_zero && bitwise;
        notes.push(format!(
            "{task}: {} training steps zero-norm {}, {steps} eval steps bitwise {}",
            out.trace.len(),
            trace_zero,
            bitwise
        ));
    }
    Outcome::new(ok, notes.join("; "))
}

fn gate_fuzz(_: &mut Runs) -> Outcome {
    let r = eta_bound_fuzzer(GATE_SAMPLES, 3000);
    Outcome::new(r.pass, r.detail)
}

fn recursion(_: &mut Runs) -> Outcome {
    let long = CopyingConfig {
        n: 3,
        delay: 2,
        vocab: 3,
        dataset_size: 1,
    };
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for rule in [Rule::Hebbian, Rule::Gradient] {
        for seed in 0..10u64 {
            let cfg = tiny_run_config(rule, seed);
            let model = PlasticTransformer::new(cfg.model, seed).expect("tiny model");
            let ep = gen_copying(&long, 100 + seed);
            let r = check_recursion(&model, &ep, seed).expect("recursion oracle");
            worst = worst.max(r.max_deviation);
            checks += 1;
        }
    }
    Outcome::new(
        worst < RECURSION_TOL,
        format!("{checks} episodes of 8 steps, both rules; max abs deviation {worst:.3e} (< {RECURSION_TOL:e})"),
    )
}

fn inner_gradients(_: &mut Runs) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut cfg = tiny_run_config(Rule::Gradient, seed);
        if seed % 2 == 1 {
            // a two-wide toy network as well as the four-wide one
            cfg.model.d_model = 2;
            cfg.model.d_ff = 2;
            cfg.model.n_heads = 1;
        }
        let model = PlasticTransformer::new(cfg.model.clone(), seed).expect("toy model");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model.d_model;
        let mut r = |rows, cols| Tensor::from_fn(rows, cols, |_, _| rng.random_range(-0.5..0.5));
        let fast = vec![(r(d, d), r(1, d))];
        let inputs: Vec<Tensor> = (0..3).map(|_| r(1, cfg.model.input_dim)).collect();
        let rep = check_inner_gradients(&model, &inputs, &fast, FD_EPSILON, seed).expect("inner gradient check");
        worst = worst.max(rep.max_deviation);
    }
    Outcome::new(
        worst < INNER_GRAD_TOL,
        format!("5 toy networks; max relative error {worst:.3e} (< {INNER_GRAD_TOL:e})"),
    )
}

fn outer_gradients(_: &mut Runs) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for rule in [Rule::Hebbian, Rule::Gradient] {
        let mut worst: f64 = 0.0;
        for seed in 0..3u64 {
            let cfg = tiny_run_config(rule, seed);
            let model = PlasticTransformer::new(cfg.model.clone(), seed).expect("tiny model");
            let ep = gen_copying(&cfg.tasks.copying, 200 + seed);
            assert_eq!(ep.len(), 4);
            let r = finite_difference_outer(&model, &ep, FD_EPSILON, seed).expect("outer check");
            worst = worst.max(r.max_deviation);
        }
        ok &= worst < OUTER_GRAD_TOL;
        notes.push(format!("{rule} max relative error {worst:.3e}"));
    }
    Outcome::new(ok, format!("T=4, second order, 3 seeds: {} (< {OUTER_GRAD_TOL:e})", notes.join(", ")))
}

fn regression_direction(runs: &mut Runs) -> Outcome {
    let mut records = Vec::new();
    for rule in Rule::ALL {
        records.extend(runs.records(TaskKind::Regression, rule, "", |_| {}));
    }
    let by_rule = |rule: Rule| -> Vec<RunRecord> { records.iter().filter(|r| r.rule == rule).cloned().collect() };
    let (hm, hs, _) = summary_values(&by_rule(Rule::Hebbian), metric);
    let (gm, gs, _) = summary_values(&by_rule(Rule::Gradient), metric);
    let (nm, ns, _) = summary_values(&by_rule(Rule::None), metric);
    let pooled = pooled_std(hs, 3, ns, 3);
    let gap = nm - hm;
    Outcome::new(
        hm < nm && gm < nm && gap > pooled,
        format!(
            "query MSE hebbian {hm:.4}±{hs:.4}, gradient {gm:.4}±{gs:.4}, none {nm:.4}±{ns:.4}; none−hebbian {gap:.4} vs pooled std {pooled:.4}"
        ),
    )
}

fn copying_runs(runs: &mut Runs) -> BTreeMap<Rule, Vec<RunRecord>> {
    Rule::ALL
        .iter()
        .map(|&rule| (rule, runs.records(TaskKind::Copying, rule, "", |_| {})))
        .collect()
}

fn copying_direction(runs: &mut Runs) -> Outcome {
    let recs = copying_runs(runs);
    let stat = |rule: Rule, f: fn(&RunRecord) -> f64| summary_values(&recs[&rule], f);
    let (gl, gls, _) = stat(Rule::Gradient, loss);
    let (hl, hls, _) = stat(Rule::Hebbian, loss);
    let (nl, nls, _) = stat(Rule::None, loss);
    let (ga, _, _) = stat(Rule::Gradient, metric);
    let (ha, _, _) = stat(Rule::Hebbian, metric);
    let (na, _, _) = stat(Rule::None, metric);
    let ordering = ga >= ha && ha >= na;
    Outcome::new(
        gl <= nl && hl <= nl,
        format!(
            "validation loss gradient {gl:.4}±{gls:.4}, hebbian {hl:.4}±{hls:.4}, none {nl:.4}±{nls:.4}; recall gradient {ga:.3}, hebbian {ha:.3}, none {na:.3} (ordering gradient ≥ hebbian ≥ none {}; informational)",
            if ordering { "holds" } else { "does not hold" }
        ),
    )
}

fn eta_signature(runs: &mut Runs) -> Outcome {
    let recs = copying_runs(runs);
    let mut ratios = Vec::new();
    for (g, h) in recs[&Rule::Gradient].iter().zip(&recs[&Rule::Hebbian]) {
        assert_eq!(g.seed, h.seed);
        ratios.push((g.seed, eta(g), eta(h)));
    }
    let ok = ratios.iter().all(|&(_, g, h)| g >= ETA_RATIO * h);
    let detail = ratios
        .iter()
        .map(|(s, g, h)| format!("seed {s}: gradient {g:.3e} / hebbian {h:.3e} = {:.1}×", g / h))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(ok, format!("{detail} (need ≥ {ETA_RATIO}× on every seed)"))
}

/// Shortened classification schedule for the ablation comparison.
fn classification_budget(cfg: &mut RunConfig) {
    cfg.train.epochs = 2;
    cfg.train.episodes_per_epoch = 40;
    cfg.train.val_every = 0;
    cfg.tasks.classification.val_episodes = 25;
    cfg.train.val_episodes = 25;
}

fn frozen_gate_ablation(runs: &mut Runs) -> Outcome {
    let frozen = runs.records(TaskKind::Classification, Rule::Hebbian, "eta0=0", |c| {
        classification_budget(c);
        c.model.eta0 = 0.0;
    });
    let none = runs.records(TaskKind::Classification, Rule::None, "", classification_budget);
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, f) in [("accuracy", metric as fn(&RunRecord) -> f64), ("loss", loss)] {
        let (fm, fs, _) = summary_values(&frozen, f);
        let (nm, ns, _) = summary_values(&none, f);
        let pooled = pooled_std(fs, 3, ns, 3);
        let diff = (fm - nm).abs();
        ok &= diff < pooled;
        notes.push(format!(
            "{name} η0=0 {fm:.4}±{fs:.4} vs none {nm:.4}±{ns:.4}, |diff| {diff:.3e} vs pooled std {pooled:.3e}"
        ));
    }
    let max_eta = frozen.iter().map(eta).fold(0.0, f64::max);
    ok &= max_eta == 0.0;
    Outcome::new(ok, format!("{}; max η {max_eta:e}", notes.join("; ")))
}

fn determinism(runs: &mut Runs) -> Outcome {
    let cfg = RunConfig::new(TaskKind::Copying, Rule::Hebbian, 3000);
    let first = runs.get(&cfg, "").record.without_wall_clock().to_json().expect("json");
    let again = train(&cfg).expect("repeat run");
    let second = again.record.without_wall_clock().to_json().expect("json");
    let cfg = RunConfig::new(TaskKind::Copying, Rule::Gradient, 3001);
    let g1 = runs.get(&cfg, "").record.without_wall_clock().to_json().expect("json");
    let g2 = train(&cfg).expect("repeat run").record.without_wall_clock().to_json().expect("json");
    Outcome::new(
        first == second && g1 == g2,
        format!(
            "copying hebbian/3000 {} bytes identical: {}; copying gradient/3001 {} bytes identical: {}",
            first.len(),
            first == second,
            g1.len(),
            g1 == g2
        ),
    )
}

fn cue_reward_sanity(runs: &mut Runs) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for rule in Rule::ALL {
        let recs = runs.records(TaskKind::CueReward, rule, "", |_| {});
        let (m, s, _) = summary_values(&recs, metric);
        ok &= m < CONSTANT_PREDICTION_MSE;
        notes.push(format!("{rule} {m:.4}±{s:.4}"));
    }
    Outcome::new(
        ok,
        format!(
            "query MSE {} (bound {CONSTANT_PREDICTION_MSE:.4}; predicting the mean reward would score {MEAN_PREDICTION_MSE:.4})",
            notes.join(", ")
        ),
    )
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Correctness,
    Empirical,
}

type Criterion = (u32, Kind, &'static str, fn(&mut Runs) -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, Kind::Correctness, "static equivalence of rule=none", static_equivalence),
    (2, Kind::Correctness, "gate bound fuzz", gate_fuzz),
    (3, Kind::Correctness, "fast-weight recursion oracle", recursion),
    (4, Kind::Correctness, "inner-gradient correctness", inner_gradients),
    (5, Kind::Correctness, "outer-gradient correctness", outer_gradients),
    (6, Kind::Empirical, "regression: plastic rules beat none", regression_direction),
    (7, Kind::Empirical, "copying: plastic loss ≤ none", copying_direction),
    (8, Kind::Empirical, "copying: gradient η ≥ 10× hebbian η", eta_signature),
    (9, Kind::Correctness, "classification: η0=0 indistinguishable from none", frozen_gate_ablation),
    (10, Kind::Correctness, "determinism of run records", determinism),
    (11, Kind::Empirical, "cue-reward: all rules below constant prediction", cue_reward_sanity),
];

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("PLASTICFORMER_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut runs = Runs::default();
    let strict = std::env::var("PLASTICFORMER_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    let mut fatal = false;
    let start = Instant::now();
    for (id, kind, name, check) in CRITERIA {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let o = check(&mut runs);
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "[{status}] {id:>2} {name} — {} ({:.1}s)",
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(id);
            fatal |= strict || kind == Kind::Correctness;
        }
    }
    println!("acceptance finished in {:.0}s", start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
    }
    if fatal {
        std::process::exit(1);
    }
}
