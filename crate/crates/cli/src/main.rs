//! `plasticformer` — train, evaluate, ablate, check and report.
//!
//! Exit status: 0 success, 1 run failure, 2 configuration or usage error,
//! 3 oracle failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use plasticformer::config::{parse_override, Rule, RunConfig, TaskKind};
use plasticformer::diagnostics::{
    aggregate, export_plot_data, find_records, report_dir, run_dir, write_atomic, PlotKind, RunRecord, TraceRow,
};
use plasticformer::error::{Error, Result};
use plasticformer::meta_train::{datasets, evaluate, train_with};
use plasticformer::model::PlasticTransformer;
use plasticformer::oracle::{tiny_run_config, tiny_suite, write_reports};

const OUT_ENV: &str = "PLASTICFORMER_OUT";
const CHECKPOINT: &str = "model.json";

#[derive(Parser)]
#[command(name = "plasticformer", version, about = "Fast-weight plastic Transformers: meta-training and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train one run per seed and write its record.
    Train(RunArgs),
    /// Re-evaluate trained runs on their validation episodes.
    Eval(RunArgs),
    /// Run a named ablation preset.
    Ablate {
        #[arg(long, value_enum)]
        preset: Preset,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Aggregate run records into tables and figure data.
    Report(ReportArgs),
    /// Run the oracle suite on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    /// Plasticity rule; an ablation preset supplies its own default.
    #[arg(long, value_parser = parse_rule)]
    rule: Option<Rule>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [3000u64, 3001, 3002])]
    seeds: Vec<u64>,
    /// Config layers (TOML), applied in order over the task defaults.
    #[arg(long = "config")]
    configs: Vec<PathBuf>,
    /// Dotted-path overrides, e.g. `--set model.eta0=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root (default: $PLASTICFORMER_OUT, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Directories searched for run records (default: <out>/runs).
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to one rule (default: all three).
    #[arg(long, value_parser = parse_rule)]
    rule: Option<Rule>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gate fuzz samples.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long = "config")]
    configs: Vec<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Gradient rule without auxiliary outputs (`model.aux_dim=0`).
    NoAux,
    /// Hebbian rule with the gate frozen (`model.eta0=0`).
    FrozenEta,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::NoAux => "no_aux",
            Preset::FrozenEta => "frozen_eta",
        }
    }

    fn rule(self) -> Rule {
        match self {
            Preset::NoAux => Rule::Gradient,
            Preset::FrozenEta => Rule::Hebbian,
        }
    }

    fn overrides(self) -> Vec<(String, String)> {
        let kv = match self {
            Preset::NoAux => ("model.aux_dim", "0"),
            Preset::FrozenEta => ("model.eta0", "0.0"),
        };
        vec![(kv.0.to_string(), kv.1.to_string())]
    }
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_rule(s: &str) -> std::result::Result<Rule, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn output_root(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let parsed: Vec<(String, String)> = raw.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
    if parsed.iter().any(|(k, _)| k == "seed") {
        return Err(Error::Config("the seed is set with --seeds, not --set".into()));
    }
    if parsed.iter().any(|(k, _)| k == "task" || k == "model.rule") {
        return Err(Error::Config("task and rule are set with --task and --rule, not --set".into()));
    }
    Ok(parsed)
}

/// The fully layered config of every requested seed, validated up front so
/// a bad key fails before any training starts.
fn run_configs(args: &RunArgs, rule: Rule, extra: &[(String, String)]) -> Result<Vec<RunConfig>> {
    let mut overrides = extra.to_vec();
    overrides.extend(parse_overrides(&args.overrides)?);
    if args.seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    args.seeds
        .iter()
        .map(|&seed| RunConfig::new(args.task, rule, seed).layered(&args.configs, &overrides))
        .collect()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Oracle(_) => 3,
        _ => 1,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => match args.rule {
            Some(rule) => cmd_train(&args, rule, &[], &output_root(&args.out)),
            None => fail(Error::Config("--rule is required".into())),
        },
        Command::Ablate { preset, run } => {
            let root = output_root(&run.out).join("ablations").join(preset.name());
            let rule = run.rule.unwrap_or(preset.rule());
            cmd_train(&run, rule, &preset.overrides(), &root)
        }
        Command::Eval(args) => match args.rule {
            Some(rule) => cmd_eval(&args, rule, &output_root(&args.out)),
            None => fail(Error::Config("--rule is required".into())),
        },
        Command::Report(args) => cmd_report(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    }
}

// ── train ───────────────────────────────────────────────────────────────

fn cmd_train(args: &RunArgs, rule: Rule, extra: &[(String, String)], root: &Path) -> ExitCode {
    let configs = match run_configs(args, rule, extra) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let jobs = args.jobs.max(1);
    let mut failures = 0usize;
    for chunk in configs.chunks(jobs) {
        let results: Vec<(u64, Result<RunRecord>)> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|cfg| (cfg.seed, s.spawn(move || train_one(cfg, root))))
                .collect();
            handles
                .into_iter()
                .map(|(seed, h)| (seed, h.join().unwrap_or_else(|_| Err(Error::Contract("training thread panicked".into())))))
                .collect()
        });
        for (seed, r) in results {
            match r {
                Ok(rec) => println!("{}", summary_line(&rec)),
                Err(e) => {
                    failures += 1;
                    eprintln!("error: seed {seed}: {e}");
                }
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn train_one(cfg: &RunConfig, root: &Path) -> Result<RunRecord> {
    let dir = run_dir(root, cfg.task, cfg.model.rule, cfg.seed);
    let mut persist = |rec: &RunRecord, trace: &[TraceRow]| rec.write(&dir, trace);
    let out = train_with(cfg, &mut persist)?;
    out.record.write(&dir, &out.trace)?;
    out.model.save(&dir.join(CHECKPOINT), cfg.seed)?;
    // post-run re-check of what actually landed on disk
    let back = RunRecord::read(&dir.join("record.json"))?;
    if back != out.record {
        return Err(Error::Contract(format!("{} does not read back identically", dir.display())));
    }
    if !back.completed {
        return Err(Error::Contract(format!("{} is not marked complete", dir.display())));
    }
    Ok(back)
}

fn summary_line(rec: &RunRecord) -> String {
    match &rec.summary {
        Some(s) => format!(
            "{}/{}/{}: loss {:.4}, {} {:.4}, mean η {:.3e}, mean ‖w‖ {:.3e} ({:.1}s)",
            rec.task,
            rec.rule,
            rec.seed,
            s.loss,
            rec.task.metric_name(),
            s.metric,
            s.mean_eta,
            s.mean_norm,
            rec.wall_clock_seconds
        ),
        None => format!("{}/{}/{}: no validation result", rec.task, rec.rule, rec.seed),
    }
}

// ── eval ────────────────────────────────────────────────────────────────

fn cmd_eval(args: &RunArgs, rule: Rule, root: &Path) -> ExitCode {
    let mut failures = 0usize;
    for &seed in &args.seeds {
        let dir = run_dir(root, args.task, rule, seed);
        match eval_one(&dir) {
            Ok(line) => println!("{line}"),
            Err(e) => {
                failures += 1;
                eprintln!("error: {}: {e}", dir.display());
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn eval_one(dir: &Path) -> Result<String> {
    let rec = RunRecord::read(&dir.join("record.json"))?;
    let cfg: RunConfig = serde_json::from_value(rec.config.clone())?;
    let (model, _) = PlasticTransformer::load(&dir.join(CHECKPOINT))?;
    let (_, val) = datasets(&cfg)?;
    let result = evaluate(&model, &val, cfg.seed, true)?;
    let mut text = serde_json::to_string_pretty(&result)?;
    text.push('\n');
    write_atomic(&dir.join("eval.json"), &text)?;
    Ok(format!(
        "{}/{}/{}: loss {:.4}, {} {:.4}, mean η {:.3e} over {} episodes",
        rec.task,
        rec.rule,
        rec.seed,
        result.loss,
        rec.task.metric_name(),
        result.metric,
        result.mean_eta,
        result.episodes
    ))
}

// ── report ──────────────────────────────────────────────────────────────

fn cmd_report(args: &ReportArgs) -> ExitCode {
    let root = output_root(&args.out);
    let inputs = if args.inputs.is_empty() {
        vec![root.join("runs")]
    } else {
        args.inputs.clone()
    };
    match report(&inputs, &root) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn report(inputs: &[PathBuf], root: &Path) -> Result<String> {
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for dir in inputs {
        let paths = match find_records(dir) {
            Ok(p) => p,
            Err(e) => {
                problems.push(format!("{}: {e}", dir.display()));
                continue;
            }
        };
        if paths.is_empty() {
            problems.push(format!("{}: no run records", dir.display()));
        }
        for p in paths {
            match RunRecord::read(&p) {
                Ok(r) if r.completed => records.push(r),
                Ok(_) => problems.push(format!("{}: run did not complete", p.display())),
                Err(e) => problems.push(format!("{}: {e}", p.display())),
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Contract(format!("cannot report:\n  {}", problems.join("\n  "))));
    }
    let table = aggregate(&records)?;
    let out = report_dir(root);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let text = table.to_text();
    write_atomic(&out.join("table.txt"), &text)?;
    write_atomic(&out.join("table.csv"), &table.to_csv())?;
    write_atomic(&out.join("summary_bars.csv"), &export_plot_data(&records, PlotKind::SummaryBars)?)?;
    write_atomic(&out.join("mech_traces.csv"), &export_plot_data(&records, PlotKind::MechTraces)?)?;
    Ok(text)
}

// ── gradcheck ───────────────────────────────────────────────────────────

fn cmd_gradcheck(args: &GradcheckArgs) -> ExitCode {
    let root = output_root(&args.out).join("gradcheck");
    let cfg = match parse_overrides(&args.overrides)
        .and_then(|o| tiny_run_config(args.rule.unwrap_or(Rule::Hebbian), args.seed).layered(&args.configs, &o))
    {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let rules: Vec<Rule> = match args.rule {
        Some(r) => vec![r],
        None => Rule::ALL.to_vec(),
    };
    let reports = match tiny_suite(&cfg, &rules, args.samples, args.seed) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    for r in &reports {
        println!("{}", r.summary_line());
    }
    if let Err(e) = write_reports(&root, &reports) {
        return fail(e);
    }
    let failed = reports.iter().filter(|r| r.is_hard_failure()).count();
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("error: {failed} oracle check(s) failed");
        ExitCode::from(3)
    }
}
