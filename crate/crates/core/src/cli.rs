//! Command-line driver: five subcommands over the library, plus all file
//! emissions. Flags win over config keys; the only environment hook is
//! `MTCOP_OUT` for the default output directory.

use crate::bandit::{BanditAlg, Sampler, SimEnv};
use crate::config::{load_experiment, ExperimentConfig};
use crate::decomp::{neural_check, quadratic_check, DecompReport};
use crate::error::{Error, Result, EXIT_TOLERANCE, EXIT_USAGE};
use crate::influence::{matrix_from_csv, matrix_to_csv};
use crate::report::{
    block_contrast, comparison_csv, contrast_summary_line, gap_table_csv, long_influence_csv,
    metrics_to_jsonl, schedule_label, RunReport,
};
use crate::rng;
use crate::task::TaskRegistry;
use crate::trainer::{evaluate_suite, train, Checkpoint, OptimizerKind};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs;
use std::path::{Path, PathBuf};

pub const OUT_ENV: &str = "MTCOP_OUT";
pub const QUAD_TOLERANCE: f64 = 1e-9;
pub const NEURAL_TOLERANCE: f64 = 0.05;

#[derive(Parser)]
#[command(
    name = "mtcop",
    about = "Bandit-scheduled multi-task training for small combinatorial solvers",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a multi-task policy and write run files into the output dir.
    ///
    /// Emits checkpoint.json, metrics.jsonl, one M_NNNN.csv per window,
    /// W.csv (running mean), and report.json (held-out evaluation).
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out instances.
    ///
    /// Emits report.json and gaps.csv (per-task gap%, total row, gain
    /// column when --baseline is given).
    Eval(EvalArgs),
    /// Verify the loss-change decomposition and exit 1 on tolerance failure.
    DecompCheck(DecompArgs),
    /// Simulate a bandit on a synthetic environment; write regret.csv.
    BanditSim(BanditSimArgs),
    /// Aggregate run directories into comparison and influence tables.
    ///
    /// Emits comparison.csv, W.csv (mean over runs), influence_long.csv,
    /// and summary.txt.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config file.
    config: PathBuf,
    /// Overrides the config's schedule seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config [output] dir, then $MTCOP_OUT, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// checkpoint.json from a training run.
    checkpoint: PathBuf,
    /// Experiment config file; its task set must match the checkpoint.
    config: PathBuf,
    /// Held-out instances per task (default: config [eval] instances).
    #[arg(long)]
    n: Option<usize>,
    /// report.json of a baseline run; adds gain rows.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum DecompMode {
    Quadratic,
    Neural,
}

#[derive(Copy, Clone, ValueEnum)]
enum OptimizerArg {
    Gd,
    Adam,
}

impl OptimizerArg {
    fn kind(self) -> OptimizerKind {
        match self {
            OptimizerArg::Gd => OptimizerKind::Gd,
            OptimizerArg::Adam => OptimizerKind::adam_default(),
        }
    }
}

#[derive(Args)]
struct DecompArgs {
    #[arg(long, value_enum)]
    mode: DecompMode,
    #[arg(long, value_enum, default_value = "gd")]
    optimizer: OptimizerArg,
    /// Windows to check (default: 24 quadratic, 50 neural).
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BanditSimArgs {
    /// exp3 | exp3r | ts | dts | round-robin | uniform
    #[arg(long)]
    alg: String,
    /// bernoulli:M1,M2,... or drift:M1,M2,...@PERIOD
    #[arg(long)]
    env: String,
    #[arg(long, default_value_t = 10_000)]
    horizon: usize,
    /// Independent repetitions, seeded 0..seeds from the root seed.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories written by `train`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Label of the baseline column for the gain row (default: first run).
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses argv and runs one command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own help/version/usage output.
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::DecompCheck(args) => cmd_decomp_check(args),
        Cmd::BanditSim(args) => cmd_bandit_sim(args),
        Cmd::Report(args) => cmd_report(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_out(flag: Option<PathBuf>, from_config: Option<PathBuf>) -> PathBuf {
    flag.or(from_config)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = load_experiment(path)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let cfg = load_config(&args.config, args.seed)?;
    let out = resolve_out(args.out, cfg.out_dir.clone());
    fs::create_dir_all(&out)?;

    let output = train(&cfg.train)?;
    let names = cfg.train.registry.task_names();

    let checkpoint = Checkpoint::from_output(&cfg.train, &output);
    write_file(&out, "checkpoint.json", &checkpoint.to_json()?)?;
    write_file(&out, "metrics.jsonl", &metrics_to_jsonl(&output.metrics)?)?;
    for (i, m) in output.matrices.iter().enumerate() {
        write_file(&out, &format!("M_{:04}.csv", i + 1), &matrix_to_csv(&m.values, &names))?;
    }
    write_file(&out, "W.csv", &matrix_to_csv(&output.avg.mean(), &names))?;

    let eval = evaluate_suite(&output.params, &cfg.train.registry, cfg.eval_instances, cfg.eval_seed())?;
    let report = RunReport {
        label: schedule_label(&cfg.train.schedule),
        registry: cfg.train.registry.clone(),
        seed: cfg.train.seed,
        eval,
    };
    write_file(&out, "report.json", &report.to_json()?)?;

    println!(
        "trained {} ({} steps, budget {:.3}); windows {}; total gap {:.3}%",
        report.label,
        output.steps,
        output.budget_used,
        output.matrices.len(),
        report.eval.total_gap
    );
    println!("wrote {}", out.display());
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let cfg = load_config(&args.config, None)?;
    let checkpoint = Checkpoint::from_json(&fs::read_to_string(&args.checkpoint)?)?;
    if checkpoint.registry != cfg.train.registry {
        return Err(Error::Config(
            "checkpoint task set does not match the config".into(),
        ));
    }
    let n = args.n.unwrap_or(cfg.eval_instances);
    let mut eval = evaluate_suite(&checkpoint.params, &checkpoint.registry, n, cfg.eval_seed())?;
    if let Some(path) = args.baseline {
        let baseline = RunReport::from_json(&fs::read_to_string(&path)?)?;
        eval.apply_baseline(&baseline.eval)?;
    }
    let report = RunReport {
        label: schedule_label(&cfg.train.schedule),
        registry: checkpoint.registry.clone(),
        seed: cfg.train.seed,
        eval,
    };
    let table = gap_table_csv(&report.eval);
    let out = resolve_out(args.out, cfg.out_dir.clone());
    fs::create_dir_all(&out)?;
    write_file(&out, "report.json", &report.to_json()?)?;
    write_file(&out, "gaps.csv", &table)?;
    print!("{table}");
    Ok(0)
}

fn print_decomp(report: &DecompReport) {
    for row in &report.rows {
        let rel = row
            .rel_residual
            .map(|r| format!("{r:.6}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "window {:>3} {:<10} dL={:+.6e} own={:+.6e} same={:+.6e} cross={:+.6e} residual={:+.3e} rel={}",
            row.window, row.task, row.delta_loss, row.own, row.same_family, row.cross_family,
            row.residual, rel
        );
    }
}

fn cmd_decomp_check(args: DecompArgs) -> Result<i32> {
    match args.mode {
        DecompMode::Quadratic => {
            let windows = args.windows.unwrap_or(24);
            let report = quadratic_check(args.optimizer.kind(), windows)?;
            print_decomp(&report);
            let ok = report.max_abs_residual <= QUAD_TOLERANCE;
            println!(
                "quadratic: max |residual| {:.3e} (tolerance {:.0e}) -> {}",
                report.max_abs_residual,
                QUAD_TOLERANCE,
                if ok { "pass" } else { "FAIL" }
            );
            Ok(if ok { 0 } else { EXIT_TOLERANCE })
        }
        DecompMode::Neural => {
            let windows = args.windows.unwrap_or(50);
            let report = neural_check(args.optimizer.kind(), windows, args.seed)?;
            print_decomp(&report);
            let median = report.median_rel_residual.unwrap_or(f64::INFINITY);
            let ok = median <= NEURAL_TOLERANCE;
            println!(
                "neural: median relative residual {:.4} (tolerance {:.2}) -> {}",
                median,
                NEURAL_TOLERANCE,
                if ok { "pass" } else { "FAIL" }
            );
            Ok(if ok { 0 } else { EXIT_TOLERANCE })
        }
    }
}

fn parse_env_spec(spec: &str) -> Result<SimEnv> {
    let bad = |msg: &str| Error::Config(format!("bad --env `{spec}`: {msg}"));
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| bad("expected kind:means"))?;
    let parse_means = |text: &str| -> Result<Vec<f64>> {
        let means: Vec<f64> = text
            .split(',')
            .map(|m| m.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("means must be numbers"))?;
        if means.is_empty() || means.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(bad("means must lie in [0,1]"));
        }
        Ok(means)
    };
    match kind {
        "bernoulli" => Ok(SimEnv::Bernoulli { means: parse_means(rest)? }),
        "drift" => {
            let (means, period) = rest
                .split_once('@')
                .ok_or_else(|| bad("drift needs means@period"))?;
            let period: usize = period
                .trim()
                .parse()
                .map_err(|_| bad("period must be an integer"))?;
            if period == 0 {
                return Err(bad("period must be positive"));
            }
            Ok(SimEnv::Drift { means: parse_means(means)?, period })
        }
        other => Err(bad(&format!("unknown environment `{other}`"))),
    }
}

fn make_sampler(alg: &str, n: usize, horizon: usize) -> Result<Sampler> {
    match alg {
        "round-robin" => Ok(Sampler::round_robin(n)),
        "uniform" => Ok(Sampler::uniform(n)),
        other => Ok(Sampler::new(BanditAlg::parse(other)?, n, horizon)),
    }
}

fn cmd_bandit_sim(args: BanditSimArgs) -> Result<i32> {
    if args.seeds == 0 || args.horizon == 0 {
        return Err(Error::Config("horizon and seeds must be positive".into()));
    }
    let env = parse_env_spec(&args.env)?;
    let n = env.n_arms();
    let mut traces = Vec::with_capacity(args.seeds);
    for s in 0..args.seeds {
        let mut sampler = make_sampler(&args.alg, n, args.horizon)?;
        let mut rng = rng::substream(args.seed, "bandit-sim", s as u64);
        traces.push(crate::bandit::simulate(&mut sampler, &env, args.horizon, &mut rng)?);
    }

    let mut csv = String::from("step");
    for s in 0..args.seeds {
        csv.push_str(&format!(",seed-{s}"));
    }
    csv.push_str(",mean\n");
    let push_row = |label: &str, at: usize, out: &mut String| {
        out.push_str(label);
        let mut sum = 0.0;
        for trace in &traces {
            let v = trace.regret[at];
            sum += v;
            out.push_str(&format!(",{v:.6}"));
        }
        out.push_str(&format!(",{:.6}\n", sum / traces.len() as f64));
    };
    for step in 0..args.horizon {
        push_row(&(step + 1).to_string(), step, &mut csv);
    }
    push_row("final", args.horizon - 1, &mut csv);

    let tail = args.horizon.min(1000);
    let mean_final: f64 =
        traces.iter().map(|t| t.regret[args.horizon - 1]).sum::<f64>() / traces.len() as f64;
    let mean_reward: f64 = traces
        .iter()
        .map(|t| t.rewards.iter().sum::<f64>() / args.horizon as f64)
        .sum::<f64>()
        / traces.len() as f64;
    let best_arm_rate: f64 = traces
        .iter()
        .map(|t| {
            let last = &t.arms[args.horizon - tail..];
            let best = env.best_arm(args.horizon - 1);
            last.iter().filter(|a| **a == best).count() as f64 / tail as f64
        })
        .sum::<f64>()
        / traces.len() as f64;

    let out = resolve_out(args.out, None);
    fs::create_dir_all(&out)?;
    write_file(&out, "regret.csv", &csv)?;
    println!(
        "{} on {}: mean final regret {:.3}, mean reward {:.4}, last-{} best-arm rate {:.4}",
        args.alg, args.env, mean_final, mean_reward, tail, best_arm_rate
    );
    println!("wrote {}", out.join("regret.csv").display());
    Ok(0)
}

struct LoadedRun {
    label: String,
    registry: TaskRegistry,
    eval_gap: Vec<f64>,
    w: Vec<Vec<f64>>,
    window_matrices: Vec<(usize, Vec<Vec<f64>>)>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let report = RunReport::from_json(&fs::read_to_string(dir.join("report.json"))?)?;
    let names = report.registry.task_names();
    let (w_names, w) = matrix_from_csv(&fs::read_to_string(dir.join("W.csv"))?)?;
    if w_names != names {
        return Err(Error::Config(format!(
            "{}: W.csv labels do not match report.json tasks",
            dir.display()
        )));
    }
    let mut window_matrices = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(idx) = name.strip_prefix("M_").and_then(|r| r.strip_suffix(".csv")) else {
            continue;
        };
        let Ok(window) = idx.parse::<usize>() else { continue };
        let (m_names, values) = matrix_from_csv(&fs::read_to_string(&path)?)?;
        if m_names != names {
            return Err(Error::Config(format!("{name}: labels do not match the run")));
        }
        window_matrices.push((window, values));
    }
    window_matrices.sort_by_key(|(w, _)| *w);
    Ok(LoadedRun {
        label: report.label,
        registry: report.registry,
        eval_gap: report.eval.gap,
        w,
        window_matrices,
    })
}

fn cmd_report(args: ReportArgs) -> Result<i32> {
    let mut runs = Vec::with_capacity(args.runs.len());
    for dir in &args.runs {
        runs.push(load_run(dir)?);
    }
    let registry = runs[0].registry.clone();
    let names = registry.task_names();
    for (run, dir) in runs.iter().zip(&args.runs) {
        if run.registry != registry {
            return Err(Error::Config(format!(
                "{}: task set differs from the first run",
                dir.display()
            )));
        }
    }

    let mut labels: Vec<String> = Vec::with_capacity(runs.len());
    for run in &runs {
        let mut label = run.label.clone();
        let mut k = 2;
        while labels.contains(&label) {
            label = format!("{}-{k}", run.label);
            k += 1;
        }
        labels.push(label);
    }
    let baseline = match &args.baseline {
        None => 0,
        Some(wanted) => labels
            .iter()
            .position(|l| l == wanted)
            .ok_or_else(|| Error::Config(format!("no run labeled `{wanted}`")))?,
    };

    let gaps: Vec<Vec<f64>> = runs.iter().map(|r| r.eval_gap.clone()).collect();
    let comparison = comparison_csv(&names, &labels, &gaps, baseline)?;

    let n = names.len();
    let mut mean_w = vec![vec![0.0; n]; n];
    for run in &runs {
        for (row, src) in mean_w.iter_mut().zip(&run.w) {
            for (cell, v) in row.iter_mut().zip(src) {
                *cell += v / runs.len() as f64;
            }
        }
    }

    let mut all_windows = Vec::new();
    for run in &runs {
        all_windows.extend(run.window_matrices.iter().cloned());
    }
    let summary = match block_contrast(&mean_w, &registry) {
        Ok((intra, inter)) => contrast_summary_line(intra, inter),
        Err(e) => format!("mean |W| contrast unavailable: {e}"),
    };

    let out = resolve_out(args.out, None);
    fs::create_dir_all(&out)?;
    write_file(&out, "comparison.csv", &comparison)?;
    write_file(&out, "W.csv", &matrix_to_csv(&mean_w, &names))?;
    write_file(&out, "influence_long.csv", &long_influence_csv(&names, &all_windows))?;
    write_file(&out, "summary.txt", &format!("{summary}\n"))?;

    print!("{comparison}");
    println!("{summary}");
    println!("wrote {}", out.display());
    Ok(0)
}
