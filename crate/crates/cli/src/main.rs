//! `mamba3-lab`: verification suites, discretization convergence studies,
//! formal-language training and FLOP/intensity sweeps.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error,
//! 3 numerical fault.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mamba3_core::block::Mamba3BlockConfig;
use mamba3_core::discretize::{convergence_order, default_deltas, Rule, TestSystem};
use mamba3_core::mimo::{arithmetic_intensity_mimo, intensity_asymptote, IntensityReport};
use mamba3_core::ssd::flop_count_mimo;
use mamba3_core::tasks::{lr_grid, run_sweep, task_model_config, Curriculum, Task};
use mamba3_core::verify::{run_suite, Check, Suite, VerifyOptions};
use mamba3_core::Error;

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mamba3-lab", version, about = "Mamba-3 state-space lab")]
struct Cli {
    /// Flat key=value file; keys mirror flag names, explicit flags win.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
enum Cmd {
    /// Cross-check the independent computation paths on random instances.
    Verify(VerifyArgs),
    /// Global-error convergence study of one discretization rule.
    Converge(ConvergeArgs),
    /// Curriculum training on a formal-language task.
    Train(TrainArgs),
    /// Analytic FLOP or arithmetic-intensity tables.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SuiteArg {
    Equivalence,
    Rope,
    Mimo,
    Mask,
    Grad,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Equivalence => Suite::Equivalence,
            SuiteArg::Rope => Suite::Rope,
            SuiteArg::Mimo => Suite::Mimo,
            SuiteArg::Mask => Suite::Mask,
            SuiteArg::Grad => Suite::Grad,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Run the rope suite with every rotation rate set to zero.
    #[arg(long)]
    zero_theta: bool,
    /// JSON report path (stdout when absent).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, hide = true)]
    corrupt_mask: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SystemArg {
    Smooth,
    Constant,
}

#[derive(Args, Debug, Serialize)]
struct ConvergeArgs {
    /// forward_euler, backward_euler, trapezoidal, zoh, exp_euler, exp_trapezoidal
    #[arg(long, default_value = "exp_trapezoidal")]
    rule: String,
    /// Step sizes, strictly decreasing (default 0.2 halved five times).
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, value_enum, default_value = "smooth")]
    system: SystemArg,
    /// CSV path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    Mamba3,
    Mamba2,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// parity, modarith, modarith_brackets
    #[arg(long, default_value = "parity")]
    task: String,
    #[arg(long, value_enum, default_value = "mamba3")]
    preset: Preset,
    /// Default: 1 for parity, 3 otherwise.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 64)]
    state: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    rank: usize,
    #[arg(long)]
    use_rope: Option<bool>,
    #[arg(long)]
    use_trapezoidal: Option<bool>,
    #[arg(long)]
    use_bc_bias: Option<bool>,
    #[arg(long)]
    use_bc_norm: Option<bool>,
    #[arg(long)]
    use_short_conv: Option<bool>,
    #[arg(long)]
    use_pre_gate_norm: Option<bool>,
    #[arg(long)]
    rotate_biases: Option<bool>,
    #[arg(long)]
    bias_init: Option<f64>,
    #[arg(long)]
    theta_init_std: Option<f64>,
    /// Single learning rate; otherwise the log-spaced grid below is swept.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 8)]
    lr_points: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr_min: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr_max: f64,
    /// Stop the sweep once a run reaches this scaled accuracy.
    #[arg(long)]
    stop_at: Option<f64>,
    /// Exit 1 unless the best scaled accuracy reaches this value.
    #[arg(long)]
    target: Option<f64>,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, value_delimiter = ',', default_value = "40,80,120,160")]
    stages: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    eval_len: usize,
    #[arg(long, default_value_t = 2000)]
    steps_per_stage: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 512)]
    eval_samples: usize,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Length-sorted pieces per training batch.
    #[arg(long, default_value_t = 4)]
    length_buckets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// History CSV of the best run.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Checkpoint of the best model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SweepKind {
    Flops,
    Intensity,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[arg(value_enum)]
    kind: SweepKind,
    /// Sequence lengths (flops).
    #[arg(long = "t", value_delimiter = ',', default_value = "1024")]
    t: Vec<u64>,
    /// Chunk lengths in steps (flops).
    #[arg(long = "c", value_delimiter = ',', default_value = "64")]
    c: Vec<u64>,
    #[arg(long = "n", value_delimiter = ',')]
    n: Option<Vec<u64>>,
    #[arg(long = "p", value_delimiter = ',')]
    p: Option<Vec<u64>>,
    #[arg(long = "r", value_delimiter = ',')]
    r: Option<Vec<u64>>,
    /// Bytes per element (intensity): 2 or 4.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    dtype_bytes: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    config: &'a Cmd,
    checks: Vec<Check>,
    wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<T>,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NumericalFault { .. } | Error::NumericalDomain { .. } => EXIT_NUMERIC,
            Error::Consistency { .. } => EXIT_FAIL,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| usage(e.to_string()))
        }
    }
}

fn emit_report<T: Serialize>(cmd: &Cmd, checks: Vec<Check>, start: Instant, result: Option<T>, path: Option<&Path>, stdout_default: bool) -> Result<(), Failure> {
    let report = Report {
        config: cmd,
        checks,
        wall_time_s: start.elapsed().as_secs_f64(),
        result,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| usage(e.to_string()))? + "\n";
    if path.is_some() || stdout_default {
        write_out(path, &json)?;
    }
    Ok(())
}

fn cmd_verify(cmd: &Cmd, a: &VerifyArgs, start: Instant) -> Result<u8, Failure> {
    let opts = VerifyOptions {
        tol: a.tol,
        seed: a.seed,
        trials: a.trials,
        corrupt_mask: a.corrupt_mask,
        zero_theta: a.zero_theta,
    };
    let checks = run_suite(a.suite.into(), &opts)?;
    let failed: Vec<&Check> = checks.iter().filter(|c| !c.pass).collect();
    for c in &failed {
        let at = c.failure.as_ref().map_or(String::new(), |f| {
            format!(" (trial {} seed {} {})", f.trial, f.seed, f.dims)
        });
        eprintln!("FAIL {} max_err={:e}{at}", c.name, c.max_err);
    }
    let code = if failed.is_empty() { 0 } else { EXIT_FAIL };
    emit_report::<()>(cmd, checks, start, None, a.report.as_deref(), true)?;
    Ok(code)
}

#[derive(Serialize)]
struct ConvergeResult {
    rule: String,
    fitted_slope: f64,
    monotone: bool,
    max_error: f64,
}

fn cmd_converge(cmd: &Cmd, a: &ConvergeArgs, start: Instant) -> Result<u8, Failure> {
    let rule: Rule = a.rule.parse()?;
    let system = match a.system {
        SystemArg::Smooth => TestSystem::smooth(),
        SystemArg::Constant => TestSystem::constant_input(),
    };
    let deltas = a.deltas.clone().unwrap_or_else(default_deltas);
    let study = convergence_order(rule, &system, &deltas, a.lambda)?;
    write_out(a.out.as_deref(), &study.to_csv())?;
    println!("fitted_slope={:.6}", study.slope);
    let checks = vec![Check {
        name: format!("converge.{}.monotone", rule.name()),
        max_err: 0.0,
        pass: study.monotone,
        failure: None,
    }];
    let result = ConvergeResult {
        rule: rule.name().into(),
        fitted_slope: study.slope,
        monotone: study.monotone,
        max_error: study.max_error(),
    };
    emit_report(cmd, checks, start, Some(result), a.report.as_deref(), false)?;
    Ok(0)
}

fn block_config(a: &TrainArgs) -> Mamba3BlockConfig {
    let base = match a.preset {
        Preset::Mamba3 => Mamba3BlockConfig::mamba3(a.d_model, a.state, a.heads),
        Preset::Mamba2 => Mamba3BlockConfig::mamba2_style(a.d_model, a.state, a.heads),
    };
    Mamba3BlockConfig {
        rank: a.rank,
        use_rope: a.use_rope.unwrap_or(base.use_rope),
        use_trapezoidal: a.use_trapezoidal.unwrap_or(base.use_trapezoidal),
        use_bc_bias: a.use_bc_bias.unwrap_or(base.use_bc_bias),
        use_bc_norm: a.use_bc_norm.unwrap_or(base.use_bc_norm),
        use_short_conv: a.use_short_conv.unwrap_or(base.use_short_conv),
        use_pre_gate_norm: a.use_pre_gate_norm.unwrap_or(base.use_pre_gate_norm),
        rotate_biases: a.rotate_biases.unwrap_or(base.rotate_biases),
        bias_init: a.bias_init.unwrap_or(base.bias_init),
        theta_init_std: a.theta_init_std.unwrap_or(base.theta_init_std),
        seed: a.seed,
        ..base
    }
}

fn cmd_train(cmd: &Cmd, a: &TrainArgs, start: Instant) -> Result<u8, Failure> {
    let task: Task = a.task.parse()?;
    let layers = a.layers.unwrap_or(if task == Task::Parity { 1 } else { 3 });
    let model_config = task_model_config(task, block_config(a), layers);
    model_config.validate()?;
    let curriculum = Curriculum {
        min_len: a.min_len,
        stages: a.stages.clone(),
        eval_len: a.eval_len,
        steps_per_stage: a.steps_per_stage,
        batch_size: a.batch,
        eval_samples: a.eval_samples,
        log_every: a.log_every,
        length_buckets: a.length_buckets,
    };
    curriculum.validate()?;
    let lrs = match a.lr {
        Some(lr) => vec![lr],
        None => lr_grid(a.lr_min, a.lr_max, a.lr_points)?,
    };
    let outcome = run_sweep(&model_config, task, &curriculum, &lrs, a.seed, a.stop_at)?;
    let rep = &outcome.report;
    let best = rep
        .runs
        .iter()
        .find(|r| r.lr == rep.best_lr)
        .expect("best run present");
    if let Some(h) = &a.history {
        write_out(Some(h), &best.history_csv())?;
    }
    if let Some(c) = &a.checkpoint {
        outcome.best_model.save(c)?;
    }
    let mut checks: Vec<Check> = rep
        .runs
        .iter()
        .map(|r| Check {
            name: format!("train.{task}.lr={:.3e}", r.lr),
            max_err: 1.0 - r.final_scaled_acc,
            pass: r.aborted.is_none(),
            failure: None,
        })
        .collect();
    let mut code = 0;
    if let Some(t) = a.target {
        let pass = rep.best_scaled_acc >= t;
        checks.push(Check {
            name: format!("train.{task}.best_scaled_acc>={t}"),
            max_err: (t - rep.best_scaled_acc).max(0.0),
            pass,
            failure: None,
        });
        if !pass {
            code = EXIT_FAIL;
        }
    }
    for r in &rep.runs {
        eprintln!(
            "lr={:.3e} scaled_acc={:.4}{}",
            r.lr,
            r.final_scaled_acc,
            r.aborted.as_ref().map_or(String::new(), |e| format!(" ABORTED: {e}"))
        );
    }
    eprintln!("best lr={:.3e} scaled_acc={:.4}", rep.best_lr, rep.best_scaled_acc);
    if rep.runs.iter().all(|r| r.aborted.is_some()) {
        code = EXIT_NUMERIC;
    }
    emit_report(cmd, checks, start, Some(rep), a.report.as_deref(), a.history.is_some())?;
    Ok(code)
}

fn cmd_sweep(cmd: &Cmd, a: &SweepArgs, start: Instant) -> Result<u8, Failure> {
    let mut csv = String::new();
    let nonempty = |v: &[u64], name: &str| -> Result<(), Failure> {
        if v.is_empty() {
            return Err(usage(format!("--{name} grid is empty")));
        }
        Ok(())
    };
    match a.kind {
        SweepKind::Flops => {
            let n = a.n.clone().unwrap_or(vec![64]);
            let p = a.p.clone().unwrap_or(vec![64]);
            let r = a.r.clone().unwrap_or(vec![1]);
            for (v, name) in [(&a.t, "t"), (&a.c, "c"), (&n, "n"), (&p, "p"), (&r, "r")] {
                nonempty(v, name)?;
            }
            csv.push_str("T,C,N,P,R,intra,inter,total,leading_order,eight_trn2\n");
            for &t in &a.t {
                for &c in &a.c {
                    for &nn in &n {
                        for &pp in &p {
                            for &rr in &r {
                                let f = flop_count_mimo(t, c, nn, pp, rr)?;
                                csv.push_str(&format!(
                                    "{},{},{},{},{},{},{},{},{},{}\n",
                                    f.t, f.c, f.n, f.p, f.r, f.intra, f.inter, f.total, f.leading_order,
                                    8 * t * rr * nn * nn
                                ));
                            }
                        }
                    }
                }
            }
        }
        SweepKind::Intensity => {
            let n = a.n.clone().unwrap_or(vec![128]);
            let p = a.p.clone().unwrap_or(vec![64]);
            let r = a.r.clone().unwrap_or((1..=8).collect());
            for (v, name) in [(&n, "n"), (&p, "p"), (&r, "r"), (&a.dtype_bytes, "dtype-bytes")] {
                nonempty(v, name)?;
            }
            csv.push_str(IntensityReport::CSV_HEADER);
            csv.push_str(",asymptote\n");
            for &d in &a.dtype_bytes {
                for &nn in &n {
                    for &pp in &p {
                        let lim = intensity_asymptote(nn, pp, d)?;
                        for &rr in &r {
                            let rep = arithmetic_intensity_mimo(nn, pp, rr, d)?;
                            csv.push_str(&format!("{},{lim}\n", rep.csv_row()));
                        }
                    }
                }
            }
        }
    }
    write_out(a.out.as_deref(), &csv)?;
    emit_report::<()>(cmd, Vec::new(), start, None, a.report.as_deref(), false)?;
    Ok(0)
}

fn run() -> Result<u8, Failure> {
    let raw: Vec<_> = std::env::args_os().collect();
    let command = Cli::command().args_override_self(true).mut_subcommands(|s| s.args_override_self(true));
    let args = config::expand(&command, raw).map_err(usage)?;
    let parsed = command
        .try_get_matches_from(args)
        .and_then(|mut m| Cli::from_arg_matches_mut(&mut m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return Ok(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let start = Instant::now();
    match &cli.command {
        Cmd::Verify(a) => cmd_verify(&cli.command, a, start),
        Cmd::Converge(a) => cmd_converge(&cli.command, a, start),
        Cmd::Train(a) => cmd_train(&cli.command, a, start),
        Cmd::Sweep(a) => cmd_sweep(&cli.command, a, start),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
