//! `rotlab`: run random-walk experiments on the simple system and compare
//! what they measure with the equilibrium predictions.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rotlab::experiment::{
    check_csv, run_converge, run_files, run_predict, run_to_dir, write_converge_csv, ComparisonReport, ConvergeConfig,
    ExperimentConfig, PredictRequest, RunSummary,
};
use rotlab::optim::{OptimizerConfig, OptimizerKind};
use rotlab::Error;

const OUT_ENV: &str = "ROTLAB_OUT";

#[derive(Parser)]
#[command(name = "rotlab", version, about = "Rotational equilibrium experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the equilibrium prediction for a request as JSON.
    Predict(PredictArgs),
    /// Run experiments and write telemetry.csv and summary.json.
    Run(RunArgs),
    /// Run experiments (or reuse stored runs) and write report.json.
    Check(CheckArgs),
    /// Monte-Carlo check of the AdamW norm recurrence.
    Converge(ConvergeArgs),
}

#[derive(Args)]
struct Common {
    /// Config file; repeat to sweep several configs.
    #[arg(long = "config", value_name = "PATH")]
    configs: Vec<PathBuf>,
    /// Output directory; each config writes into `<out>/<name>`.
    /// Defaults to $ROTLAB_OUT, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the seed of every config.
    #[arg(long)]
    seed: Option<u64>,
    /// Configs to run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: Common,
    /// Check the run already stored in `<out>/<name>` instead of running it.
    #[arg(long)]
    stored: bool,
}

#[derive(Args)]
struct Hyper {
    #[arg(long, value_name = "sgdm|adamw|adam_l2|lion")]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Fan-in C of the weight vector.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    /// Request file; inline flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
    /// E[|g|^2].
    #[arg(long)]
    grad_sq_norm: Option<f64>,
    /// E[|g~|^2], the gradient at unit weight norm.
    #[arg(long)]
    unit_grad_sq_norm: Option<f64>,
    /// Keep the `-lr * lambda^2` terms.
    #[arg(long)]
    exact: bool,
}

#[derive(Args)]
struct ConvergeArgs {
    /// Config file; inline flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    omega0_sq: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
}

/// Process outcome; higher codes win when several runs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Status {
    Pass = 0,
    CheckFail = 1,
    ConfigError = 2,
    Numeric = 3,
}

fn status_of(e: &Error) -> Status {
    match e {
        Error::NonFinite { .. } => Status::Numeric,
        _ => Status::ConfigError,
    }
}

fn fail(context: &str, e: &Error) -> Status {
    eprintln!("rotlab: {context}: {e}");
    status_of(e)
}

fn out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(path: &Path, seed: Option<u64>) -> rotlab::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> rotlab::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Runs `f` on every config, at most `jobs` at a time, and combines statuses.
fn sweep<F>(common: &Common, f: F) -> Status
where
    F: Fn(&Path, ExperimentConfig, &Path) -> Status + Sync,
{
    if common.configs.is_empty() {
        eprintln!("rotlab: at least one --config is required");
        return Status::ConfigError;
    }
    let out = out_dir(&common.out);
    let mut loaded = Vec::new();
    let mut worst = Status::Pass;
    for path in &common.configs {
        match load_config(path, common.seed) {
            Ok(cfg) => loaded.push((path.clone(), cfg)),
            Err(e) => worst = worst.max(fail(&path.display().to_string(), &e)),
        }
    }
    let next = AtomicUsize::new(0);
    let result = Mutex::new(worst);
    let jobs = common.jobs.clamp(1, loaded.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((path, cfg)) = loaded.get(i) else { break };
                let dir = out.join(&cfg.name);
                let s = f(path, cfg.clone(), &dir);
                let mut w = result.lock().unwrap();
                *w = (*w).max(s);
            });
        }
    });
    result.into_inner().unwrap()
}

fn cmd_run(args: &RunArgs) -> Status {
    sweep(&args.common, |path, cfg, dir| match run_to_dir(&cfg, dir) {
        Ok(out) => {
            log::info!(
                "{}: {} rows written to {}",
                path.display(),
                out.summary.csv_rows,
                dir.display()
            );
            println!("{}\t{}", cfg.name, dir.display());
            Status::Pass
        }
        Err(e) => fail(&cfg.name, &e),
    })
}

fn print_report(report: &ComparisonReport) {
    for v in &report.verdicts {
        let who = v.neuron.map_or("layer".to_string(), |n| format!("neuron {n}"));
        let predicted = v.predicted.map_or("n/a".to_string(), |p| format!("{p:.6e}"));
        let err = v.error.map_or("n/a".to_string(), |e| format!("{e:.4}"));
        println!(
            "{}\t{}\t{}\tmeasured {:.6e}\tpredicted {}\terror {} (tol {})\t{}",
            report.name,
            v.quantity,
            who,
            v.measured,
            predicted,
            err,
            v.tolerance,
            if v.pass { "PASS" } else { "FAIL" }
        );
    }
}

fn check_one(cfg: &ExperimentConfig, dir: &Path, stored: bool) -> rotlab::Result<ComparisonReport> {
    let files = run_files(dir);
    let summary = if stored {
        let summary = RunSummary::load(&files.summary)?;
        if summary.config_hash != cfg.config_hash() {
            return Err(Error::config(
                dir.join("summary.json").display().to_string(),
                "stored run was produced by a different config",
            ));
        }
        summary
    } else {
        run_to_dir(cfg, dir)?.summary
    };
    let report = check_csv(cfg, &summary, &files.csv)?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

fn cmd_check(args: &CheckArgs) -> Status {
    sweep(&args.common, |_, cfg, dir| match check_one(&cfg, dir, args.stored) {
        Ok(report) => {
            print_report(&report);
            if report.pass {
                Status::Pass
            } else {
                Status::CheckFail
            }
        }
        Err(e) => fail(&cfg.name, &e),
    })
}

fn parse_kind(s: &str) -> rotlab::Result<OptimizerKind> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::config("optimizer", format!("unknown optimizer {s:?}")))
}

fn predict_request(args: &PredictArgs) -> rotlab::Result<PredictRequest> {
    let h = &args.hyper;
    let mut req = match &args.config {
        Some(path) => PredictRequest::from_json(&std::fs::read_to_string(path)?)?,
        None => {
            let kind = parse_kind(
                h.optimizer
                    .as_deref()
                    .ok_or_else(|| Error::config("optimizer", "pass --config or --optimizer"))?,
            )?;
            let (lr, wd) = (h.lr.unwrap_or(f64::NAN), h.weight_decay.unwrap_or(f64::NAN));
            let optimizer = match kind {
                OptimizerKind::Sgdm => OptimizerConfig::sgdm(lr, wd, 0.9),
                OptimizerKind::AdamW => OptimizerConfig::adamw(lr, wd),
                OptimizerKind::AdamL2 => OptimizerConfig::adam_l2(lr, wd),
                OptimizerKind::Lion => OptimizerConfig::lion(lr, wd),
            };
            PredictRequest {
                optimizer,
                dim: h.dim.ok_or_else(|| Error::config("C", "pass --dim"))?,
                stats: Default::default(),
                exact: false,
                lambda_u: None,
            }
        }
    };
    let o = &mut req.optimizer;
    if let Some(k) = &h.optimizer {
        o.kind = parse_kind(k)?;
    }
    o.lr = h.lr.unwrap_or(o.lr);
    o.weight_decay = h.weight_decay.unwrap_or(o.weight_decay);
    o.momentum = h.momentum.unwrap_or(o.momentum);
    o.beta1 = h.beta1.unwrap_or(o.beta1);
    o.beta2 = h.beta2.unwrap_or(o.beta2);
    o.eps = h.eps.unwrap_or(o.eps);
    req.dim = h.dim.unwrap_or(req.dim);
    if args.grad_sq_norm.is_some() {
        req.stats.expected_sq_norm = args.grad_sq_norm;
    }
    if args.unit_grad_sq_norm.is_some() {
        req.stats.unit_expected_sq_norm = args.unit_grad_sq_norm;
    }
    req.exact |= args.exact;
    for (name, v) in [("lr", o.lr), ("weight_decay", o.weight_decay)] {
        if v.is_nan() {
            return Err(Error::config(format!("optimizer.{name}"), "missing"));
        }
    }
    o.validate()?;
    Ok(req)
}

fn cmd_predict(args: &PredictArgs) -> Status {
    match predict_request(args).and_then(|req| run_predict(&req)) {
        Ok(pred) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&pred).expect("prediction serializes")
            );
            Status::Pass
        }
        Err(e) => fail("predict", &e),
    }
}

fn converge_config(args: &ConvergeArgs) -> rotlab::Result<ConvergeConfig> {
    let mut value = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => serde_json::json!({}),
    };
    let map = value
        .as_object_mut()
        .ok_or_else(|| Error::config("converge", "config must be a JSON object"))?;
    let mut set = |key: &str, v: Option<serde_json::Value>| {
        if let Some(v) = v {
            map.insert(key.to_string(), v);
        }
    };
    set("seed", args.seed.map(Into::into));
    set("omega0_sq", args.omega0_sq.map(Into::into));
    set("lr", args.lr.map(Into::into));
    set("weight_decay", args.weight_decay.map(Into::into));
    set("C", args.dim.map(Into::into));
    set("steps", args.steps.map(Into::into));
    set("trials", args.trials.map(Into::into));
    ConvergeConfig::from_json(&value.to_string())
}

fn cmd_converge(args: &ConvergeArgs) -> Status {
    let run = || -> rotlab::Result<Status> {
        let cfg = converge_config(args)?;
        let report = run_converge(&cfg)?;
        let dir = out_dir(&args.out).join(&cfg.name);
        std::fs::create_dir_all(&dir)?;
        let file = std::io::BufWriter::new(std::fs::File::create(dir.join("converge.csv"))?);
        write_converge_csv(&report, file)?;
        let fp = report.fixed_point.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        let err = report.max_rel_error.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "{}\tfixed_point {}\tmax_rel_error {} (tol {}%)\t{}",
            cfg.name,
            fp,
            err,
            report.tolerance_pct,
            match report.pass {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "n/a",
            }
        );
        Ok(if report.pass == Some(false) {
            Status::CheckFail
        } else {
            Status::Pass
        })
    };
    run().unwrap_or_else(|e| fail("converge", &e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let status = match &cli.command {
        Command::Predict(a) => cmd_predict(a),
        Command::Run(a) => cmd_run(a),
        Command::Check(a) => cmd_check(a),
        Command::Converge(a) => cmd_converge(a),
    };
    ExitCode::from(status as u8)
}
