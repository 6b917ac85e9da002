use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pixnerd_core::config::TrainConfig;
use pixnerd_core::harness::{
    bench_run, eval_run, load_dataset, load_model, output_root, sample_run, train_run, SampleRequest,
};
use pixnerd_core::solver::{GuidanceConfig, SampleOptions, SolverKind, Warmup};

#[derive(Parser, Debug)]
#[command(name = "pixnerd", version, about = "Pixel-space neural-field diffusion")]
struct Cli {
    /// Output root; defaults to $PIXNERD_OUT or ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Sample images from a checkpoint.
    Sample(SampleArgs),
    /// Sample one image per class and score it against the training data.
    Eval(EvalArgs),
    /// Time the neural-field head against a linear head.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let overrides = self
            .set
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        TrainConfig::resolve(text.as_deref(), &overrides).map_err(|e| usage(e.to_string()))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Shorthand for `--set train.steps=N`.
    #[arg(long)]
    steps: Option<usize>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Accept a checkpoint written under a different configuration.
    #[arg(long, requires = "resume")]
    force: bool,
    /// Log every N steps.
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SolverArg {
    Euler,
    Adams2,
    Adams4,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WarmupArg {
    Lower,
    Rk4,
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, value_enum, default_value = "adams2")]
    solver: SolverArg,
    /// How Adams methods start before their history is full.
    #[arg(long, value_enum, default_value = "lower")]
    warmup: WarmupArg,
    /// Guidance scale; 1 disables guidance.
    #[arg(long, default_value_t = 3.5)]
    cfg: f64,
    /// Time interval in which guidance applies.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [0.1, 1.0])]
    cfg_interval: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output size as HxW; defaults to the training resolution.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<(usize, usize)>,
    /// Sample with the raw parameters instead of their EMA.
    #[arg(long)]
    no_ema: bool,
}

impl SolverArgs {
    fn options(&self) -> Result<SampleOptions> {
        if self.steps == 0 {
            return Err(usage("--steps must be at least 1"));
        }
        let guidance =
            GuidanceConfig::new(self.cfg, self.cfg_interval[0], self.cfg_interval[1]).map_err(|e| usage(e.to_string()))?;
        Ok(SampleOptions {
            steps: self.steps,
            solver: match self.solver {
                SolverArg::Euler => SolverKind::Euler,
                SolverArg::Adams2 => SolverKind::Adams2,
                SolverArg::Adams4 => SolverKind::Adams4,
            },
            guidance,
            warmup: match self.warmup {
                WarmupArg::Lower => Warmup::LowerOrder,
                WarmupArg::Rk4 => Warmup::RungeKutta4,
            },
            ..SampleOptions::default()
        })
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// Comma-separated class labels; defaults to one per class.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<u32>,
    /// PNG path; defaults to <out>/samples/seed<SEED>.png.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Directory for per-step clean-estimate frames.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 16)]
    patch: usize,
    #[arg(long, default_value_t = 256)]
    tokens: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

/// Marker for errors that should exit with the usage status.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in '{s}'"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in '{s}'"))?;
    if h == 0 || w == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((h, w))
}

fn train(out: &Path, args: &TrainArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let every = args.log_every.max(1);
    let outcome = train_run(cfg, out, args.resume.as_deref(), args.force, |m| {
        if m.step % every == 0 || m.step == 1 {
            log::info!(
                "step {:>6} flow {:.5} repa {:.5} grad {:.3} ({:.0} ms)",
                m.step,
                m.flow_loss,
                m.repa_loss,
                m.grad_norm,
                m.wallclock_ms
            );
        }
    })?;
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

fn sample(out: &Path, args: &SampleArgs) -> Result<()> {
    let options = args.solver.options()?;
    let (trainer, model) = load_model(&args.checkpoint, !args.solver.no_ema)?;
    let classes = trainer.config().model.num_classes as u32;
    let labels = if args.labels.is_empty() { (0..classes).collect() } else { args.labels.clone() };
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(usage(format!("label {bad} is outside the {classes} trained classes")));
    }
    let png = args
        .output
        .clone()
        .unwrap_or_else(|| out.join("samples").join(format!("seed{}.png", args.solver.seed)));
    let req = SampleRequest {
        labels,
        resolution: args.solver.resolution,
        options,
        seed: args.solver.seed,
    };
    let res = sample_run(&model, &req, &png, args.trajectory.as_deref())?;
    if res.diverged {
        log::warn!("sampling diverged (max |x| = {:.3e})", res.max_abs);
    }
    println!("{}", png.display());
    Ok(())
}

fn eval(out: &Path, args: &EvalArgs) -> Result<()> {
    let options = args.solver.options()?;
    let (trainer, model) = load_model(&args.checkpoint, !args.solver.no_ema)?;
    let data = load_dataset(trainer.config())?;
    let report = eval_run(&model, &data, args.solver.resolution, &options, args.solver.seed, Some(out))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn bench(out: &Path, args: &BenchArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    if args.patch == 0 {
        return Err(usage("--patch must be at least 1"));
    }
    let report = bench_run(&cfg, args.patch, args.tokens, args.batch, args.repeats, Some(out))?;
    println!("{}", report.summary());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let out = cli.out.clone().unwrap_or_else(output_root);
    let result = match &cli.command {
        Command::Train(a) => train(&out.join("train"), a),
        Command::Sample(a) => sample(&out, a),
        Command::Eval(a) => eval(&out.join("eval"), a),
        Command::Bench(a) => bench(&out.join("bench"), a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
