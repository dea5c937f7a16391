//! The `imf` command line: dataset generation, training, evaluation, the
//! oracle suite and the memory benchmark.
//!
//! Precedence: built-in defaults, then the `--config` file, then flags.

pub mod config;
pub mod output;
pub mod verify;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::data::{load_dataset, save_dataset, Dataset, SetSample};
use crate::error::Error;
use crate::eval::{mean_jc, retention_profile, InferenceConfig, InferenceMode, RetentionProfile};
use crate::multilinear::ScalingMode;
use crate::setfn::SetFunctionModel;
use crate::train::{architecture_for, train_with, GradientMode};

pub use config::RunConfig;

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "IMF_THREADS";

pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
}

#[derive(Debug, Parser)]
#[command(name = "imf", version, about = "Learn set functions with mean-field inference and implicit differentiation")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML configuration file; every field is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialisation and Monte Carlo samples.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Only print the config hash and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and write its train and test splits.
    GenData {
        /// gaussian or moons
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        ground_size: Option<usize>,
        #[arg(long)]
        subset_size: Option<usize>,
    },
    /// Train a model and write model.json and history.jsonl.
    Train {
        /// Training split (default: OUT/train.jsonl under --out).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// implicit or unrolled
        #[arg(long)]
        gradient: Option<String>,
        /// none, constant, frobenius or nuclear
        #[arg(long)]
        scaling: Option<String>,
    },
    /// Evaluate a model and write metrics.jsonl.
    Eval {
        /// Model file (default: OUT/model.json under --out).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Test split (default: OUT/test.jsonl under --out).
        #[arg(long)]
        data: Option<PathBuf>,
        /// one-step or converge
        #[arg(long)]
        mode: Option<String>,
        /// Fail with exit code 1 below this mean Jaccard.
        #[arg(long)]
        min_jc: Option<f64>,
    },
    /// Run the oracle suite and write verify.jsonl.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Profile retained bytes against iterations and write profile.jsonl and profile.svg.
    BenchMemory {
        /// Comma-separated iteration counts.
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
    },
}

/// A command failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: exit::CONFIG,
            message: message.into(),
        }
    }

    fn metric(message: impl Into<String>) -> Self {
        Self {
            code: exit::FAILURE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence(_) | Error::NonFinite(_) | Error::LinearSolve(_) => exit::DIVERGENCE,
            _ => exit::CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn parse_value<T: serde::de::DeserializeOwned>(what: &str, raw: &str) -> std::result::Result<T, Failure> {
    serde_json::from_value(json!(raw)).map_err(|_| Failure::config(format!("invalid {what} `{raw}`")))
}

/// Reads the config file and applies the flags shared by every command.
fn base_config(common: &CommonArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn apply_command_flags(cfg: &mut RunConfig, cmd: &Command) -> CmdResult {
    match cmd {
        Command::GenData {
            dataset,
            size,
            ground_size,
            subset_size,
        } => {
            if let Some(d) = dataset {
                cfg.data.dataset = d.parse()?;
            }
            cfg.data.size = size.unwrap_or(cfg.data.size);
            cfg.data.ground_size = ground_size.unwrap_or(cfg.data.ground_size);
            cfg.data.subset_size = subset_size.unwrap_or(cfg.data.subset_size);
        }
        Command::Train {
            data,
            epochs,
            gradient,
            scaling,
        } => {
            if data.is_some() {
                cfg.data.train = data.clone();
            }
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            if let Some(g) = gradient {
                cfg.train.gradient = parse_value::<GradientMode>("gradient mode", g)?;
            }
            if let Some(s) = scaling {
                cfg.train.scaling.mode = parse_value::<ScalingMode>("scaling mode", s)?;
            }
        }
        Command::Eval {
            data, mode, min_jc, ..
        } => {
            if data.is_some() {
                cfg.data.test = data.clone();
            }
            if let Some(m) = mode {
                cfg.eval.mode = parse_value::<InferenceMode>("inference mode", m)?;
            }
            if min_jc.is_some() {
                cfg.eval.min_jc = *min_jc;
            }
        }
        Command::BenchMemory { k_list } => {
            if let Some(k) = k_list {
                cfg.bench.k_list = k.clone();
            }
        }
        Command::Verify { .. } => {}
    }
    Ok(())
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

/// Parses nothing; runs an already-parsed command and returns the exit code.
pub fn run(cli: Cli) -> i32 {
    match run_inner(cli) {
        Ok(()) => exit::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn run_inner(cli: Cli) -> CmdResult {
    let mut cfg = base_config(&cli.common)?;
    apply_command_flags(&mut cfg, &cli.command)?;
    let cfg = cfg.resolve()?;
    let hash = cfg.hash();
    println!("config-hash: {hash}");
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| Failure::config(format!("cannot create {}: {e}", cfg.out.display())))?;
    let ctx = Ctx {
        cfg,
        hash,
        quiet: cli.common.quiet,
    };
    match &cli.command {
        Command::GenData { .. } => gen_data(&ctx),
        Command::Train { .. } => train(&ctx),
        Command::Eval { model, .. } => evaluate(&ctx, model.clone()),
        Command::Verify { inject_fault } => run_verify(&ctx, inject_fault.as_deref()),
        Command::BenchMemory { .. } => bench_memory(&ctx),
    }
}

fn gen_data(ctx: &Ctx) -> CmdResult {
    let full = ctx.cfg.data.generate(ctx.cfg.seed)?;
    let (train, test) = full.split()?;
    let (tp, sp) = (ctx.cfg.out.join("train.jsonl"), ctx.cfg.out.join("test.jsonl"));
    save_dataset(&train, &tp)?;
    save_dataset(&test, &sp)?;
    ctx.say(format!(
        "wrote {} ({} samples) and {} ({} samples)",
        tp.display(),
        train.len(),
        sp.display(),
        test.len()
    ));
    Ok(())
}

fn load(path: &std::path::Path, what: &str) -> std::result::Result<Dataset, Failure> {
    if !path.exists() {
        return Err(Failure::config(format!("{what} {} does not exist", path.display())));
    }
    Ok(load_dataset(path)?)
}

fn train(ctx: &Ctx) -> CmdResult {
    let cfg = &ctx.cfg;
    let data = load(&cfg.train_path(), "training data")?;
    let start = Instant::now();
    let mut records = vec![(
        "header",
        json!({"config_hash": ctx.hash, "seed": cfg.seed, "samples": data.len()}),
    )];
    let init = SetFunctionModel::init(architecture_for(data.meta.d_f, cfg.train.depth), cfg.seed)?;
    let (model, history) = train_with(&data, &cfg.train, Some(init), |e| {
        ctx.say(format!(
            "epoch {:>3}  loss {:.5}  residual {:.2e}  iterations {:.1}  {:.1}s",
            e.epoch, e.mean_loss, e.mean_residual, e.mean_iterations, e.wall_seconds
        ))
    })?;
    for e in &history.epochs {
        records.push(("epoch", serde_json::to_value(e).expect("stats serialize")));
    }
    records.push(("summary", json!({"wall_seconds": start.elapsed().as_secs_f64()})));
    output::save_model(&model, &cfg.out.join("model.json"))?;
    output::write_jsonl(&cfg.out.join("history.jsonl"), &records)?;
    ctx.say(format!("wrote {}", cfg.out.join("model.json").display()));
    Ok(())
}

fn evaluate(ctx: &Ctx, model_path: Option<PathBuf>) -> CmdResult {
    let cfg = &ctx.cfg;
    let model_path = model_path.unwrap_or_else(|| cfg.out.join("model.json"));
    if !model_path.exists() {
        return Err(Failure::config(format!("model {} does not exist", model_path.display())));
    }
    let model = output::load_model(&model_path)?;
    let data_path = cfg.test_path();
    let data = load(&data_path, "test data")?;
    let mut inf = InferenceConfig::from_train(&cfg.train, cfg.eval.mode);
    inf.estimator.samples = cfg.eval.samples;
    let start = Instant::now();
    let m = mean_jc(&model, &data, &inf)?;
    let wall = start.elapsed().as_secs_f64();
    output::write_jsonl(
        &cfg.out.join("metrics.jsonl"),
        &[(
            "metrics",
            json!({
                "mean_jc": m.mean_jc,
                "per_sample": m.per_sample,
                "mode": m.mode,
                "config_hash": ctx.hash,
                "seed": cfg.seed,
                "wall_seconds": wall,
                "model": model_path,
                "data": data_path,
            }),
        )],
    )?;
    ctx.say(format!("mean JC ({}): {:.4} over {} samples", m.mode, m.mean_jc, data.len()));
    match cfg.eval.min_jc {
        Some(t) if m.mean_jc < t => Err(Failure::metric(format!(
            "mean JC {:.4} is below the required {t}",
            m.mean_jc
        ))),
        _ => Ok(()),
    }
}

fn run_verify(ctx: &Ctx, fault: Option<&str>) -> CmdResult {
    let fault = match fault {
        None => None,
        Some("sigma-prime-sign") => Some(verify::Fault::SigmaPrimeSign),
        Some(other) => return Err(Failure::config(format!("unknown fault `{other}`"))),
    };
    let results = verify::run_checks(ctx.cfg.verify.instances, ctx.cfg.seed, fault)?;
    let mut records = vec![("header", json!({"config_hash": ctx.hash, "seed": ctx.cfg.seed}))];
    for r in &results {
        ctx.say(format!(
            "{}  {:<42} measured {:.3e}  threshold {:.1e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.measured,
            r.threshold
        ));
        records.push(("check", serde_json::to_value(r).expect("check serializes")));
    }
    output::write_jsonl(&ctx.cfg.out.join("verify.jsonl"), &records)?;
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::metric(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}

fn bench_memory(ctx: &Ctx) -> CmdResult {
    let cfg = &ctx.cfg;
    let data = if cfg.train_path().exists() {
        load(&cfg.train_path(), "training data")?
    } else {
        let mut d = cfg.data.clone();
        d.size = d.size.min(3 * cfg.bench.batch_size.max(1));
        d.generate(cfg.seed)?
    };
    let take = cfg.bench.batch_size.min(data.len());
    let batch: Vec<&SetSample> = data.samples()[..take].iter().collect();
    let model = SetFunctionModel::init(architecture_for(data.meta.d_f, cfg.train.depth), cfg.seed)?;
    let profile = retention_profile(&model, &batch, &cfg.train, &cfg.bench.k_list, cfg.bench.repeats)?;
    let mut records = vec![(
        "header",
        json!({"config_hash": ctx.hash, "seed": cfg.seed, "batch_size": take}),
    )];
    for (mode, series) in [("unrolled", &profile.unrolled), ("implicit", &profile.implicit)] {
        for (k, s) in profile.k.iter().zip(series) {
            records.push(("point", json!({"mode": mode, "k": k, "min": s.min, "mean": s.mean, "max": s.max})));
            ctx.say(format!("{mode:<9} K={k:<4} retained {:.0} bytes", s.mean));
        }
    }
    records.push((
        "summary",
        json!({
            "unrolled_ratio": ratio(&profile.unrolled),
            "implicit_spread": RetentionProfile::spread(&profile.implicit),
        }),
    ));
    output::write_jsonl(&cfg.out.join("profile.jsonl"), &records)?;
    std::fs::write(cfg.out.join("profile.svg"), output::retention_svg(&profile))
        .map_err(Error::from)?;
    Ok(())
}

fn ratio(series: &[crate::eval::ByteStats]) -> f64 {
    match (series.first(), series.last()) {
        (Some(a), Some(b)) => b.mean / a.mean,
        _ => f64::NAN,
    }
}

/// Builds the global worker pool, honouring [`THREADS_ENV`].
pub fn init_threads() -> std::result::Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(e.to_string()))
}
