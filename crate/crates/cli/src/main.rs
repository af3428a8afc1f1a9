//! `embnav`: batch drivers for every method plus the session service.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use embnav_core::encode::DEFAULT_WEIGHT_SEED;
use embnav_core::io::{
    interpolation_strip, read_emb_for, read_trajectory_dir, write_emb, write_evaluation_csv, write_image_png,
    write_seedinv_dir, write_subspace_csv, write_trajectory_dir, InterpMethod,
};
use embnav_core::optimize::uniform_grid;
use embnav_core::{
    encode, evaluate_across_seeds, optimize_metric, sample_latent, seed_invariant_optimize, subspace_1d_traverse,
    Direction, FeedbackConfig, Generator, GeneratorConfig, MetricKind, OptimizeConfig, OptimizerKind, PromptText,
    SeedInvConfig,
};
use embnav_service::{AppState, DEFAULT_PORT};
use serde_json::json;

const WEIGHT_SEED_VAR: &str = "EMBNAV_WEIGHT_SEED";

#[derive(Parser)]
#[command(name = "embnav", version, about = "Prompt-embedding manipulation on a deterministic toy generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Blurriness,
    Sharpness,
    Aesthetic,
}

impl From<Metric> for MetricKind {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Blurriness => MetricKind::Blurriness,
            Metric::Sharpness => MetricKind::Sharpness,
            Metric::Aesthetic => MetricKind::Aesthetic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Dir {
    Min,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Slerp,
    Nlerp,
    Lerp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optimizer {
    Adam,
    Gd,
}

impl From<Optimizer> for OptimizerKind {
    fn from(o: Optimizer) -> Self {
        match o {
            Optimizer::Adam => OptimizerKind::adam(),
            Optimizer::Gd => OptimizerKind::VanillaGd,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Encode a prompt to an .emb file.
    Encode {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an embedding with the latent of one seed.
    Render {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a strip of images between two embeddings.
    Interpolate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value = "slerp")]
        method: Method,
        #[arg(long, default_value_t = 9)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Optimize an embedding against an image metric.
    Optimize {
        #[arg(long)]
        prompt: String,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Defaults to the metric's natural direction.
        #[arg(long, value_enum)]
        direction: Option<Dir>,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, value_enum, default_value = "adam")]
        optimizer: Optimizer,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        snapshot_every: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Re-evaluate a trajectory's snapshots on other seeds.
    EvalSeeds {
        #[arg(long)]
        trajectory_dir: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Make a prompt's image robust to the latent seed.
    SeedInvariance {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, value_enum, default_value = "gd")]
        optimizer: Optimizer,
        /// Held-out seeds; derived from --seed when omitted.
        #[arg(long, value_delimiter = ',')]
        validation_seeds: Option<Vec<u64>>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Trade prompt mixing against seed mixing along one slerp path.
    #[command(name = "subspace-1d")]
    Subspace1d {
        #[arg(long)]
        prompt_a: String,
        #[arg(long)]
        prompt_b: String,
        #[arg(long, default_value_t = 1)]
        seed1: u64,
        #[arg(long, default_value_t = 2)]
        seed2: u64,
        #[arg(long, default_value_t = 11)]
        grid: usize,
        #[arg(long, default_value_t = 50)]
        inner_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the session API.
    Serve {
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Journal directory; existing logs in it are replayed at startup.
        #[arg(long)]
        journal: Option<PathBuf>,
    },
}

/// Usage problems found after clap parsing; they exit with status 2.
struct Usage(String);

fn generator_config() -> Result<GeneratorConfig, Usage> {
    let weight_seed = match std::env::var(WEIGHT_SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Usage(format!("{WEIGHT_SEED_VAR}={v:?} is not an unsigned integer")))?,
        Err(_) => DEFAULT_WEIGHT_SEED,
    };
    Ok(GeneratorConfig {
        weight_seed,
        ..Default::default()
    })
}

fn report(command: &str, gcfg: &GeneratorConfig, settings: serde_json::Value) {
    let fb = FeedbackConfig::default();
    let resolved = json!({
        "command": command,
        "generator": gcfg,
        "feedback": { "k": fb.k, "kappa": fb.kappa, "mu": fb.mu, "pool_size": fb.pool_size },
        "settings": settings,
    });
    eprintln!("config: {resolved}");
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn run(cmd: Command, gcfg: GeneratorConfig) -> embnav_core::Result<()> {
    match cmd {
        Command::Encode { prompt, out } => {
            report("encode", &gcfg, json!({ "prompt": prompt, "out": path_str(&out) }));
            write_emb(&out, &encode(&PromptText::new(prompt), &gcfg)?)?;
        }
        Command::Render { emb, seed, out } => {
            report("render", &gcfg, json!({ "emb": path_str(&emb), "seed": seed, "out": path_str(&out) }));
            let gen = Generator::new(gcfg)?;
            let c = read_emb_for(&emb, gen.config())?;
            write_image_png(&out, &gen.generate(&c, &sample_latent(seed, gen.config()))?)?;
        }
        Command::Interpolate { a, b, method, steps, seed, out_dir } => {
            let method = match method {
                Method::Slerp => InterpMethod::Slerp,
                Method::Nlerp => InterpMethod::Nlerp,
                Method::Lerp => InterpMethod::Lerp,
            };
            report(
                "interpolate",
                &gcfg,
                json!({ "a": path_str(&a), "b": path_str(&b), "method": method, "steps": steps, "seed": seed, "out_dir": path_str(&out_dir) }),
            );
            let gen = Generator::new(gcfg)?;
            let (ea, eb) = (read_emb_for(&a, gen.config())?, read_emb_for(&b, gen.config())?);
            let frames = interpolation_strip(&gen, &ea, &eb, &sample_latent(seed, gen.config()), steps, method)?;
            std::fs::create_dir_all(&out_dir)?;
            for (i, img) in frames.iter().enumerate() {
                write_image_png(out_dir.join(format!("frame_{i:03}.png")), img)?;
            }
        }
        Command::Optimize { prompt, metric, direction, iters, lr, optimizer, seed, snapshot_every, out_dir } => {
            let mut cfg = OptimizeConfig::new(metric.into());
            if let Some(d) = direction {
                cfg.direction = match d {
                    Dir::Min => Direction::Minimize,
                    Dir::Max => Direction::Maximize,
                };
            }
            cfg.max_iters = iters;
            cfg.lr = lr;
            cfg.optimizer = optimizer.into();
            cfg.seed = seed;
            cfg.snapshot_every = snapshot_every;
            report("optimize", &gcfg, json!({ "prompt": prompt, "optimize": cfg, "out_dir": path_str(&out_dir) }));
            let gen = Generator::new(gcfg)?;
            let traj = optimize_metric(&gen, &PromptText::new(prompt), &cfg)?;
            write_trajectory_dir(&out_dir, &traj)?;
            println!(
                "{}: {} -> {} over {} iterations",
                cfg.metric,
                traj.initial().value,
                traj.last().value,
                iters
            );
            if !traj.band_exits.is_empty() {
                log::warn!("embedding left the norm band at iterations {:?}", traj.band_exits);
            }
        }
        Command::EvalSeeds { trajectory_dir, seeds, out } => {
            report(
                "eval-seeds",
                &gcfg,
                json!({ "trajectory_dir": path_str(&trajectory_dir), "seeds": seeds, "out": path_str(&out) }),
            );
            let gen = Generator::new(gcfg)?;
            let traj = read_trajectory_dir(&trajectory_dir)?;
            let eval = evaluate_across_seeds(&gen, &traj, &seeds)?;
            write_evaluation_csv(&out, &eval)?;
            if let (Some(first), Some(last)) = (eval.mean.first(), eval.mean.last()) {
                println!("mean over {} seeds: {first} -> {last}", seeds.len());
            }
        }
        Command::SeedInvariance { prompt, seed, steps, batch, lr, optimizer, validation_seeds, out_dir } => {
            let cfg = SeedInvConfig {
                steps,
                batch,
                lr,
                optimizer: optimizer.into(),
                validation_seeds,
            };
            report(
                "seed-invariance",
                &gcfg,
                json!({ "prompt": prompt, "seed": seed, "seedinv": cfg, "out_dir": path_str(&out_dir) }),
            );
            let gen = Generator::new(gcfg)?;
            let (c, rep) = seed_invariant_optimize(&gen, &PromptText::new(prompt), seed, &cfg)?;
            write_seedinv_dir(&out_dir, &c, &rep)?;
            println!(
                "validation distance {} -> {} ({:.1}% reduction)",
                rep.mean_baseline(),
                rep.mean_result(),
                100.0 * rep.relative_reduction()
            );
        }
        Command::Subspace1d { prompt_a, prompt_b, seed1, seed2, grid, inner_iters, out } => {
            report(
                "subspace-1d",
                &gcfg,
                json!({ "prompt_a": prompt_a, "prompt_b": prompt_b, "seed1": seed1, "seed2": seed2, "grid": grid, "inner_iters": inner_iters, "out": path_str(&out) }),
            );
            let gen = Generator::new(gcfg)?;
            let g = gen.config();
            let a = encode(&PromptText::new(prompt_a), g)?;
            let b = encode(&PromptText::new(prompt_b), g)?;
            let pts = subspace_1d_traverse(
                &gen,
                &a,
                &b,
                &sample_latent(seed1, g),
                &sample_latent(seed2, g),
                &uniform_grid(grid),
                inner_iters,
            )?;
            write_subspace_csv(&out, &pts)?;
        }
        Command::Serve { port, host, journal } => {
            report(
                "serve",
                &gcfg,
                json!({ "host": host.to_string(), "port": port, "journal": journal.as_deref().map(path_str) }),
            );
            let mut state = AppState::new(Generator::new(gcfg)?, FeedbackConfig::default());
            if let Some(dir) = journal {
                if dir.is_dir() {
                    let ids = state.restore(&dir)?;
                    log::info!("restored {} session(s) from {}", ids.len(), dir.display());
                }
                state = state.with_journal(dir);
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(embnav_service::serve(SocketAddr::new(host, port), Arc::new(state)))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let gcfg = match generator_config() {
        Ok(c) => c,
        Err(Usage(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command, gcfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
