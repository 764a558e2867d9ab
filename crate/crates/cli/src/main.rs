//! `acnet`: synthetic data, training, evaluation, gate visualisation and
//! gradient verification.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use acnet_core::config::RunConfig;
use acnet_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "acnet", version, about = "Adaptive context network on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one configuration key, e.g. `--set optim.base_lr=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (overrides `run.output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Top-level seed (overrides `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelKind {
    Acnet,
    Fcn,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Op,
    Module,
    Network,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes synthetic scenes and a manifest to the output directory.
    Synth {
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Trains a model and writes the log and checkpoints.
    Train {
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        /// Baseline plus a single global context module.
        #[arg(long)]
        gcm_only: bool,
        /// Number of adaptive context blocks (1 to 3).
        #[arg(long)]
        acb: Option<usize>,
        /// Fusion repetitions inside each local context module.
        #[arg(long)]
        lcm_reuse: Option<usize>,
        /// Amplitude of the global gate.
        #[arg(long)]
        delta: Option<f64>,
        /// Online hard example mining.
        #[arg(long)]
        ohem: bool,
        /// Dilations (4, 8, 16) in the last backbone stage.
        #[arg(long)]
        multigrid: bool,
        /// Random rescaling in [0.5, 2.2].
        #[arg(long)]
        scale_aug: bool,
        /// Number of iterations (overrides `optim.total_iters`).
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Evaluates a checkpoint on the validation set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Multi-scale testing over 0.5 to 2.25.
        #[arg(long)]
        ms: bool,
        /// Adds left-right mirrored inputs.
        #[arg(long)]
        mirror: bool,
    },
    /// Writes gate heatmaps and colourised prediction and label rasters.
    Viz {
        /// Weights to load; an untrained model is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of validation samples to render.
        #[arg(long, default_value_t = 1)]
        samples: usize,
    },
    /// Runs finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ScopeArg::Op)]
        scope: ScopeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure classes and their exit codes.
pub enum Failure {
    Usage(String),
    Runtime(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Parameter(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    for s in &cli.common.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: String| out.push((k.to_string(), v));
    if let Some(dir) = &cli.common.out {
        push("run.output_dir", dir.display().to_string());
    }
    if let Some(seed) = cli.common.seed {
        push("run.seed", seed.to_string());
    }
    if let Command::Train { model, gcm_only, acb, lcm_reuse, delta, ohem, multigrid, scale_aug, iters } = &cli.command {
        match model {
            Some(ModelKind::Fcn) => push("network.architecture", "fcn".into()),
            Some(ModelKind::Acnet) => push("network.architecture", "acnet".into()),
            None => {}
        }
        if *gcm_only {
            push("network.architecture", "gcm".into());
        }
        if let Some(n) = acb {
            push("network.architecture", "acnet".into());
            push("network.blocks", n.to_string());
        }
        if let Some(n) = lcm_reuse {
            push("network.lcm_reuse", n.to_string());
        }
        if let Some(d) = delta {
            push("network.delta", d.to_string());
        }
        if *ohem {
            push("loss.ohem", "true".into());
        }
        if *multigrid {
            push("network.dilations", "4,8,16".into());
        }
        if *scale_aug {
            push("augment.scale_range", "0.5,2.2".into());
        }
        if let Some(n) = iters {
            push("optim.total_iters", n.to_string());
        }
    }
    Ok(out)
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let text = match &cli.common.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?,
        None => String::new(),
    };
    Ok(RunConfig::parse_with_overrides(&text, &overrides(cli)?)?)
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("ACNET_THREADS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| Failure::Usage(format!("ACNET_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(Failure::Usage("ACNET_THREADS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    init_threads()?;
    if let Command::Gradcheck { scope, seed } = &cli.command {
        let scope = match scope {
            ScopeArg::Op => acnet_core::verify::Scope::Op,
            ScopeArg::Module => acnet_core::verify::Scope::Module,
            ScopeArg::Network => acnet_core::verify::Scope::Network,
        };
        return commands::gradcheck(scope, *seed);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { count } => commands::synth(&cfg, *count),
        Command::Train { .. } => commands::train(&cfg),
        Command::Eval { checkpoint, ms, mirror } => commands::eval(&cfg, checkpoint, *ms, *mirror),
        Command::Viz { checkpoint, samples } => commands::viz(&cfg, checkpoint.as_deref(), *samples),
        Command::Gradcheck { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Runtime(m) | Failure::Verification(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
