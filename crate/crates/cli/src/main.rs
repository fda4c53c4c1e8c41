mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Query-based Gaussian splatting pre-training toolkit.
#[derive(Debug, Parser)]
#[command(name = "sqs", version)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed for every generator; overrides the config and `SQS_SEED`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (all cores when omitted). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root; overrides `data_dir`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes with baked views and sparse depth masks.
    GenData {
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Self-supervised pre-training on a generated dataset.
    Pretrain {
        /// Validate the configuration and exit.
        #[arg(long)]
        dry_run: bool,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render decoded Gaussians for one scene next to its ground truth.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory (`scenes/<id>`).
        #[arg(long)]
        scene: PathBuf,
    },
    /// Fine-tune the occupancy task on top of a frozen pre-trained model.
    Finetune {
        #[arg(long)]
        pretrained: PathBuf,
        #[command(flatten)]
        task: TaskFlags,
        /// Fraction of training scenes used, rounded up.
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Occupancy IoU of a fine-tuned task model on the held-out scenes.
    Eval {
        #[arg(long)]
        pretrained: PathBuf,
        /// Task checkpoint written by `finetune`.
        #[arg(long)]
        task: PathBuf,
        #[command(flatten)]
        flags: TaskFlags,
    },
    /// Finite-difference checks of the renderer, decoder and interaction.
    Gradcheck {
        /// Elements checked per parameter group.
        #[arg(long, default_value_t = 32)]
        per_group: usize,
        /// Negate analytic gradients (negative control; must fail).
        #[arg(long, hide = true)]
        inject_wrong_sign: bool,
    },
}

#[derive(Debug, Args)]
struct TaskFlags {
    /// Skip opacity filtering and query interaction.
    #[arg(long)]
    no_interaction: bool,
    /// Neighbors per task query.
    #[arg(long)]
    k: Option<usize>,
    /// Minimum opacity of a pre-trained Gaussian used for interaction.
    #[arg(long)]
    alpha_thresh: Option<f64>,
    /// Occupancy grid side length.
    #[arg(long)]
    grid: Option<usize>,
}

impl TaskFlags {
    fn overrides(&self, out: &mut Vec<String>) {
        if self.no_interaction {
            out.push("finetune.interaction=false".into());
        }
        if let Some(k) = self.k {
            out.push(format!("finetune.k={k}"));
        }
        if let Some(a) = self.alpha_thresh {
            out.push(format!("finetune.alpha_thresh={a:?}"));
        }
        if let Some(g) = self.grid {
            out.push(format!("finetune.grid={g}"));
        }
    }
}

/// Exit status 1 for usage and configuration problems, 2 for failures at run time.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<sqs_core::Error> for CliError {
    fn from(e: sqs_core::Error) -> Self {
        use sqs_core::Error as E;
        match e {
            E::Config(_) | E::InvalidArgument(_) | E::MissingFile(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out_dir={:?}", o.display().to_string()));
    }
    if let Some(d) = &cli.data {
        overrides.push(format!("data_dir={:?}", d.display().to_string()));
    }
    match &cli.command {
        Command::Finetune {
            task, train_fraction, ..
        } => {
            task.overrides(&mut overrides);
            if let Some(f) = train_fraction {
                overrides.push(format!("finetune.train_fraction={f:?}"));
            }
        }
        Command::Eval { flags, .. } => flags.overrides(&mut overrides),
        _ => {}
    }
    let mut cfg = config::RunConfig::load(cli.config.as_deref(), &overrides)?;
    cfg.resolve_seed()?;
    match cli.command {
        Command::GenData { force } => commands::gen_data(&cfg, force),
        Command::Pretrain { dry_run, resume } => commands::pretrain(&cfg, dry_run, resume.as_deref()),
        Command::Render { checkpoint, scene } => commands::render(&cfg, &checkpoint, &scene),
        Command::Finetune { pretrained, .. } => commands::finetune(&cfg, &pretrained),
        Command::Eval { pretrained, task, .. } => commands::eval(&cfg, &pretrained, &task),
        Command::Gradcheck {
            per_group,
            inject_wrong_sign,
        } => commands::gradcheck(&cfg, per_group, inject_wrong_sign),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
