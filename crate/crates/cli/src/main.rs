use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spectra_cli::{
    cmd_ablate, cmd_eval, cmd_gradcheck, cmd_predict_map, cmd_synth, cmd_train, parse_overrides, threads_from_env,
    CliError, RunConfig,
};

/// Hyperspectral scene classification with a hybrid CNN/Transformer network.
#[derive(Parser)]
#[command(name = "spectra", version)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value config file; flags below override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Scene seed for `synth`, split/init/shuffle seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Ablation case, 1 to 5.
    #[arg(long, global = true)]
    case: Option<u8>,

    /// Override any config key. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Print the effective configuration before running.
    #[arg(long, global = true)]
    show_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled scene (manifest, cube, ground truth).
    Synth {
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        bands: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        /// Standard deviation of the pixel noise.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Train on a scene and write a checkpoint plus logs.
    Train {
        /// Scene manifest.
        #[arg(long, value_name = "MANIFEST")]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on the test pixels of its split.
    Eval {
        #[arg(long, value_name = "MANIFEST")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Classify every pixel and write the map.
    PredictMap {
        #[arg(long, value_name = "MANIFEST")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of the full training loss.
    Gradcheck,
    /// Train and score ablation cases 1 to 5 on one split.
    Ablate {
        #[arg(long, value_name = "MANIFEST")]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    let mut kv = parse_overrides(&c.set)?;
    let is_synth = matches!(cli.command, Command::Synth { .. });
    if let Some(s) = c.seed {
        kv.set(if is_synth { "synth.seed" } else { "seed" }, s);
    }
    if let Some(o) = &c.out {
        kv.set("out", o.display());
    }
    if let Some(case) = c.case {
        kv.set("case", case);
    }
    let mut put = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.set(key, v);
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    match &cli.command {
        Command::Synth {
            height,
            width,
            bands,
            classes,
            sigma,
        } => {
            put("synth.height", height.map(|v| v.to_string()));
            put("synth.width", width.map(|v| v.to_string()));
            put("synth.bands", bands.map(|v| v.to_string()));
            put("synth.classes", classes.map(|v| v.to_string()));
            put("synth.sigma", sigma.map(|v| v.to_string()));
        }
        Command::Train { data, epochs } | Command::Ablate { data, epochs } => {
            put("data", path(data));
            put("epochs", epochs.map(|v| v.to_string()));
        }
        Command::Eval { data, checkpoint } | Command::PredictMap { data, checkpoint } => {
            put("data", path(data));
            put("checkpoint", path(checkpoint));
        }
        Command::Gradcheck => {}
    }
    let cfg = RunConfig::load(c.config.as_deref(), &kv)?;
    if c.show_config {
        print!("{}", cfg.dump());
    }

    let stdout = std::io::stdout();
    let w = &mut stdout.lock();
    match cli.command {
        Command::Synth { .. } => cmd_synth(&cfg, w).map(drop),
        Command::Train { .. } => cmd_train(&cfg, w).map(drop),
        Command::Eval { .. } => cmd_eval(&cfg, w).map(drop),
        Command::PredictMap { .. } => cmd_predict_map(&cfg, w).map(drop),
        Command::Gradcheck => cmd_gradcheck(&cfg, w).map(drop),
        Command::Ablate { .. } => cmd_ablate(&cfg, threads_from_env()?, w).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
