use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowattack::experiment::{
    cmd_attack, cmd_blackbox, cmd_detect, cmd_gen_scenes, cmd_sweep_alpha, cmd_ttc, cmd_viz, ExperimentConfig,
    RunOptions,
};

#[derive(Parser)]
#[command(name = "flowattack", version, about = "Targeted adversarial attacks on optical flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Restrict to one scene id.
    #[arg(long)]
    scene: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured attack on one scene.
    Attack(Common),
    /// Sweep the consistency coefficient over the scene suite.
    SweepAlpha(Common),
    /// Transfer matrix across a family of estimator variants.
    Blackbox(Common),
    /// Detection score versus downstream impact curves.
    Detect(Common),
    /// Time-to-collision maps of clean and attacked flows.
    Ttc(Common),
    /// Color-code a flow file.
    Viz {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fixed normalization magnitude (default: 99th percentile).
        #[arg(long)]
        max_magnitude: Option<f64>,
    },
    /// Export the scene suite as PNG frames, label PNGs and .flo ground truth.
    GenScenes(Common),
}

fn setup(c: &Common) -> flowattack::Result<(ExperimentConfig, RunOptions)> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok((
        cfg,
        RunOptions {
            out: c.out.clone(),
            workers: c.workers,
            scene: c.scene.clone(),
        },
    ))
}

fn run(cli: Cli) -> flowattack::Result<()> {
    match cli.command {
        Command::Attack(c) => setup(&c).and_then(|(cfg, o)| cmd_attack(&cfg, &o)),
        Command::SweepAlpha(c) => setup(&c).and_then(|(cfg, o)| cmd_sweep_alpha(&cfg, &o).map(drop)),
        Command::Blackbox(c) => setup(&c).and_then(|(cfg, o)| cmd_blackbox(&cfg, &o).map(drop)),
        Command::Detect(c) => setup(&c).and_then(|(cfg, o)| cmd_detect(&cfg, &o).map(drop)),
        Command::Ttc(c) => setup(&c).and_then(|(cfg, o)| cmd_ttc(&cfg, &o)),
        Command::GenScenes(c) => setup(&c).and_then(|(cfg, o)| cmd_gen_scenes(&cfg, &o)),
        Command::Viz {
            input,
            out,
            max_magnitude,
        } => cmd_viz(&input, &out, max_magnitude),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
