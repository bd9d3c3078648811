mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "aeroreformer",
    version,
    about = "Aerial referring segmentation toolkit"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for every artifact of the run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a referring-segmentation dataset from labelled imagery.
    Datagen(DatagenArgs),
    /// Finite-difference check of every differentiable op and block.
    Gradcheck(GradcheckArgs),
    /// Overfit the smoke model to one synthetic sample.
    TrainDemo(TrainArgs),
    /// Score prediction masks against an annotation file.
    Eval(EvalArgs),
    /// Run the model once and write the predicted mask.
    Forward(ForwardArgs),
}

#[derive(Args, Debug)]
struct DatagenArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    classes: Option<PathBuf>,
    /// `stub` or `http`.
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    seeds: Option<u64>,
    /// Comma-separated case names.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// Corrupt this op's backward pass, to confirm the check catches it.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    disable_vlcam: bool,
    #[arg(long)]
    disable_ramsf: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Decode and score samples on all cores.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Debug)]
struct ForwardArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',')]
    tokens: Vec<usize>,
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    match &cli.command {
        Command::Datagen(a) => {
            let d = &mut cfg.datagen;
            if a.input.is_some() {
                d.input = a.input.clone();
            }
            if a.classes.is_some() {
                d.classes = a.classes.clone();
            }
            if let Some(p) = &a.provider {
                d.pipeline.provider = match p.as_str() {
                    "stub" => aeroreformer_datagen::ProviderKind::Stub,
                    "http" => aeroreformer_datagen::ProviderKind::Http,
                    other => anyhow::bail!("unknown provider `{other}` (expected stub or http)"),
                };
            }
            if let Some(t) = a.threads {
                d.pipeline.threads = t;
            }
        }
        Command::Gradcheck(a) => {
            if let Some(s) = a.seeds {
                cfg.gradcheck.seeds = s;
            }
            if !a.only.is_empty() {
                cfg.gradcheck.only = a.only.clone();
            }
        }
        Command::TrainDemo(a) => {
            let t = &mut cfg.train;
            if let Some(i) = a.iters {
                t.optim.iters = i;
            }
            if let Some(lr) = a.lr {
                t.optim.lr = lr;
            }
            if a.disable_vlcam {
                t.model.enable_vlcam = false;
            }
            if a.disable_ramsf {
                t.model.enable_ramsf = false;
            }
        }
        Command::Eval(a) => {
            let e = &mut cfg.eval;
            if a.pred.is_some() {
                e.pred = a.pred.clone();
            }
            if a.annotations.is_some() {
                e.annotations = a.annotations.clone();
            }
            if a.split.is_some() {
                e.split = a.split.clone();
            }
            e.parallel |= a.parallel;
        }
        Command::Forward(a) => {
            let f = &mut cfg.forward;
            if a.checkpoint.is_some() {
                f.checkpoint = a.checkpoint.clone();
            }
            if a.image.is_some() {
                f.image = a.image.clone();
            }
            if !a.tokens.is_empty() {
                f.tokens = a.tokens.clone();
            }
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|cfg| {
        cfg.save(&cfg.out)?;
        match &cli.command {
            Command::Datagen(_) => commands::datagen(&cfg),
            Command::Gradcheck(a) => commands::gradcheck(&cfg, a.inject_fault.clone()),
            Command::TrainDemo(_) => commands::train_demo(&cfg),
            Command::Eval(_) => commands::eval(&cfg),
            Command::Forward(_) => commands::forward(&cfg),
        }
    });
    match result {
        Ok(commands::Status::Ok) => ExitCode::SUCCESS,
        Ok(commands::Status::ChecksFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", commands::describe(&e));
            ExitCode::from(2)
        }
    }
}
