//! `rlfb`: runs the adaptation experiment stage by stage from one config.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use rlfb_core::pipeline::{
    default_arms, find_metric_files, read_metric_file, run_sweep, Arm, Pipeline,
};
use rlfb_core::report::{build_table, render};
use rlfb_core::trainers::Algorithm;
use rlfb_core::{Error, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "rlfb", version, about = "LM-feedback adaptation of a toy recognizer")]
struct Cli {
    /// TOML config with dotted keys; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic world and its splits.
    World,
    /// Supervised pretraining on the source split.
    Pretrain,
    /// Train the reward LM on the text-only split.
    TrainLm,
    /// Adapt the pretrained policy on unlabeled target audio.
    Adapt {
        #[arg(long, value_parser = parse_algo)]
        algo: Algorithm,
        /// Score with the generic prompt instead of the domain prompt.
        #[arg(long)]
        no_context: bool,
    },
    /// Score the baseline and every adapted arm on the test split.
    Eval,
    /// Render the benchmark table from metric files.
    Report {
        /// Metric files or directories; defaults to the output root.
        inputs: Vec<PathBuf>,
        /// Also write the table as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run every stage for each value of one config key.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Seeds per value; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Every stage and every arm, then the report.
    All {
        /// Seeds to run; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn parse_algo(s: &str) -> Result<Algorithm, String> {
    s.parse::<Algorithm>().map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> anyhow::Result<(String, Vec<String>, RunConfig)> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::from_toml_str(&text, &overrides)?;
    Ok((text, overrides, cfg))
}

fn report(root: &std::path::Path, inputs: &[PathBuf], json: Option<&PathBuf>) -> anyhow::Result<()> {
    let mut paths = Vec::new();
    let inputs = if inputs.is_empty() { vec![root.to_path_buf()] } else { inputs.to_vec() };
    for i in &inputs {
        if i.is_dir() {
            paths.extend(find_metric_files(i)?);
        } else {
            paths.push(i.clone());
        }
    }
    if paths.is_empty() {
        return Err(Error::MissingArtifact {
            path: root.join("seed-<seed>/eval"),
            stage: "eval".into(),
        }
        .into());
    }
    let files = paths.iter().map(|p| read_metric_file(p)).collect::<Result<Vec<_>, _>>()?;
    let table = build_table(&files)?;
    print!("{}", render(&table));
    if let Some(j) = json {
        std::fs::write(j, serde_json::to_string_pretty(&table)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (text, overrides, cfg) = load_config(&cli)?;
    let root = cfg.output_root();
    let pipeline = Pipeline::new(cfg.clone());
    match &cli.command {
        Command::World => {
            pipeline.world()?;
        }
        Command::Pretrain => {
            let m = pipeline.pretrain()?;
            println!("pretrain checkpoint {}", m.checkpoint_id.unwrap_or_default());
        }
        Command::TrainLm => {
            let m = pipeline.train_lm()?;
            println!("lm checkpoint {}", m.checkpoint_id.unwrap_or_default());
        }
        Command::Adapt { algo, no_context } => {
            let arm = Arm {
                algo: *algo,
                use_context: !no_context,
            };
            let m = pipeline.adapt(arm)?;
            println!("{} checkpoint {}", arm.name(), m.checkpoint_id.unwrap_or_default());
        }
        Command::Eval => {
            for p in pipeline.eval()? {
                println!("{}", p.display());
            }
        }
        Command::Report { inputs, json } => report(&root, inputs, json.as_ref())?,
        Command::Sweep { param, values, seeds } => {
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.clone() };
            for point in run_sweep(&text, &overrides, param, values, &seeds, &default_arms())? {
                println!("{} = {}", point.param, point.value);
                print!("{}", render(&point.table));
                println!();
            }
        }
        Command::All { seeds } => {
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.clone() };
            for s in seeds {
                let mut c = cfg.clone();
                c.seed = s;
                Pipeline::new(c).run_all(&default_arms())?;
            }
            report(&root, &[], Some(&root.join("report.json")))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<Error>(), Some(Error::Usage(_) | Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
