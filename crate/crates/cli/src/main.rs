mod plot;
mod runconfig;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use coworld::config::{Ablation, CoWorldConfig};
use coworld::envgrid::EnvSpec;
use coworld::evalkit::evaluate_agent;
use coworld::trainer::{
    coworld_train, generate_medium_replay, pretrain_source, AgentBundle, MetricsLog, ReplayGenOptions, Role, SourceDomain,
    CHECKPOINT_DIR, CONFIG_FILE, EVAL_SEED_OFFSET, METRICS_FILE, RUN_MANIFEST_FILE,
};
use coworld::{Error, Prng};
use rand::SeedableRng;

use plot::{render_metrics, MetricsTable};
use runconfig::RunConfigFile;

/// Process exit codes, one per error class.
mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    /// Bad command-line flags (reported by clap).
    pub const CLI: u8 = 2;
    pub const CONFIG: u8 = 3;
    /// Malformed checkpoint, episode, manifest, JSON or CSV input.
    pub const FORMAT: u8 = 4;
    /// A dataset without usable sequences.
    pub const EMPTY_DATA: u8 = 5;
    /// Non-finite losses or parameters.
    pub const NUMERIC: u8 = 6;
    pub const IO: u8 = 7;
    /// Protocol violations: existing outputs without --force, broken isolation.
    pub const USAGE: u8 = 8;
}

#[derive(Parser)]
#[command(name = "coworld", version, about = "Offline visual RL with a collaborating online world model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an online agent and dump its replay up to a third of the scripted score.
    GenDataset {
        /// `source`, `downhill`, `masked` or a path to an env spec JSON.
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Environment step budget.
        #[arg(long, default_value_t = 20_000)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run config supplying the agent's hyper-parameters and env sizes.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        eval_every_steps: usize,
        #[arg(long, default_value_t = 10)]
        eval_episodes: usize,
        /// Replace an existing dataset in `out`.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain only the source agent and save its checkpoint.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run the full training pipeline on an offline dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `none`, `no_align`, `no_value_reg` or `offline_baseline`.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
        /// Overwrite a finished run in the run directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint's policy and print an EvalReport as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `source`, `downhill`, `masked` or an env spec JSON path; defaults
        /// to the env the checkpoint's agent was trained for.
        #[arg(long)]
        env: Option<String>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a run's metrics.csv to SVG charts.
    Plot {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_root() -> PathBuf {
    std::env::var_os("CWLD_RUN_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfigFile> {
    match path {
        Some(p) => RunConfigFile::read(p).with_context(|| format!("reading run config {}", p.display())),
        None => Ok(RunConfigFile::default()),
    }
}

/// Resolves a preset name or a JSON file; presets inherit sizes from `like`.
fn resolve_env(name: &str, like: &EnvSpec) -> Result<EnvSpec> {
    let sized = |s: EnvSpec| EnvSpec {
        image_size: like.image_size,
        episode_limit: like.episode_limit,
        ..s
    };
    let spec = match name {
        "source" => sized(EnvSpec::source(like.seed)),
        "downhill" => sized(EnvSpec::downhill(like.seed)),
        "masked" => sized(EnvSpec::masked(like.seed)),
        path => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(Error::from)?
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Removes the manifest and episode files of an existing dataset; refuses
/// directories that do not hold one.
fn clear_dataset(dir: &Path) -> Result<()> {
    use coworld::datastore::MANIFEST_FILE;
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::Usage(format!("{} is not a dataset directory; refusing to clear it", dir.display())).into());
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name == MANIFEST_FILE || (name.starts_with("episode_") && name.ends_with(".cwep")) {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn validate(cfg: &CoWorldConfig) -> Result<()> {
    let errors = cfg.validation_errors();
    for e in &errors {
        eprintln!("config error: {e}");
    }
    match errors.into_iter().next() {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn cmd_gen_dataset(
    env: Option<String>,
    out: PathBuf,
    budget: usize,
    seed: u64,
    config: Option<PathBuf>,
    opts: (usize, usize),
    force: bool,
) -> Result<()> {
    let file = load_run_config(config.as_deref())?;
    let spec = match env.as_deref() {
        Some(name) => resolve_env(name, &file.config.target_env)?,
        None => file.config.target_env.clone(),
    };
    if is_nonempty_dir(&out) {
        if !force {
            return Err(Error::Usage(format!("{} is not empty; pass --force to replace it", out.display())).into());
        }
        clear_dataset(&out)?;
    }
    let manifest = generate_medium_replay(
        &file.config,
        &spec,
        &out,
        &ReplayGenOptions {
            budget_steps: budget,
            eval_every_steps: opts.0,
            eval_episodes: opts.1,
            seed,
            ..ReplayGenOptions::default()
        },
    )?;
    println!(
        "{}",
        serde_json::json!({
            "out": out,
            "episodes": manifest.episodes.len(),
            "total_steps": manifest.total_steps,
            "threshold": manifest.threshold,
            "achieved_score": manifest.achieved_score,
            "budget_capped": manifest.budget_capped,
        })
    );
    Ok(())
}

fn cmd_pretrain(config: Option<PathBuf>, seed: Option<u64>, run_dir: Option<PathBuf>, force: bool) -> Result<()> {
    let mut file = load_run_config(config.as_deref())?;
    if let Some(s) = seed {
        file.config.seed = s;
    }
    let cfg = &file.config;
    validate(cfg)?;
    let run_dir = run_dir
        .or(file.run_dir.clone())
        .unwrap_or_else(|| run_root().join(format!("pretrain-seed{}", cfg.seed)));
    let ckpt = run_dir.join(CHECKPOINT_DIR).join("source_pretrained.cwck");
    if ckpt.exists() && !force {
        return Err(Error::Usage(format!("{} exists; pass --force to overwrite", ckpt.display())).into());
    }
    fs::create_dir_all(run_dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(&run_dir, e))?;
    fs::write(run_dir.join(CONFIG_FILE), cfg.to_json_pretty()).map_err(|e| Error::io(&run_dir, e))?;
    let mut log = MetricsLog::create(&run_dir.join(METRICS_FILE), cfg.log_every)?;
    let mut rng = Prng::seed_from_u64(cfg.seed);
    let mut source = SourceDomain::new(cfg, &mut rng)?;
    pretrain_source(cfg, &mut source, &mut log, &mut rng)?;
    source.bundle.save(cfg, &ckpt)?;
    let report = evaluate_agent(
        &cfg.source_env,
        &source.bundle.wm,
        &source.bundle.actor,
        cfg.eval_episodes,
        cfg.seed ^ EVAL_SEED_OFFSET,
    )?;
    println!("{}", serde_json::json!({ "checkpoint": ckpt, "source_eval": report }));
    Ok(())
}

struct TrainArgs {
    config: Option<PathBuf>,
    ablation: Option<String>,
    seed: Option<u64>,
    dataset: Option<PathBuf>,
    run_dir: Option<PathBuf>,
    print_config: bool,
    force: bool,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut file = load_run_config(args.config.as_deref())?;
    if let Some(a) = &args.ablation {
        file.config.ablation = Ablation::parse(a)?;
    }
    if let Some(s) = args.seed {
        file.config.seed = s;
    }
    if let Some(d) = args.dataset {
        file.dataset_dir = Some(d);
    }
    if let Some(r) = args.run_dir {
        file.run_dir = Some(r);
    }
    if file.run_dir.is_none() {
        file.run_dir = Some(run_root().join(format!("{}-seed{}", file.config.ablation.name(), file.config.seed)));
    }
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&file.to_json())?);
        return Ok(());
    }
    validate(&file.config)?;
    let dataset = file
        .dataset_dir
        .clone()
        .ok_or_else(|| Error::config("dataset_dir", "no dataset given (--dataset or `dataset_dir` in the config)"))?;
    if !dataset.join(coworld::datastore::MANIFEST_FILE).is_file() {
        return Err(Error::config("dataset_dir", format!("{} holds no dataset manifest", dataset.display())).into());
    }
    let run_dir = file.run_dir.clone().expect("resolved above");
    if run_dir.join(RUN_MANIFEST_FILE).exists() && !args.force {
        return Err(Error::Usage(format!("{} holds a finished run; pass --force to overwrite", run_dir.display())).into());
    }
    let out = coworld_train(&file.config, &dataset, &run_dir)?;
    println!("{}", serde_json::to_string_pretty(&out.manifest)?);
    Ok(())
}

fn cmd_eval(checkpoint: &Path, env: Option<String>, episodes: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let (bundle, cfg) = AgentBundle::load(checkpoint)?;
    let home = match bundle.role() {
        Role::Source => &cfg.source_env,
        Role::Target => &cfg.target_env,
    };
    let spec = match env.as_deref() {
        Some(name) => resolve_env(name, home)?,
        None => home.clone(),
    };
    let report = evaluate_agent(&spec, &bundle.wm, &bundle.actor, episodes, seed)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(p) = out {
        fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_plot(run_dir: &Path, out: Option<PathBuf>) -> Result<()> {
    let metrics = MetricsTable::read(&run_dir.join(METRICS_FILE))?;
    let out = out.unwrap_or_else(|| run_dir.join("plots"));
    let files = render_metrics(&metrics, &out)?;
    log::info!("{} metric rows plotted", metrics.len());
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return exit::OTHER;
    };
    match e {
        Error::Config { .. } => exit::CONFIG,
        Error::Format { .. } | Error::Shape(_) | Error::Json(_) | Error::Csv(_) => exit::FORMAT,
        Error::EmptyData(_) => exit::EMPTY_DATA,
        Error::Numeric { .. } => exit::NUMERIC,
        Error::Io { .. } => exit::IO,
        Error::Usage(_) | Error::Immutable => exit::USAGE,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDataset {
            env,
            out,
            budget,
            seed,
            config,
            eval_every_steps,
            eval_episodes,
            force,
        } => cmd_gen_dataset(env, out, budget, seed, config, (eval_every_steps, eval_episodes), force),
        Command::Pretrain {
            config,
            seed,
            run_dir,
            force,
        } => cmd_pretrain(config, seed, run_dir, force),
        Command::Train {
            config,
            ablation,
            seed,
            dataset,
            run_dir,
            print_config,
            force,
        } => cmd_train(TrainArgs {
            config,
            ablation,
            seed,
            dataset,
            run_dir,
            print_config,
            force,
        }),
        Command::Eval {
            checkpoint,
            env,
            episodes,
            seed,
            out,
        } => cmd_eval(&checkpoint, env, episodes, seed, out),
        Command::Plot { run_dir, out } => cmd_plot(&run_dir, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CLI } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
