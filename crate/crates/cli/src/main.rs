use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mctd::bench::commands;
use mctd::bench::ExperimentConfig;
use mctd::Error;

#[derive(Parser)]
#[command(
    name = "mctd",
    version,
    about = "Monte Carlo tree diffusion planning harness"
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Planner name, or a comma-separated list for `eval`.
    #[arg(long, global = true)]
    planner: Option<String>,
    /// Bundled maze name or path to a .maze file.
    #[arg(long, global = true)]
    maze: Option<String>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the offline dataset.
    GenData,
    /// Train the denoiser on the dataset.
    Train,
    /// Plan once and write the plan (and search trace).
    Plan,
    /// Evaluate planners over tasks and seeds.
    Eval,
    /// Run an ablation grid.
    Ablate {
        /// greedy, meta_action, subplan, causal_tree, uct_w or jumpiness
        grid: String,
    },
    /// Sweep the search budget.
    Scale,
    /// Render a results or trace CSV as SVG.
    Plot { csv: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 4,
        _ => 3,
    }
}

fn config(cli: &Cli) -> mctd::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => match ExperimentConfig::load(p) {
            Err(Error::Io { path, source }) if source.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::Config(format!(
                    "config {} not found",
                    path.display()
                )))
            }
            other => other?,
        },
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(p) = &cli.planner {
        cfg.planners = p.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(m) = &cli.maze {
        cfg.maze = m.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summary(rows: &[mctd::bench::ResultRow]) {
    for s in mctd::bench::summarize(rows) {
        let budget = if s.budget > 0 {
            format!(" budget {}", s.budget)
        } else {
            String::new()
        };
        println!(
            "{}{budget}: success {:.1} ± {:.1} over {} runs, {:.2} s, {:.0} calls, early stop {:.0}%",
            s.cell,
            s.success_mean,
            s.success_std,
            s.runs,
            s.seconds_mean,
            s.calls_mean,
            s.early_stop_rate * 100.0
        );
    }
}

fn run(cli: &Cli) -> mctd::Result<()> {
    if let Command::Plot { csv } = &cli.command {
        let out = cli
            .out
            .clone()
            .unwrap_or_else(|| csv.parent().map(PathBuf::from).unwrap_or_default());
        println!("{}", commands::plot(csv, &out)?.display());
        return Ok(());
    }
    let cfg = config(cli)?;
    match &cli.command {
        Command::GenData => println!("{}", commands::gen_data(&cfg)?.display()),
        Command::Train => {
            let (path, losses) = commands::train(&cfg)?;
            println!(
                "{} (final loss {:.6})",
                path.display(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Plan => {
            let report = commands::plan(&cfg, &cfg.planners[0])?;
            println!("{}", report.render);
            println!(
                "reward {:.3}, wall states {}, jumps {}, reaches goal {}",
                report.score.reward,
                report.score.wall_states,
                report.score.jumps,
                report.score.reaches_goal()
            );
            println!("{}", report.plan_csv.display());
        }
        Command::Eval => {
            let (path, rows) = commands::eval(&cfg)?;
            summary(&rows);
            println!("{}", path.display());
        }
        Command::Ablate { grid } => {
            let (path, rows) = commands::ablate(&cfg, grid)?;
            summary(&rows);
            println!("{}", path.display());
        }
        Command::Scale => {
            let (path, rows) = commands::scale(&cfg)?;
            summary(&rows);
            println!("{}", path.display());
        }
        Command::Plot { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
