//! The harness commands as library calls; the CLI and the Python module are
//! thin wrappers around these.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    eval_cells, grid_cells, read_csv, run_cells, scale_cells, svg, write_csv, write_results,
    ExperimentConfig, Grid, ResultRow,
};
use crate::baselines::{plan_once, Variant};
use crate::denoiser::{train_on_dataset, Denoiser};
use crate::error::{Error, Result};
use crate::maze::{evaluate_plan, generate_dataset, Dataset, PlanScore, PointState};
use crate::sampler::PlanContext;
use crate::tree::{mctd_plan, TraceRow};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    maze: &'a str,
    maze_hash: &'a str,
    episodes: usize,
    episode_length: usize,
    seed: u64,
    digest: String,
}

/// Generates the dataset and writes it with a TOML manifest next to it.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let maze = cfg.load_maze()?;
    let ds = generate_dataset(&maze, &cfg.dataset)?;
    let path = cfg.dataset_file();
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    ds.save(&path)?;
    let manifest = Manifest {
        maze: &ds.maze_name,
        maze_hash: &ds.maze_hash,
        episodes: ds.len(),
        episode_length: ds.episode_length,
        seed: ds.seed,
        digest: ds.digest(),
    };
    write_text(
        &path.with_extension("manifest.toml"),
        &toml::to_string(&manifest).expect("manifest serializes"),
    )?;
    Ok(path)
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

/// Trains on the saved dataset; writes the checkpoint and a per-step loss CSV.
pub fn train(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<f64>)> {
    let ds = Dataset::load(&cfg.dataset_file())?;
    let (model, losses) = train_on_dataset(cfg.model.clone(), &ds, &cfg.train)?;
    let path = cfg.checkpoint_path();
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    model.save(&path)?;
    let rows: Vec<LossRow> = losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow { step, loss })
        .collect();
    write_csv(&path.with_extension("loss.csv"), &cfg.hash(), &rows)?;
    Ok((path, losses))
}

pub fn load_model(cfg: &ExperimentConfig) -> Result<Denoiser> {
    Denoiser::load(&cfg.checkpoint_path())
}

#[derive(Serialize)]
struct PlanRow {
    t: usize,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

/// Outcome of the `plan` command.
#[derive(Debug, Clone)]
pub struct PlanReport {
    pub score: PlanScore,
    pub plan_csv: PathBuf,
    pub trace_csv: Option<PathBuf>,
    pub render: String,
}

/// Plans once on the first configured task and writes the plan, plus the
/// search trace and its depth histogram for tree planners.
pub fn plan(cfg: &ExperimentConfig, planner: &str) -> Result<PlanReport> {
    let variant = Variant::from_name(planner)?;
    let model = load_model(cfg)?;
    let maze = cfg.load_maze()?;
    let task = cfg.task_ids(&maze)?[0];
    let maze = if maze.tasks().is_empty() {
        maze
    } else {
        maze.with_task(task)
    };
    let b = cfg.baseline(variant);
    b.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = PointState::at_rest(maze.start().center());
    create_dir(&cfg.out)?;
    let (plan, trace): (_, Option<Vec<TraceRow>>) = match variant {
        Variant::Mctd | Variant::MctdNoCausal => {
            let ctx = PlanContext::new(
                &model,
                &start,
                maze.goal_position(),
                maze.horizon(),
                b.sampler,
            )?;
            let res = mctd_plan(&ctx, &maze, &b.search, &mut rng)?;
            (res.plan, Some(res.trace))
        }
        _ => (plan_once(&model, &maze, &start, &b, &mut rng)?.plan, None),
    };
    let score = evaluate_plan(&maze, &plan);
    let rows: Vec<PlanRow> = plan
        .tokens()
        .rows()
        .into_iter()
        .enumerate()
        .map(|(t, r)| PlanRow {
            t,
            x: r[0],
            y: r[1],
            vx: r[2],
            vy: r[3],
        })
        .collect();
    let plan_csv = cfg.out.join(format!("plan_{planner}.csv"));
    write_csv(&plan_csv, &cfg.hash(), &rows)?;
    let trace_csv = match trace {
        Some(trace) => {
            let p = cfg.out.join(format!("trace_{planner}.csv"));
            write_csv(&p, &cfg.hash(), &trace)?;
            let depths: Vec<usize> = trace.iter().map(|r| r.depth).collect();
            write_text(
                &p.with_extension("svg"),
                &svg::depth_histogram(&depths, &format!("{planner} search depth")),
            )?;
            Some(p)
        }
        None => None,
    };
    Ok(PlanReport {
        score,
        plan_csv,
        trace_csv,
        render: maze.render(&plan.positions()),
    })
}

fn finish(cfg: &ExperimentConfig, name: &str, title: &str, rows: &[ResultRow]) -> Result<PathBuf> {
    let path = write_results(&cfg.out, name, cfg, rows)?;
    write_text(&path.with_extension("svg"), &svg::plot_results(rows, title))?;
    Ok(path)
}

/// Seed-averaged evaluation of every configured planner.
pub fn eval(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<ResultRow>)> {
    let model = load_model(cfg)?;
    let maze = cfg.load_maze()?;
    let rows = run_cells(&model, &maze, &eval_cells(cfg)?, cfg)?;
    Ok((
        finish(cfg, "eval", &format!("{} success", maze.name()), &rows)?,
        rows,
    ))
}

pub fn ablate(cfg: &ExperimentConfig, grid: &str) -> Result<(PathBuf, Vec<ResultRow>)> {
    let grid = Grid::from_name(grid)?;
    let model = load_model(cfg)?;
    let maze = cfg.load_maze()?;
    let rows = run_cells(&model, &maze, &grid_cells(grid, cfg), cfg)?;
    let name = format!("ablate_{}", grid.name());
    Ok((
        finish(
            cfg,
            &name,
            &format!("{} {}", maze.name(), grid.name()),
            &rows,
        )?,
        rows,
    ))
}

pub fn scale(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<ResultRow>)> {
    let model = load_model(cfg)?;
    let maze = cfg.load_maze()?;
    let rows = run_cells(&model, &maze, &scale_cells(&model, cfg), cfg)?;
    Ok((
        finish(
            cfg,
            "scale",
            &format!("{} budget sweep", maze.name()),
            &rows,
        )?,
        rows,
    ))
}

/// Renders a results or trace CSV to an SVG in `out`.
pub fn plot(csv: &Path, out: &Path) -> Result<PathBuf> {
    let text = std::fs::read_to_string(csv).map_err(|e| Error::io(csv, e))?;
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap_or("");
    let stem = csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let svg = if header.split(',').any(|h| h == "depth") {
        let rows: Vec<TraceRow> = super::parse_csv(&text, csv)?;
        svg::depth_histogram(&rows.iter().map(|r| r.depth).collect::<Vec<_>>(), &stem)
    } else {
        let rows: Vec<ResultRow> = read_csv(csv)?;
        svg::plot_results(&rows, &stem)
    };
    create_dir(out)?;
    let path = out.join(format!("{stem}.svg"));
    write_text(&path, &svg)?;
    Ok(path)
}
