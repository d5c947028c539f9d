//! Python bindings: configs are passed as TOML text and results come back as
//! plain dicts and lists.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mctd::bench::{commands, summarize, ExperimentConfig, ResultRow};
use mctd::maze::{bundled, bundled_names};
use mctd::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config(toml: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_toml(toml).map_err(to_py)
}

fn rows_to_py<'py>(py: Python<'py>, rows: &[ResultRow]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    rows.iter()
        .map(|r| {
            let d = PyDict::new_bound(py);
            d.set_item("cell", &r.cell)?;
            d.set_item("planner", &r.planner)?;
            d.set_item("budget", r.budget)?;
            d.set_item("task", r.task)?;
            d.set_item("seed", r.seed)?;
            d.set_item("success", r.success)?;
            d.set_item("reward", r.reward)?;
            d.set_item("seconds", r.seconds)?;
            d.set_item("calls", r.calls)?;
            d.set_item("iterations", r.iterations)?;
            Ok(d)
        })
        .collect()
}

/// Names of the bundled mazes.
#[pyfunction]
fn mazes() -> Vec<&'static str> {
    bundled_names()
}

/// ASCII rendering of a bundled maze.
#[pyfunction]
fn render_maze(name: &str) -> PyResult<String> {
    Ok(bundled(name).map_err(to_py)?.render(&[]))
}

/// The default experiment config as TOML text.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml()
}

#[pyfunction]
fn gen_data(config_toml: &str) -> PyResult<String> {
    Ok(commands::gen_data(&config(config_toml)?)
        .map_err(to_py)?
        .display()
        .to_string())
}

/// Trains and returns the per-step losses.
#[pyfunction]
fn train(py: Python<'_>, config_toml: &str) -> PyResult<Vec<f64>> {
    let cfg = config(config_toml)?;
    let (_, losses) = py.allow_threads(|| commands::train(&cfg)).map_err(to_py)?;
    Ok(losses)
}

/// Plans once; returns the reward, violation counts and the positions.
#[pyfunction]
fn plan<'py>(py: Python<'py>, config_toml: &str, planner: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(config_toml)?;
    let report = py
        .allow_threads(|| commands::plan(&cfg, planner))
        .map_err(to_py)?;
    let d = PyDict::new_bound(py);
    d.set_item("reward", report.score.reward)?;
    d.set_item("wall_states", report.score.wall_states)?;
    d.set_item("jumps", report.score.jumps)?;
    d.set_item("reaches_goal", report.score.reaches_goal())?;
    d.set_item("render", report.render)?;
    Ok(d)
}

/// Evaluates the configured planners; returns (rows, summary rows).
#[pyfunction]
fn eval<'py>(
    py: Python<'py>,
    config_toml: &str,
) -> PyResult<(Vec<Bound<'py, PyDict>>, Vec<(String, f64, f64)>)> {
    let cfg = config(config_toml)?;
    let (_, rows) = py.allow_threads(|| commands::eval(&cfg)).map_err(to_py)?;
    let summary = summarize(&rows)
        .into_iter()
        .map(|s| (s.cell, s.success_mean, s.success_std))
        .collect();
    Ok((rows_to_py(py, &rows)?, summary))
}

#[pymodule]
fn mctd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(mazes, m)?)?;
    m.add_function(wrap_pyfunction!(render_maze, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(eval, m)?)?;
    Ok(())
}
