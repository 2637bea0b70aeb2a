//! Python bindings. Differentials are passed as JSON strings, points as (re, im) tuples,
//! results come back as JSON strings.

use cycloper_core::stokesgeo::{self, build_graph};
use cycloper_core::wkb::{self, DEFAULT_LADDER};
use cycloper_core::{conemap, odeint, NDifferential, PlanePath};
use num_complex::Complex64 as C64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: cycloper_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn differential(s: &str) -> PyResult<NDifferential> {
    NDifferential::from_json_str(s).map_err(err)
}

fn path(pts: &[(f64, f64)], r_min: f64) -> PyResult<PlanePath> {
    PlanePath::new(pts.iter().map(|&(a, b)| C64::new(a, b)).collect(), r_min).map_err(err)
}

fn ladder(l: Option<Vec<f64>>) -> Vec<f64> {
    l.unwrap_or_else(|| DEFAULT_LADDER.to_vec())
}

fn dump<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// Stokes graph as JSON.
#[pyfunction]
#[pyo3(signature = (differential_json, radius=None, max_generations=1))]
fn stokes_graph(differential_json: &str, radius: Option<f64>, max_generations: usize) -> PyResult<String> {
    let w = differential(differential_json)?;
    let r = radius.unwrap_or_else(|| stokesgeo::default_radius(&w));
    let g = build_graph(&w, r, max_generations).map_err(err)?;
    Ok(g.to_json_value().to_string())
}

/// Transfer matrix of the companion system along a polyline.
#[pyfunction]
#[pyo3(signature = (differential_json, t, points, r_min=1e-3))]
fn transfer(differential_json: &str, t: f64, points: Vec<(f64, f64)>, r_min: f64) -> PyResult<String> {
    let w = differential(differential_json)?;
    let p = path(&points, r_min)?;
    let res = odeint::integrate_transfer(&w, t, &p, &odeint::TransferOptions::default()).map_err(err)?;
    Ok(res.to_json_value().to_string())
}

/// Fitted Stokes constants on the primary rays of one zero.
#[pyfunction]
#[pyo3(signature = (differential_json, zero, ladder=None))]
fn fit_stokes(differential_json: &str, zero: usize, ladder: Option<Vec<f64>>) -> PyResult<String> {
    let w = differential(differential_json)?;
    let g = build_graph(&w, stokesgeo::default_radius(&w), 0).map_err(err)?;
    let f = wkb::fit_stokes_factors(&w, &g, zero, &self::ladder(ladder)).map_err(err)?;
    Ok(dump(&f))
}

/// Measured and predicted growth rate along a polyline.
#[pyfunction]
#[pyo3(signature = (differential_json, points, ladder=None, r_min=1e-3))]
fn growth(differential_json: &str, points: Vec<(f64, f64)>, ladder: Option<Vec<f64>>, r_min: f64) -> PyResult<String> {
    let w = differential(differential_json)?;
    let g = build_graph(&w, stokesgeo::default_radius(&w), 1).map_err(err)?;
    let r = wkb::growth_exponent(&w, &path(&points, r_min)?, &g, &self::ladder(ladder)).map_err(err)?;
    Ok(dump(&r))
}

/// Rescaled distance between two points with its flat prediction.
#[pyfunction]
#[pyo3(signature = (differential_json, x, y, ladder=None))]
fn rescaled_distance(differential_json: &str, x: (f64, f64), y: (f64, f64), ladder: Option<Vec<f64>>) -> PyResult<String> {
    let w = differential(differential_json)?;
    let (x, y) = (C64::new(x.0, x.1), C64::new(y.0, y.1));
    let r = conemap::rescaled_distance(&w, x, y, x, &self::ladder(ladder)).map_err(err)?;
    Ok(dump(&r))
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cycloper_core::cli::run(std::iter::once("cycloper".to_string()).chain(args))
}

#[pymodule]
fn cycloper(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(stokes_graph, m)?)?;
    m.add_function(wrap_pyfunction!(transfer, m)?)?;
    m.add_function(wrap_pyfunction!(fit_stokes, m)?)?;
    m.add_function(wrap_pyfunction!(growth, m)?)?;
    m.add_function(wrap_pyfunction!(rescaled_distance, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
