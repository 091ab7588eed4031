//! Python bindings. Structured values cross the boundary as plain Python
//! dicts and lists, built from the same JSON shapes the HTTP API uses.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use vchatter_core::agents::plan::{self, ExposurePlanCard, ParseOptions};
use vchatter_core::instruments::{InstrumentCatalog, ScaleResponses};
use vchatter_core::protocol::{self, ExposureLevel};
use vchatter_core::sim::{self, SimulationScript};
use vchatter_core::stats::{self, PairedSample, WilcoxonOptions};

create_exception!(vchatter, VChatterError, PyException, "Engine error raised by the bindings.");

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn engine_err(e: impl std::fmt::Display) -> PyErr {
    VChatterError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(engine_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

/// Accepts "Low"/"Medium"/"High" in any case.
pub fn parse_level(s: &str) -> Result<ExposureLevel, String> {
    ExposureLevel::parse(s).ok_or_else(|| format!("unknown exposure level {s:?}"))
}

/// Scores a tagged response payload, e.g. `{"instrument": "sas_a", "items": [...]}`.
#[pyfunction]
fn score<'py>(py: Python<'py>, responses: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let r: ScaleResponses = from_py(responses)?;
    to_py(py, &InstrumentCatalog::default().score(&r).map_err(value_err)?)
}

#[pyfunction]
#[pyo3(signature = (pre, post, continuity_correction = false))]
fn wilcoxon<'py>(py: Python<'py>, pre: Vec<f64>, post: Vec<f64>, continuity_correction: bool) -> PyResult<Bound<'py, PyAny>> {
    let sample = PairedSample::new(pre, post).map_err(value_err)?;
    let opts = WilcoxonOptions { continuity_correction, ..Default::default() };
    to_py(py, &stats::wilcoxon_signed_rank_with(&sample, &opts).map_err(value_err)?)
}

#[pyfunction]
fn descriptive<'py>(py: Python<'py>, values: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &stats::descriptive(&values).map_err(value_err)?)
}

#[pyfunction]
fn level_for_day(day: u8) -> PyResult<String> {
    Ok(protocol::level_for_day(day).map_err(value_err)?.to_string())
}

#[pyfunction]
fn agent_h_count(level: &str) -> PyResult<usize> {
    Ok(protocol::agent_h_count(parse_level(level).map_err(value_err)?))
}

#[pyfunction]
#[pyo3(signature = (text, level, strict = false))]
fn parse_plan_card<'py>(py: Python<'py>, text: &str, level: &str, strict: bool) -> PyResult<Bound<'py, PyAny>> {
    let level = parse_level(level).map_err(value_err)?;
    let card = plan::parse_plan_card_with(text, level, ParseOptions { strict }).map_err(value_err)?;
    to_py(py, &card)
}

#[pyfunction]
fn render_plan_card(card: &Bound<'_, PyAny>) -> PyResult<String> {
    let card: ExposurePlanCard = from_py(card)?;
    Ok(plan::render_plan_card(&card))
}

/// Runs a scripted six-day walk and returns the validation report.
#[pyfunction]
#[pyo3(signature = (out_dir, script = None))]
fn run_simulation<'py>(py: Python<'py>, out_dir: PathBuf, script: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let outcome = py
        .detach(|| match script {
            Some(p) => sim::run_simulation_file(&p, &out_dir),
            None => sim::run_simulation(&SimulationScript::canonical(), &out_dir),
        })
        .map_err(engine_err)?;
    to_py(py, &outcome.report)
}

#[pyfunction]
fn seed_cohort(py: Python<'_>, data_dir: PathBuf, n: usize, seed: u64) -> PyResult<Vec<String>> {
    py.detach(|| sim::seed_cohort(&data_dir, n, seed)).map_err(engine_err)
}

#[pyfunction]
fn outcome_report(py: Python<'_>, data_dir: PathBuf) -> PyResult<String> {
    py.detach(|| sim::report(&data_dir)).map_err(engine_err)
}

#[pymodule]
pub fn vchatter(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VChatterError", m.py().get_type::<VChatterError>())?;
    m.add("DAYS", protocol::DAYS)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(descriptive, m)?)?;
    m.add_function(wrap_pyfunction!(level_for_day, m)?)?;
    m.add_function(wrap_pyfunction!(agent_h_count, m)?)?;
    m.add_function(wrap_pyfunction!(parse_plan_card, m)?)?;
    m.add_function(wrap_pyfunction!(render_plan_card, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulation, m)?)?;
    m.add_function(wrap_pyfunction!(seed_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(outcome_report, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_parse_case_insensitively() {
        assert_eq!(parse_level("high"), Ok(ExposureLevel::High));
        assert_eq!(parse_level("Medium"), Ok(ExposureLevel::Medium));
        assert!(parse_level("extreme").is_err());
    }
}
