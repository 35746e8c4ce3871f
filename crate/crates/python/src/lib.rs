//! Python bindings. Heavy work releases the GIL; structured results cross
//! the boundary as JSON strings.

use std::path::PathBuf;

use epiforge::analysis::{self, PeakMode};
use epiforge::census::{self, BundlePaths, FixtureSpec};
use epiforge::disease;
use epiforge::engine::{self, SeedSpec, SimConfig, SimOutput, PER_ARRIVAL_INFECTION_PROBABILITY};
use epiforge::popgen;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn peak_mode(name: &str) -> PyResult<PeakMode> {
    match name {
        "smoothed" => Ok(PeakMode::Smoothed),
        "raw" => Ok(PeakMode::Raw),
        other => Err(PyValueError::new_err(format!("unknown peak mode {other:?}, expected \"smoothed\" or \"raw\""))),
    }
}

/// A synthetic population together with the census bundle it was built from.
#[pyclass(module = "epiforge_py", frozen)]
struct Population {
    bundle: census::CensusBundle,
    inner: popgen::Population,
}

#[pymethods]
impl Population {
    /// Builds a population from a generated census fixture.
    #[staticmethod]
    #[pyo3(signature = (slas, cds_per_sla, population_per_cd, seed=1))]
    fn fixture(py: Python<'_>, slas: usize, cds_per_sla: usize, population_per_cd: u64, seed: u64) -> PyResult<Self> {
        py.detach(|| {
            let bundle = census::generate_fixture(FixtureSpec {
                n_slas: slas,
                n_cds_per_sla: cds_per_sla,
                population_per_cd,
                seed,
            })
            .map_err(value_err)?;
            let inner = popgen::build_population(&bundle, seed).map_err(runtime_err)?;
            Ok(Population { bundle, inner })
        })
    }

    /// Builds a population from a directory of census CSVs.
    #[staticmethod]
    #[pyo3(signature = (bundle_dir, seed=1))]
    fn from_bundle(py: Python<'_>, bundle_dir: PathBuf, seed: u64) -> PyResult<Self> {
        py.detach(|| {
            let bundle = census::parse_bundle(&BundlePaths::in_dir(&bundle_dir)).map_err(value_err)?;
            let inner = popgen::build_population(&bundle, seed).map_err(runtime_err)?;
            Ok(Population { bundle, inner })
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Population(agents={}, slas={}, groups={})",
            self.inner.len(),
            self.inner.regions.slas.len(),
            self.inner.groups.len()
        )
    }

    /// SHA-256 over agents, groups and memberships.
    fn digest(&self) -> String {
        self.inner.digest()
    }

    /// Agents per age band, youngest first.
    fn band_counts(&self) -> Vec<u64> {
        self.inner.band_counts().to_vec()
    }

    fn sla_ids(&self) -> Vec<String> {
        self.inner.regions.slas.iter().map(|s| s.id.clone()).collect()
    }

    fn enrolment_rate(&self) -> f64 {
        self.inner.report.enrolment_rate()
    }

    fn synthesis_report_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.report).map_err(runtime_err)
    }

    /// Writes the census bundle CSVs into `dir`.
    fn write_bundle(&self, dir: PathBuf) -> PyResult<()> {
        census::write_bundle(&self.bundle, &dir).map(|_| ()).map_err(runtime_err)
    }

    /// Writes agents, groups and memberships as CSVs into `dir`.
    fn export_csvset(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.export_csvset(&dir).map_err(runtime_err)
    }
}

/// Natural history and transmission tables.
#[pyclass(module = "epiforge_py", frozen)]
struct DiseaseModel {
    inner: disease::DiseaseModel,
}

#[pymethods]
impl DiseaseModel {
    /// A preset name such as "h1n1-2009" or a path to a saved model.
    #[new]
    #[pyo3(signature = (spec="h1n1-2009"))]
    fn new(spec: &str) -> PyResult<Self> {
        disease::DiseaseModel::resolve(spec).map(|inner| DiseaseModel { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: disease::DiseaseModel = serde_json::from_str(text).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(DiseaseModel { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(runtime_err)
    }

    fn with_rho(&self, rho: f64) -> Self {
        DiseaseModel {
            inner: self.inner.clone().with_rho(rho),
        }
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.inner.tables.rho
    }

    #[getter]
    fn infectious_days(&self) -> f64 {
        self.inner.natural_history.infectious_days
    }

    fn __repr__(&self) -> String {
        format!(
            "DiseaseModel(preset={:?}, rho={}, infectious_days={})",
            self.inner.preset, self.inner.tables.rho, self.inner.natural_history.infectious_days
        )
    }
}

fn model_or_default(model: Option<&DiseaseModel>) -> disease::DiseaseModel {
    model.map_or_else(disease::DiseaseModel::h1n1_2009, |m| m.inner.clone())
}

/// Output of one simulated epidemic.
#[pyclass(module = "epiforge_py", frozen)]
struct SimResult {
    inner: SimOutput,
}

#[pymethods]
impl SimResult {
    #[getter]
    fn days(&self) -> u32 {
        self.inner.days
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa
    }

    /// New symptomatic cases per day.
    fn incidence(&self) -> Vec<u64> {
        self.inner.national.iter().map(|d| d.incidence).collect()
    }

    /// Symptomatic agents per day.
    fn prevalence(&self) -> Vec<u64> {
        self.inner.national.iter().map(|d| d.prevalence).collect()
    }

    fn cumulative_ill(&self) -> u64 {
        self.inner.cumulative_ill()
    }

    fn total_infected(&self) -> u64 {
        self.inner.total_infected()
    }

    fn mean_generation_time(&self) -> Option<f64> {
        self.inner.mean_generation_time()
    }

    /// Incidence per SLA, in population SLA order.
    fn sla_incidence(&self) -> Vec<Vec<u32>> {
        self.inner.sla_incidence.clone()
    }

    #[pyo3(signature = (mode="smoothed"))]
    fn peak_day(&self, mode: &str) -> PyResult<Option<u32>> {
        let inc: Vec<f64> = self.inner.national.iter().map(|d| d.incidence as f64).collect();
        Ok(analysis::peak_day(&inc, peak_mode(mode)?))
    }

    /// National and community attack rates per 10,000 by age band.
    fn attack_rates_json(&self, population: &Population) -> PyResult<String> {
        serde_json::to_string(&analysis::attack_rate_tables(&self.inner, &population.inner)).map_err(runtime_err)
    }

    fn summary_json(&self, population: &Population) -> PyResult<String> {
        serde_json::to_string(&analysis::RunSummary::of(&self.inner, &population.inner)).map_err(runtime_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(runtime_err)
    }

    /// Writes the national and per-SLA incidence CSVs and a summary.
    fn write(&self, population: &Population, dir: PathBuf) -> PyResult<Vec<String>> {
        std::fs::create_dir_all(&dir).map_err(runtime_err)?;
        engine::write_outputs(&self.inner, &population.inner, &dir).map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "SimResult(days={}, kappa={}, seed={}, cumulative_ill={})",
            self.inner.days,
            self.inner.kappa,
            self.inner.seed,
            self.inner.cumulative_ill()
        )
    }
}

/// Runs one epidemic. Seeding is "airports" (the bundle's airports),
/// "random:N", or "slas:PROPORTION:ID,ID,...".
#[pyfunction]
#[pyo3(signature = (population, kappa=1.0, days=180, seed=1, model=None, seeding="airports", threads=1))]
fn simulate(
    py: Python<'_>,
    population: &Population,
    kappa: f64,
    days: u32,
    seed: u64,
    model: Option<&DiseaseModel>,
    seeding: &str,
    threads: usize,
) -> PyResult<SimResult> {
    let seeding = parse_seeding(seeding, population)?;
    let config = SimConfig {
        duration_days: days,
        kappa,
        seed,
        seeding,
        threads,
        ..SimConfig::default()
    };
    let model = model_or_default(model);
    let out = py.detach(|| engine::run(&population.inner, &model, &config)).map_err(value_err)?;
    Ok(SimResult { inner: out })
}

fn parse_seeding(spec: &str, population: &Population) -> PyResult<SeedSpec> {
    let bad = || PyValueError::new_err(format!("bad seeding {spec:?}"));
    let mut parts = spec.splitn(3, ':');
    match parts.next() {
        Some("airports") => Ok(SeedSpec::Airports {
            per_arrival_probability: PER_ARRIVAL_INFECTION_PROBABILITY,
            airports: population.bundle.airports.rows.clone(),
        }),
        Some("random") => {
            let count = parts.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            Ok(SeedSpec::Random { count })
        }
        Some("slas") => {
            let proportion = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let slas = parts.next().ok_or_else(bad)?.split(',').map(str::to_string).collect();
            Ok(SeedSpec::Explicit { slas, proportion })
        }
        _ => Err(bad()),
    }
}

/// Mean secondary cases of a single seed in an otherwise susceptible
/// population, as JSON with the standard error, histogram and mean
/// generation time.
#[pyfunction]
#[pyo3(signature = (population, kappa, samples=1000, seed=1, model=None))]
fn estimate_r0(
    py: Python<'_>,
    population: &Population,
    kappa: f64,
    samples: usize,
    seed: u64,
    model: Option<&DiseaseModel>,
) -> PyResult<String> {
    let model = model_or_default(model);
    let est = py.detach(|| analysis::estimate_r0(&population.inner, &model, kappa, samples, seed));
    serde_json::to_string(&est).map_err(runtime_err)
}

/// Reciprocal sample variance of peak days; None when every peak agrees.
#[pyfunction]
fn synchrony(peak_days: Vec<f64>) -> PyResult<Option<f64>> {
    Ok(analysis::synchrony(&peak_days).map_err(value_err)?.value)
}

/// Least-squares line as (slope, intercept, r_squared).
#[pyfunction]
fn linear_fit(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(PyValueError::new_err("need two or more paired points"));
    }
    let fit = analysis::linear_fit(&xs, &ys);
    Ok((fit.slope, fit.intercept, fit.r_squared))
}

/// Writes a synthetic census bundle of equal-sized SLAs into `dir`.
#[pyfunction]
#[pyo3(signature = (dir, slas, cds_per_sla, population_per_cd, seed=1))]
fn write_fixture(dir: PathBuf, slas: usize, cds_per_sla: usize, population_per_cd: u64, seed: u64) -> PyResult<()> {
    let bundle = census::generate_fixture(FixtureSpec {
        n_slas: slas,
        n_cds_per_sla: cds_per_sla,
        population_per_cd,
        seed,
    })
    .map_err(value_err)?;
    std::fs::create_dir_all(&dir).map_err(runtime_err)?;
    census::write_bundle(&bundle, &dir).map(|_| ()).map_err(runtime_err)
}

#[pymodule]
fn epiforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Population>()?;
    m.add_class::<DiseaseModel>()?;
    m.add_class::<SimResult>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_r0, m)?)?;
    m.add_function(wrap_pyfunction!(synchrony, m)?)?;
    m.add_function(wrap_pyfunction!(linear_fit, m)?)?;
    m.add_function(wrap_pyfunction!(write_fixture, m)?)?;
    m.add("PER_ARRIVAL_INFECTION_PROBABILITY", PER_ARRIVAL_INFECTION_PROBABILITY)?;
    Ok(())
}
