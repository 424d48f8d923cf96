//! End-to-end orchestration: fit surfaces, optimize, evaluate, and a
//! synthetic demo. Every stage reads and writes plain files under one
//! output directory.
//!
//! Output layout:
//!
//! ```text
//! scenario.json                echo of the scenario that was run
//! surfaces/<city>.json         fitted spline surface
//! grids/<city>.csv             sparse-grid nodes (level_*, index_*, x_*, value, surplus)
//! measurements.csv             city, lever, iob, variance, <one column per lever>
//! fit_report.csv               one row per city
//! allocation.csv               city, lever, budget
//! trace.csv                    iteration, primal, dual, objective, rho, budget_gap
//! optimize_report.json
//! impact.csv                   city, lever, delta, linear, loglinear
//! metrics.csv                  metric, value
//! heatmap.csv                  city, <one column per lever>, total (percent change)
//! comparison.csv               demo only: method, region, metric columns
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{SplineSurface, SurfaceFile};
use crate::bve::{business_impact, marginal_efficiency, wbias, wmape, BveError, ImpactMode, ImpactReport, IobCurve};
use crate::optimizer::{project_to_budget, run_admm, AdmmConfig, OptimizeError, OptimizeReport, StopReason};
use crate::oracle::{eval_oracle, sample_iob_measurements, IobMeasurement, OracleSection, SurfaceSpec};
use crate::response::Response;
use crate::scenario::{save_scenario, validate_scenario, Allocation, Scenario, ScenarioError};
use crate::smoother::{fit_surface, padded_domain, FitConfig, FitReport, SmootherError};
use crate::sparse_grid::{build_adaptive_grid, GridError, Threshold};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("city {city}: sparse grid: {source}")]
    Grid {
        city: String,
        #[source]
        source: GridError,
    },
    #[error("city {city}: fit: {source}")]
    Fit {
        city: String,
        #[source]
        source: SmootherError,
    },
    #[error("city {city}: {message}")]
    City { city: String, message: String },
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Bve(#[from] BveError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> PipelineError + '_ {
    move |e| PipelineError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// ADMM knobs as they appear in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmSettings {
    pub rho0: f64,
    pub max_outer: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub objective_tol: f64,
    pub budget_tol: f64,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        let d = AdmmConfig::default();
        Self {
            rho0: d.rho0,
            max_outer: d.max_outer,
            eps_abs: d.eps_abs,
            eps_rel: d.eps_rel,
            objective_tol: d.objective_tol,
            budget_tol: d.budget_tol,
        }
    }
}

impl AdmmSettings {
    pub fn to_config(&self) -> AdmmConfig {
        AdmmConfig {
            rho0: self.rho0,
            max_outer: self.max_outer,
            eps_abs: self.eps_abs,
            eps_rel: self.eps_rel,
            objective_tol: self.objective_tol,
            budget_tol: self.budget_tol,
            parallel: true,
        }
    }
}

/// Pipeline knobs. Every field has a default, so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Sparse-grid refinement threshold as a fraction of the starting-grid
    /// value range.
    pub asg_eps: f64,
    pub asg_max_level: u32,
    /// Spline basis functions per lever; `None` picks 6 for up to two
    /// levers and fewer for more, keeping the tensor product small.
    pub basis_count: Option<usize>,
    /// Fraction of each `[floor, ceiling]` width added on both sides of the
    /// fit domain.
    pub pad_fraction: f64,
    /// Smoother trade-off; `None` uses the scenario's `lambda`.
    pub lambda: Option<f64>,
    /// Choose the trade-off by cross-validation instead.
    pub cross_validate: bool,
    /// Random experimental points per city in addition to the reference.
    pub iob_points: usize,
    /// Directory with `<city>.csv` teacher samples, used when the scenario
    /// has no oracle.
    pub samples_dir: Option<PathBuf>,
    pub seed: u64,
    pub admm: AdmmSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            asg_eps: 0.01,
            asg_max_level: 4,
            basis_count: None,
            pad_fraction: 0.05,
            lambda: None,
            cross_validate: false,
            iob_points: 4,
            samples_dir: None,
            seed: 0,
            admm: AdmmSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn basis_count_for(&self, levers: usize) -> usize {
        self.basis_count.unwrap_or(match levers {
            0..=2 => 6,
            3 => 5,
            _ => 4,
        })
    }

    fn validate(&self) -> Result<()> {
        if !(self.asg_eps > 0.0) {
            return Err(PipelineError::Config(format!("asg_eps must be positive, got {}", self.asg_eps)));
        }
        if !(self.pad_fraction >= 0.0) {
            return Err(PipelineError::Config(format!(
                "pad_fraction must be nonnegative, got {}",
                self.pad_fraction
            )));
        }
        Ok(())
    }
}

fn check_city_id(id: &str) -> Result<()> {
    if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\']) {
        return Err(PipelineError::City {
            city: id.to_string(),
            message: "city id cannot be used as a file name".into(),
        });
    }
    Ok(())
}

fn city_seed(seed: u64, city: usize) -> u64 {
    seed ^ (city as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One city's fit outcome.
#[derive(Debug, Clone)]
pub struct CityFit {
    pub city: String,
    pub grid_nodes: usize,
    pub measurements: Vec<IobMeasurement>,
    pub report: FitReport,
}

struct CityInputs {
    samples: Vec<(Vec<f64>, f64)>,
    grid_dump: Option<String>,
    measurements: Vec<IobMeasurement>,
}

fn oracle_inputs(
    scenario: &Scenario,
    oracle: &OracleSection,
    c: usize,
    domain: &[(f64, f64)],
    coefficients: usize,
    cfg: &PipelineConfig,
) -> Result<CityInputs> {
    let city = &scenario.cities[c];
    let spec = oracle.surfaces.get(city).ok_or_else(|| {
        PipelineError::MissingInput(format!("oracle section has no surface for city {city}"))
    })?;
    if spec.lever_count() != scenario.lever_count() {
        return Err(PipelineError::City {
            city: city.clone(),
            message: format!(
                "oracle surface has {} levers, scenario has {}",
                spec.lever_count(),
                scenario.lever_count()
            ),
        });
    }
    // Tighten the grid until it has at least as many nodes as the spline
    // has coefficients, within a few rounds.
    let (mut eps, mut level) = (cfg.asg_eps, cfg.asg_max_level);
    let mut round = 0;
    let grid = loop {
        let grid = build_adaptive_grid(
            |x: &[f64]| eval_oracle(spec, x),
            domain,
            Threshold::RelativeToRange(eps),
            level,
        )
        .map_err(|source| PipelineError::Grid {
            city: city.clone(),
            source,
        })?;
        round += 1;
        if grid.len() >= coefficients || round > 6 {
            break grid;
        }
        eps *= 0.5;
        level = (level + 1).min(30);
    };

    let mut rng = ChaCha8Rng::seed_from_u64(city_seed(cfg.seed, c));
    let bounds = scenario.city_box(c);
    let mut points = vec![scenario.reference.city(c).to_vec()];
    for _ in 0..cfg.iob_points {
        points.push(
            bounds
                .iter()
                .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
                .collect(),
        );
    }
    let measurements = sample_iob_measurements(spec, city, &points, oracle.iob_noise_sd, rng.random())
        .map_err(|e| PipelineError::City {
            city: city.clone(),
            message: e.to_string(),
        })?;
    Ok(CityInputs {
        samples: grid.grid_samples(),
        grid_dump: Some(grid.dump()),
        measurements,
    })
}

fn file_inputs(scenario: &Scenario, c: usize, dir: &Path, all_iob: &[IobMeasurement]) -> Result<CityInputs> {
    let city = &scenario.cities[c];
    let path = dir.join(format!("{city}.csv"));
    if !path.exists() {
        return Err(PipelineError::MissingInput(format!(
            "no sample file {} for city {city}; provide teacher samples or add an \"oracle\" block to the scenario",
            path.display()
        )));
    }
    let samples = load_samples(&path, scenario.lever_count())?;
    Ok(CityInputs {
        samples,
        grid_dump: None,
        measurements: all_iob.iter().filter(|m| &m.city == city).cloned().collect(),
    })
}

/// Reads teacher samples: one column per lever followed by `value`.
pub fn load_samples(path: &Path, levers: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err(path))?;
        let nums = parse_floats(path, row.iter())?;
        if nums.len() != levers + 1 {
            return Err(PipelineError::Format {
                path: path.display().to_string(),
                message: format!("expected {} columns, found {}", levers + 1, nums.len()),
            });
        }
        let value = nums[levers];
        out.push((nums[..levers].to_vec(), value));
    }
    Ok(out)
}

fn parse_floats<'a>(path: &Path, fields: impl Iterator<Item = &'a str>) -> Result<Vec<f64>> {
    fields
        .map(|f| {
            f.trim().parse::<f64>().map_err(|e| PipelineError::Format {
                path: path.display().to_string(),
                message: format!("bad number {f:?}: {e}"),
            })
        })
        .collect()
}

/// Fits one surface per city and writes surfaces, grids, measurements and
/// the fit report under `out`.
pub fn run_fit(scenario: &Scenario, cfg: &PipelineConfig, out: &Path) -> Result<Vec<CityFit>> {
    cfg.validate()?;
    for city in &scenario.cities {
        check_city_id(city)?;
    }
    let file_iob = match (&scenario.oracle, &cfg.samples_dir) {
        (Some(_), _) => Vec::new(),
        (None, Some(dir)) => {
            let path = dir.join("measurements.csv");
            if path.exists() {
                load_measurements(&path, scenario)?
            } else {
                Vec::new()
            }
        }
        (None, None) => {
            return Err(PipelineError::MissingInput(
                "the scenario has no \"oracle\" block and no samples directory was given; \
                 add an oracle or set samples_dir in the config"
                    .into(),
            ))
        }
    };
    let nb = cfg.basis_count_for(scenario.lever_count());
    let fits: Vec<Result<(CityFit, Option<String>)>> = (0..scenario.city_count())
        .into_par_iter()
        .map(|c| {
            let city = scenario.cities[c].clone();
            let domain = padded_domain(&scenario.city_box(c), cfg.pad_fraction);
            let inputs = match (&scenario.oracle, &cfg.samples_dir) {
                (Some(oracle), _) => oracle_inputs(scenario, oracle, c, &domain, nb.pow(scenario.lever_count() as u32), cfg)?,
                (None, Some(dir)) => file_inputs(scenario, c, dir, &file_iob)?,
                (None, None) => unreachable!("checked above"),
            };
            let lambda = if cfg.cross_validate {
                None
            } else {
                Some(cfg.lambda.unwrap_or(scenario.lambda))
            };
            let fit_cfg = FitConfig::new(domain, nb, lambda);
            let report = fit_surface(&inputs.samples, &inputs.measurements, &fit_cfg).map_err(|source| {
                PipelineError::Fit {
                    city: city.clone(),
                    source,
                }
            })?;
            log::info!(
                "{city}: {} samples, rss {:.3e}, {} active constraints",
                inputs.samples.len(),
                report.rss,
                report.active_constraints
            );
            Ok((
                CityFit {
                    city,
                    grid_nodes: inputs.samples.len(),
                    measurements: inputs.measurements,
                    report,
                },
                inputs.grid_dump,
            ))
        })
        .collect();

    let mut results = Vec::with_capacity(fits.len());
    for fit in fits {
        let (fit, dump) = fit?;
        let surface = serde_json::to_string_pretty(&fit.report.surface.to_file()).expect("surface serializes");
        write_file(&out.join("surfaces").join(format!("{}.json", fit.city)), &surface)?;
        if let Some(dump) = dump {
            write_file(&out.join("grids").join(format!("{}.csv", fit.city)), &dump)?;
        }
        results.push(fit);
    }
    let all_iob: Vec<IobMeasurement> = results.iter().flat_map(|f| f.measurements.iter().cloned()).collect();
    write_measurements(&out.join("measurements.csv"), scenario, &all_iob)?;
    write_fit_report(&out.join("fit_report.csv"), &results)?;
    echo_scenario(scenario, out)?;
    Ok(results)
}

fn echo_scenario(scenario: &Scenario, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("scenario.json");
    save_scenario(scenario, &path).map_err(io_err(&path))
}

fn write_fit_report(path: &Path, fits: &[CityFit]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record([
        "city",
        "samples",
        "measurements",
        "coefficients",
        "lambda",
        "rss",
        "iob_penalty",
        "active_constraints",
        "status",
    ])
    .map_err(csv_err(path))?;
    for f in fits {
        w.write_record([
            f.city.clone(),
            f.grid_nodes.to_string(),
            f.measurements.len().to_string(),
            f.report.surface.coefficient_count().to_string(),
            f.report.lambda.to_string(),
            f.report.rss.to_string(),
            f.report.iob_penalty.to_string(),
            f.report.active_constraints.to_string(),
            format!("{:?}", f.report.status).to_lowercase(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_measurements(path: &Path, scenario: &Scenario, iob: &[IobMeasurement]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["city".to_string(), "lever".into(), "iob".into(), "variance".into()];
    header.extend(scenario.levers.iter().cloned());
    w.write_record(&header).map_err(csv_err(path))?;
    for m in iob {
        let mut row = vec![
            m.city.clone(),
            scenario.levers[m.lever].clone(),
            m.iob.to_string(),
            m.variance.to_string(),
        ];
        row.extend(m.budget_point.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_measurements(path: &Path, scenario: &Scenario) -> Result<Vec<IobMeasurement>> {
    let fmt = |message: String| PipelineError::Format {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let nl = scenario.lever_count();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err(path))?;
        if row.len() != 4 + nl {
            return Err(fmt(format!("expected {} columns, found {}", 4 + nl, row.len())));
        }
        let city = row[0].to_string();
        if scenario.city_index(&city).is_none() {
            return Err(fmt(format!("unknown city {city}")));
        }
        let lever = scenario
            .lever_index(&row[1])
            .ok_or_else(|| fmt(format!("unknown lever {}", &row[1])))?;
        let nums = parse_floats(path, row.iter().skip(2))?;
        out.push(IobMeasurement {
            city,
            lever,
            iob: nums[0],
            variance: nums[1],
            budget_point: nums[2..].to_vec(),
        });
    }
    Ok(out)
}

/// Loads the fitted surfaces written by [`run_fit`], in scenario city order.
pub fn load_surfaces(scenario: &Scenario, out: &Path) -> Result<Vec<SplineSurface>> {
    scenario
        .cities
        .iter()
        .map(|city| {
            check_city_id(city)?;
            let path = out.join("surfaces").join(format!("{city}.json"));
            if !path.exists() {
                return Err(PipelineError::MissingInput(format!(
                    "no fitted surface {} for city {city}; run `fit` first",
                    path.display()
                )));
            }
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let file: SurfaceFile = serde_json::from_str(&text).map_err(|e| PipelineError::Format {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let surface = SplineSurface::from_file(file).map_err(|e| PipelineError::Format {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            if surface.dim() != scenario.lever_count() {
                return Err(PipelineError::City {
                    city: city.clone(),
                    message: format!(
                        "surface has {} levers, scenario has {}",
                        surface.dim(),
                        scenario.lever_count()
                    ),
                });
            }
            Ok(surface)
        })
        .collect()
}

pub fn write_allocation(path: &Path, scenario: &Scenario, alloc: &Allocation) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["city", "lever", "budget"]).map_err(csv_err(path))?;
    for (c, city) in scenario.cities.iter().enumerate() {
        for (l, lever) in scenario.levers.iter().enumerate() {
            w.write_record([city.as_str(), lever.as_str(), &alloc.get(c, l).to_string()])
                .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Reads a `city, lever, budget` file. Every scenario cell must appear
/// exactly once.
pub fn load_allocation(path: &Path, scenario: &Scenario) -> Result<Allocation> {
    let fmt = |message: String| PipelineError::Format {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let (nc, nl) = (scenario.city_count(), scenario.lever_count());
    let mut values = vec![f64::NAN; nc * nl];
    for row in reader.records() {
        let row = row.map_err(csv_err(path))?;
        if row.len() != 3 {
            return Err(fmt(format!("expected 3 columns, found {}", row.len())));
        }
        let c = scenario
            .city_index(&row[0])
            .ok_or_else(|| fmt(format!("city {} is not in the scenario", &row[0])))?;
        let l = scenario
            .lever_index(&row[1])
            .ok_or_else(|| fmt(format!("lever {} is not in the scenario", &row[1])))?;
        if !values[c * nl + l].is_nan() {
            return Err(fmt(format!("duplicate cell ({}, {})", &row[0], &row[1])));
        }
        values[c * nl + l] = parse_floats(path, std::iter::once(&row[2]))?[0];
    }
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(fmt(format!(
            "missing cell ({}, {})",
            scenario.cities[i / nl],
            scenario.levers[i % nl]
        )));
    }
    Ok(Allocation::from_vec(nc, nl, values))
}

fn write_trace(path: &Path, report: &OptimizeReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in &report.trace {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_trace(path: &Path) -> Result<Vec<crate::optimizer::TraceRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    reader
        .deserialize()
        .map(|r| r.map_err(csv_err(path)))
        .collect()
}

/// Summary written to `optimize_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSummary {
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub objective: f64,
    pub penalty: f64,
    pub total: f64,
    pub budget_sum: f64,
    pub total_budget: f64,
    /// `|Σ b − B| / B`.
    pub relative_budget_gap: f64,
}

/// Runs ADMM on the surfaces in `out` and writes the allocation, trace and
/// summary.
pub fn run_optimize(scenario: &Scenario, cfg: &PipelineConfig, out: &Path) -> Result<OptimizeReport> {
    let surfaces = load_surfaces(scenario, out)?;
    let report = run_admm(scenario, &surfaces, &cfg.admm.to_config())?;
    write_allocation(&out.join("allocation.csv"), scenario, &report.allocation)?;
    write_trace(&out.join("trace.csv"), &report)?;
    let budget_sum = report.allocation.total();
    let summary = OptimizeSummary {
        stop_reason: report.stop_reason,
        iterations: report.iterations,
        objective: report.objective,
        penalty: report.penalty,
        total: report.total(),
        budget_sum,
        total_budget: scenario.total_budget,
        relative_budget_gap: (budget_sum - scenario.total_budget).abs() / scenario.total_budget.abs().max(1e-300),
    };
    write_file(
        &out.join("optimize_report.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    echo_scenario(scenario, out)?;
    Ok(report)
}

/// Observed per-city outcomes for the prediction-error metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Actuals {
    pub values: Vec<f64>,
    /// Per-city weights; `None` means `|actual|`.
    pub weights: Option<Vec<f64>>,
}

/// Reads `city, actual[, weight]`; every scenario city must appear.
pub fn load_actuals(path: &Path, scenario: &Scenario) -> Result<Actuals> {
    let fmt = |message: String| PipelineError::Format {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let nc = scenario.city_count();
    let mut values = vec![f64::NAN; nc];
    let mut weights = vec![f64::NAN; nc];
    let mut weighted = None;
    for row in reader.records() {
        let row = row.map_err(csv_err(path))?;
        let has_weight = match row.len() {
            2 => false,
            3 => true,
            n => return Err(fmt(format!("expected 2 or 3 columns, found {n}"))),
        };
        if *weighted.get_or_insert(has_weight) != has_weight {
            return Err(fmt("weight column present on some rows only".into()));
        }
        let c = scenario
            .city_index(&row[0])
            .ok_or_else(|| fmt(format!("city {} is not in the scenario", &row[0])))?;
        let nums = parse_floats(path, row.iter().skip(1))?;
        values[c] = nums[0];
        if has_weight {
            weights[c] = nums[1];
        }
    }
    if let Some(c) = values.iter().position(|v| v.is_nan()) {
        return Err(fmt(format!("missing city {}", scenario.cities[c])));
    }
    Ok(Actuals {
        values,
        weights: weighted.unwrap_or(false).then_some(weights),
    })
}

/// Result of comparing allocation `a` (old) with `b` (new).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub linear: ImpactReport,
    /// `None` when some cell lacks two distinct positive measurement points.
    pub loglinear: Option<ImpactReport>,
    pub headline: ImpactMode,
    /// `(wmape, wbias)` of the fitted surfaces at `b` against the actuals.
    pub metrics: Option<(f64, f64)>,
    /// Percent change per city and lever, then the city total.
    pub heatmap: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn headline_report(&self) -> &ImpactReport {
        match self.headline {
            ImpactMode::LogLinear => self.loglinear.as_ref().unwrap_or(&self.linear),
            ImpactMode::Linear => &self.linear,
        }
    }
}

/// IOB curves per cell from measurements. Reference-point measurements
/// come first, so linear mode uses the IOB observed at the reference.
pub fn iob_curves(scenario: &Scenario, iob: &[IobMeasurement]) -> Result<Vec<IobCurve>> {
    let nl = scenario.lever_count();
    let mut curves = vec![IobCurve::new(Vec::new()); scenario.cell_count()];
    for m in iob {
        let c = scenario
            .city_index(&m.city)
            .ok_or_else(|| PipelineError::MissingInput(format!("measurement for unknown city {}", m.city)))?;
        curves[c * nl + m.lever].points.push((m.budget_point[m.lever], m.iob));
    }
    for (i, curve) in curves.iter().enumerate() {
        if curve.points.is_empty() {
            return Err(PipelineError::MissingInput(format!(
                "no IOB measurement for ({}, {})",
                scenario.cities[i / nl],
                scenario.levers[i % nl]
            )));
        }
    }
    Ok(curves)
}

fn pct_change(old: f64, new: f64) -> f64 {
    if old == new {
        0.0
    } else if old == 0.0 {
        f64::NAN
    } else {
        100.0 * (new - old) / old.abs()
    }
}

pub fn heatmap(scenario: &Scenario, a: &Allocation, b: &Allocation) -> Vec<Vec<f64>> {
    (0..scenario.city_count())
        .map(|c| {
            let mut row: Vec<f64> = (0..scenario.lever_count())
                .map(|l| pct_change(a.get(c, l), b.get(c, l)))
                .collect();
            row.push(pct_change(a.city(c).iter().sum(), b.city(c).iter().sum()));
            row
        })
        .collect()
}

/// Scores moving from `a` to `b` using the measurements and surfaces in
/// `out`, and writes `impact.csv`, `metrics.csv` and `heatmap.csv` there.
pub fn run_evaluate(
    scenario: &Scenario,
    a: &Allocation,
    b: &Allocation,
    actuals: Option<&Actuals>,
    mode: ImpactMode,
    out: &Path,
) -> Result<Evaluation> {
    let shape = Allocation::zeros(scenario.city_count(), scenario.lever_count());
    if !a.same_shape(&shape) || !b.same_shape(&shape) {
        return Err(BveError::Shape("allocation does not match the scenario".into()).into());
    }
    let mpath = out.join("measurements.csv");
    if !mpath.exists() {
        return Err(PipelineError::MissingInput(format!(
            "{} not found; run `fit` first",
            mpath.display()
        )));
    }
    let curves = iob_curves(scenario, &load_measurements(&mpath, scenario)?)?;
    let linear = business_impact(a, b, &curves, ImpactMode::Linear)?;
    let loglinear = match business_impact(a, b, &curves, ImpactMode::LogLinear) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("log-linear impact unavailable: {e}");
            None
        }
    };
    let metrics = match actuals {
        Some(act) => {
            let surfaces = load_surfaces(scenario, out)?;
            let pred: Vec<f64> = (0..scenario.city_count()).map(|c| surfaces[c].value(b.city(c))).collect();
            let w = act.weights.as_deref();
            Some((wmape(&pred, &act.values, w)?, wbias(&pred, &act.values, w)?))
        }
        None => None,
    };
    let eval = Evaluation {
        heatmap: heatmap(scenario, a, b),
        linear,
        loglinear,
        headline: mode,
        metrics,
    };
    write_evaluation(scenario, &eval, out)?;
    Ok(eval)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

fn write_evaluation(scenario: &Scenario, eval: &Evaluation, out: &Path) -> Result<()> {
    let nl = scenario.lever_count();
    let path = out.join("impact.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["city", "lever", "delta", "linear", "loglinear"])
        .map_err(csv_err(&path))?;
    for i in 0..scenario.cell_count() {
        w.write_record([
            scenario.cities[i / nl].clone(),
            scenario.levers[i % nl].clone(),
            eval.linear.deltas[i].to_string(),
            eval.linear.contributions[i].to_string(),
            fmt_opt(eval.loglinear.as_ref().map(|r| r.contributions[i])),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = out.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let ll = eval.loglinear.as_ref();
    let rows = [
        ("headline_mode", format!("{:?}", eval.headline).to_lowercase()),
        ("impact_linear", eval.linear.total.to_string()),
        ("impact_loglinear", fmt_opt(ll.map(|r| r.total))),
        ("efficiency_old_linear", eval.linear.efficiency_old.to_string()),
        ("efficiency_new_linear", eval.linear.efficiency_new.to_string()),
        ("efficiency_old_loglinear", fmt_opt(ll.map(|r| r.efficiency_old))),
        ("efficiency_new_loglinear", fmt_opt(ll.map(|r| r.efficiency_new))),
        ("wmape", fmt_opt(eval.metrics.map(|m| m.0))),
        ("wbias", fmt_opt(eval.metrics.map(|m| m.1))),
    ];
    w.write_record(["metric", "value"]).map_err(csv_err(&path))?;
    for (k, v) in rows {
        w.write_record([k, v.as_str()]).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = out.join("heatmap.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["city".to_string()];
    header.extend(scenario.levers.iter().cloned());
    header.push("total".into());
    w.write_record(&header).map_err(csv_err(&path))?;
    for (c, row) in eval.heatmap.iter().enumerate() {
        let mut rec = vec![scenario.cities[c].clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))
}

/// Human-readable summary of an evaluation.
pub fn format_evaluation(eval: &Evaluation) -> String {
    let mut s = String::new();
    let ll = eval.loglinear.as_ref();
    let _ = writeln!(s, "{:<28}{:>16}{:>16}", "", "linear", "loglinear");
    let _ = writeln!(
        s,
        "{:<28}{:>16.4}{:>16}",
        "business impact",
        eval.linear.total,
        ll.map_or("n/a".into(), |r| format!("{:.4}", r.total))
    );
    let _ = writeln!(
        s,
        "{:<28}{:>16.6}{:>16}",
        "marginal efficiency (old)",
        eval.linear.efficiency_old,
        ll.map_or("n/a".into(), |r| format!("{:.6}", r.efficiency_old))
    );
    let _ = writeln!(
        s,
        "{:<28}{:>16.6}{:>16}",
        "marginal efficiency (new)",
        eval.linear.efficiency_new,
        ll.map_or("n/a".into(), |r| format!("{:.6}", r.efficiency_new))
    );
    match eval.metrics {
        Some((m, b)) => {
            let _ = writeln!(s, "wMAPE {m:.3}%  wBIAS {b:.3}%");
        }
        None => {
            let _ = writeln!(s, "wMAPE n/a  wBIAS n/a (no actuals)");
        }
    }
    s
}

/// Equal split of the budget, projected onto the floors and ceilings.
pub fn uniform_allocation(scenario: &Scenario) -> Allocation {
    let n = scenario.cell_count();
    let even = vec![scenario.total_budget / n as f64; n];
    Allocation::from_vec(
        scenario.city_count(),
        scenario.lever_count(),
        project_to_budget(&even, scenario.floors.values(), scenario.ceilings.values(), scenario.total_budget),
    )
}

/// Per-city teacher objective of an allocation.
pub fn oracle_objectives(scenario: &Scenario, alloc: &Allocation) -> Result<Vec<f64>> {
    let oracle = scenario
        .oracle
        .as_ref()
        .ok_or_else(|| PipelineError::MissingInput("the scenario has no \"oracle\" block".into()))?;
    scenario
        .cities
        .iter()
        .enumerate()
        .map(|(c, city)| {
            let spec = oracle
                .surfaces
                .get(city)
                .ok_or_else(|| PipelineError::MissingInput(format!("oracle has no surface for city {city}")))?;
            eval_oracle(spec, alloc.city(c)).map_err(|e| PipelineError::City {
                city: city.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Synthetic scenario with `cities × levers` cells and a teacher oracle.
///
/// City sizes are log-normal and the reference allocation sits near equal
/// marginal return, perturbed by ±30% gain noise, so the optimum is a
/// modest reshuffle. Floors are half and ceilings twice the reference. The
/// penalty weights make the reallocation cost about three times the
/// response curvature at the reference.
pub fn demo_scenario(cities: usize, levers: usize, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = Normal::new(100f64.ln(), 0.5).expect("valid normal");
    let mu = 0.5;
    let mut reference = Vec::with_capacity(cities * levers);
    let mut specs = Vec::with_capacity(cities);
    for _ in 0..cities {
        let s = size.sample(&mut rng).exp();
        let refs: Vec<f64> = (0..levers)
            .map(|_| (s * rng.random_range(0.5..1.5) * 100.0).round() / 100.0)
            .collect();
        let scales: Vec<f64> = refs.iter().map(|r| r * rng.random_range(0.8..1.25)).collect();
        let gains: Vec<f64> = refs
            .iter()
            .zip(&scales)
            .map(|(r, s)| mu * rng.random_range(0.7..1.3) * s * (r / s).exp())
            .collect();
        let mut interactions = vec![vec![0.0; levers]; levers];
        let mean_gain = gains.iter().sum::<f64>() / levers as f64;
        for l in 0..levers {
            for m in (l + 1)..levers {
                let v = -rng.random_range(0.0..0.05) * mean_gain;
                interactions[l][m] = v;
                interactions[m][l] = v;
            }
        }
        let mut spec = SurfaceSpec {
            scales,
            gains,
            interactions,
            base: rng.random_range(1.0..4.0) * s,
            seed: rng.random(),
        };
        let ceilings: Vec<f64> = refs.iter().map(|r| 2.0 * r).collect();
        let upper: Vec<f64> = ceilings.iter().map(|c| c * 1.1).collect();
        while !spec.is_monotone_on(&upper) {
            for row in spec.interactions.iter_mut() {
                for v in row.iter_mut() {
                    *v *= 0.5;
                }
            }
        }
        reference.extend(refs);
        specs.push(spec);
    }
    let total: f64 = reference.iter().sum();
    let names: Vec<String> = (0..cities).map(|c| format!("city_{:03}", c + 1)).collect();
    let lever_names: Vec<String> = (0..levers).map(|l| format!("lever_{}", l + 1)).collect();
    let city_weights: Vec<f64> = specs
        .iter()
        .enumerate()
        .map(|(c, spec)| {
            let ratio: f64 = (0..levers)
                .map(|l| reference[c * levers + l] / spec.scales[l])
                .sum::<f64>()
                / levers as f64;
            (6.0 * mu * total * ratio).round()
        })
        .collect();
    let oracle = OracleSection {
        surfaces: names.iter().cloned().zip(specs).collect(),
        iob_noise_sd: 0.01 * mu,
    };
    let scenario = Scenario {
        week_id: format!("demo-{seed}"),
        floors: Allocation::from_vec(cities, levers, reference.iter().map(|r| 0.5 * r).collect()),
        ceilings: Allocation::from_vec(cities, levers, reference.iter().map(|r| 2.0 * r).collect()),
        reference: Allocation::from_vec(cities, levers, reference),
        cities: names,
        levers: lever_names,
        total_budget: total,
        city_weights,
        lever_weights: vec![1.0; levers],
        lambda: 1.0,
        oracle: Some(oracle),
    };
    debug_assert!(validate_scenario(&scenario).is_empty());
    scenario
}

/// One row of the demo comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    pub region: String,
    /// Teacher objective summed over the region.
    pub objective: f64,
    /// Percent change of `objective` against the reference allocation.
    pub vs_reference_pct: f64,
    /// Budget-weighted mean of the teacher's IOB.
    pub marginal_efficiency: f64,
}

#[derive(Debug, Clone)]
pub struct DemoSummary {
    pub scenario: Scenario,
    pub optimize: OptimizeReport,
    pub evaluation: Evaluation,
    pub uniform: Allocation,
    pub comparison: Vec<ComparisonRow>,
}

fn oracle_iob(scenario: &Scenario, alloc: &Allocation) -> Vec<f64> {
    let oracle = scenario.oracle.as_ref().expect("demo scenario has an oracle");
    let mut out = Vec::with_capacity(scenario.cell_count());
    for (c, city) in scenario.cities.iter().enumerate() {
        let spec = &oracle.surfaces[city];
        out.extend((0..scenario.lever_count()).map(|l| spec.partial(alloc.city(c), l)));
    }
    out
}

/// Region label: cities are grouped ten at a time.
fn region_of(city: usize) -> String {
    format!("region_{}", city / 10 + 1)
}

fn comparison(scenario: &Scenario, methods: &[(&str, &Allocation)]) -> Result<Vec<ComparisonRow>> {
    let nl = scenario.lever_count();
    let ref_obj = oracle_objectives(scenario, &scenario.reference)?;
    let mut regions: Vec<(String, Vec<usize>)> = Vec::new();
    for c in 0..scenario.city_count() {
        let r = region_of(c);
        match regions.last_mut() {
            Some((name, members)) if *name == r => members.push(c),
            _ => regions.push((r, vec![c])),
        }
    }
    regions.push(("all".into(), (0..scenario.city_count()).collect()));
    let mut rows = Vec::new();
    for (method, alloc) in methods {
        let obj = oracle_objectives(scenario, alloc)?;
        let iob = oracle_iob(scenario, alloc);
        for (region, members) in &regions {
            let o: f64 = members.iter().map(|&c| obj[c]).sum();
            let r: f64 = members.iter().map(|&c| ref_obj[c]).sum();
            let cells: Vec<usize> = members.iter().flat_map(|&c| c * nl..(c + 1) * nl).collect();
            let sub = Allocation::from_vec(members.len(), nl, cells.iter().map(|&i| alloc.values()[i]).collect());
            let sub_iob: Vec<f64> = cells.iter().map(|&i| iob[i]).collect();
            rows.push(ComparisonRow {
                method: method.to_string(),
                region: region.clone(),
                objective: o,
                vs_reference_pct: pct_change(r, o),
                marginal_efficiency: marginal_efficiency(&sub, &sub_iob)?,
            });
        }
    }
    Ok(rows)
}

pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12}{:<12}{:>16}{:>16}{:>16}",
        "method", "region", "objective", "vs ref %", "efficiency"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12}{:<12}{:>16.4}{:>16.4}{:>16.6}",
            r.method, r.region, r.objective, r.vs_reference_pct, r.marginal_efficiency
        );
    }
    s
}

/// Generates a demo scenario and runs fit, optimize and evaluate on it.
/// The evaluation compares the reference allocation with the optimized one,
/// using the teacher objective at the optimized allocation as actuals.
pub fn run_demo(cities: usize, levers: usize, cfg: &PipelineConfig, mode: ImpactMode, out: &Path) -> Result<DemoSummary> {
    if cities == 0 || levers == 0 {
        return Err(PipelineError::Config("demo needs at least one city and one lever".into()));
    }
    let scenario = demo_scenario(cities, levers, cfg.seed);
    fs::create_dir_all(out).map_err(io_err(out))?;
    run_fit(&scenario, cfg, out)?;
    let optimize = run_optimize(&scenario, cfg, out)?;
    let actuals = Actuals {
        values: oracle_objectives(&scenario, &optimize.allocation)?,
        weights: None,
    };
    let evaluation = run_evaluate(
        &scenario,
        &scenario.reference,
        &optimize.allocation,
        Some(&actuals),
        mode,
        out,
    )?;
    let uniform = uniform_allocation(&scenario);
    let rows = comparison(
        &scenario,
        &[
            ("reference", &scenario.reference),
            ("uniform", &uniform),
            ("optimized", &optimize.allocation),
        ],
    )?;
    let path = out.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for r in &rows {
        w.serialize(r).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(DemoSummary {
        scenario,
        optimize,
        evaluation,
        uniform,
        comparison: rows,
    })
}
