//! Allocation problem instances: one week of cities × levers with budget
//! floors, ceilings, a reference allocation and penalty weights.
//!
//! Scenarios are read from a single JSON document:
//!
//! ```text
//! {
//!   "week_id": "2024-W07",
//!   "cities": ["c1", "c2"],
//!   "levers": ["driver_incentive", "rider_promo"],
//!   "total_budget": 400.0,
//!   "cells": [{"city": "c1", "lever": "driver_incentive",
//!              "floor": 50.0, "ceiling": 200.0, "reference": 100.0}, ...],
//!   "city_weights": {"c1": 1.0},
//!   "lever_weights": {"rider_promo": 0.5},
//!   "lambda": 1.0,
//!   "oracle": { ... optional synthetic teacher ... }
//! }
//! ```
//!
//! Missing city or lever weights default to 1.0.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::OracleSection;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(String),
    #[error("invalid scenario:\n{}", format_violations(.0))]
    Invalid(Vec<Violation>),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| format!("  - {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One failed scenario invariant, naming the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Dense budget vector over (city, lever), row-major by city.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    cities: usize,
    levers: usize,
    values: Vec<f64>,
}

impl Allocation {
    pub fn zeros(cities: usize, levers: usize) -> Self {
        Self {
            cities,
            levers,
            values: vec![0.0; cities * levers],
        }
    }

    /// Panics if `values.len() != cities * levers`.
    pub fn from_vec(cities: usize, levers: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), cities * levers, "allocation shape mismatch");
        Self {
            cities,
            levers,
            values,
        }
    }

    pub fn city_count(&self) -> usize {
        self.cities
    }

    pub fn lever_count(&self) -> usize {
        self.levers
    }

    pub fn get(&self, city: usize, lever: usize) -> f64 {
        self.values[city * self.levers + lever]
    }

    pub fn set(&mut self, city: usize, lever: usize, value: f64) {
        self.values[city * self.levers + lever] = value;
    }

    pub fn city(&self, city: usize) -> &[f64] {
        &self.values[city * self.levers..(city + 1) * self.levers]
    }

    pub fn city_mut(&mut self, city: usize) -> &mut [f64] {
        &mut self.values[city * self.levers..(city + 1) * self.levers]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Sum of absolute values, the norm used by the Hellinger penalty.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn same_shape(&self, other: &Allocation) -> bool {
        self.cities == other.cities && self.levers == other.levers
    }
}

/// A validated single-week allocation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub week_id: String,
    pub cities: Vec<String>,
    pub levers: Vec<String>,
    pub total_budget: f64,
    pub floors: Allocation,
    pub ceilings: Allocation,
    pub reference: Allocation,
    pub city_weights: Vec<f64>,
    pub lever_weights: Vec<f64>,
    /// Trade-off between teacher fit and experimental IOB agreement.
    pub lambda: f64,
    pub oracle: Option<OracleSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScenarioFile {
    week_id: String,
    cities: Vec<String>,
    levers: Vec<String>,
    total_budget: f64,
    cells: Vec<CellFile>,
    #[serde(default)]
    city_weights: BTreeMap<String, f64>,
    #[serde(default)]
    lever_weights: BTreeMap<String, f64>,
    lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    oracle: Option<OracleSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellFile {
    city: String,
    lever: String,
    floor: f64,
    ceiling: f64,
    reference: f64,
}

impl Scenario {
    pub fn city_count(&self) -> usize {
        self.cities.len()
    }

    pub fn lever_count(&self) -> usize {
        self.levers.len()
    }

    pub fn cell_count(&self) -> usize {
        self.cities.len() * self.levers.len()
    }

    pub fn city_index(&self, id: &str) -> Option<usize> {
        self.cities.iter().position(|c| c == id)
    }

    pub fn lever_index(&self, id: &str) -> Option<usize> {
        self.levers.iter().position(|l| l == id)
    }

    /// Per-lever `(floor, ceiling)` box for one city.
    pub fn city_box(&self, city: usize) -> Vec<(f64, f64)> {
        self.floors
            .city(city)
            .iter()
            .zip(self.ceilings.city(city))
            .map(|(&lo, &hi)| (lo, hi))
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let scenario = Self::from_file(file)?;
        let violations = validate_scenario(&scenario);
        if !violations.is_empty() {
            return Err(ScenarioError::Invalid(violations));
        }
        for w in reference_warnings(&scenario) {
            log::warn!("{w}");
        }
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        let mut cells = Vec::with_capacity(self.cell_count());
        for (c, city) in self.cities.iter().enumerate() {
            for (l, lever) in self.levers.iter().enumerate() {
                cells.push(CellFile {
                    city: city.clone(),
                    lever: lever.clone(),
                    floor: self.floors.get(c, l),
                    ceiling: self.ceilings.get(c, l),
                    reference: self.reference.get(c, l),
                });
            }
        }
        let file = ScenarioFile {
            week_id: self.week_id.clone(),
            cities: self.cities.clone(),
            levers: self.levers.clone(),
            total_budget: self.total_budget,
            cells,
            city_weights: self
                .cities
                .iter()
                .cloned()
                .zip(self.city_weights.iter().copied())
                .collect(),
            lever_weights: self
                .levers
                .iter()
                .cloned()
                .zip(self.lever_weights.iter().copied())
                .collect(),
            lambda: self.lambda,
            oracle: self.oracle.clone(),
        };
        serde_json::to_string_pretty(&file).expect("scenario serialization cannot fail")
    }

    fn from_file(file: ScenarioFile) -> Result<Self, ScenarioError> {
        let (nc, nl) = (file.cities.len(), file.levers.len());
        let mut problems = Vec::new();
        let mut floors = Allocation::zeros(nc, nl);
        let mut ceilings = Allocation::zeros(nc, nl);
        let mut reference = Allocation::zeros(nc, nl);
        let mut seen = vec![false; nc * nl];

        for (k, cell) in file.cells.iter().enumerate() {
            let c = file.cities.iter().position(|x| *x == cell.city);
            let l = file.levers.iter().position(|x| *x == cell.lever);
            match (c, l) {
                (Some(c), Some(l)) => {
                    if seen[c * nl + l] {
                        problems.push(Violation::new(
                            format!("cells[{k}]"),
                            format!("duplicate cell ({}, {})", cell.city, cell.lever),
                        ));
                    }
                    seen[c * nl + l] = true;
                    floors.set(c, l, cell.floor);
                    ceilings.set(c, l, cell.ceiling);
                    reference.set(c, l, cell.reference);
                }
                _ => problems.push(Violation::new(
                    format!("cells[{k}]"),
                    format!("unknown city or lever ({}, {})", cell.city, cell.lever),
                )),
            }
        }
        for c in 0..nc {
            for l in 0..nl {
                if !seen[c * nl + l] {
                    problems.push(Violation::new(
                        "cells",
                        format!("missing cell ({}, {})", file.cities[c], file.levers[l]),
                    ));
                }
            }
        }
        let weight_vec = |ids: &[String], map: &BTreeMap<String, f64>, field: &str| {
            let mut unknown = Vec::new();
            for key in map.keys() {
                if !ids.contains(key) {
                    unknown.push(Violation::new(
                        format!("{field}.{key}"),
                        "weight for an unknown id",
                    ));
                }
            }
            let w = ids
                .iter()
                .map(|id| map.get(id).copied().unwrap_or(1.0))
                .collect::<Vec<_>>();
            (w, unknown)
        };
        let (city_weights, bad_c) = weight_vec(&file.cities, &file.city_weights, "city_weights");
        let (lever_weights, bad_l) =
            weight_vec(&file.levers, &file.lever_weights, "lever_weights");
        problems.extend(bad_c);
        problems.extend(bad_l);
        if !problems.is_empty() {
            return Err(ScenarioError::Invalid(problems));
        }
        Ok(Scenario {
            week_id: file.week_id,
            cities: file.cities,
            levers: file.levers,
            total_budget: file.total_budget,
            floors,
            ceilings,
            reference,
            city_weights,
            lever_weights,
            lambda: file.lambda,
            oracle: file.oracle,
        })
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_json(&text)
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> std::io::Result<()> {
    fs::write(path, scenario.to_json())
}

fn duplicates(ids: &[String]) -> Vec<&str> {
    let mut seen = HashSet::new();
    let mut dup = Vec::new();
    for id in ids {
        if !seen.insert(id.as_str()) && !dup.contains(&id.as_str()) {
            dup.push(id.as_str());
        }
    }
    dup
}

/// Checks every scenario invariant. An empty result means the scenario is
/// well-formed and the budget equality is feasible.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let (nc, nl) = (s.cities.len(), s.levers.len());

    if nc == 0 {
        out.push(Violation::new("cities", "at least one city is required"));
    }
    if nl == 0 {
        out.push(Violation::new("levers", "at least one lever is required"));
    }
    let dup = duplicates(&s.cities);
    if !dup.is_empty() {
        out.push(Violation::new(
            "cities",
            format!("duplicate city ids: {}", dup.join(", ")),
        ));
    }
    let dup = duplicates(&s.levers);
    if !dup.is_empty() {
        out.push(Violation::new(
            "levers",
            format!("duplicate lever ids: {}", dup.join(", ")),
        ));
    }
    for (name, a) in [
        ("floors", &s.floors),
        ("ceilings", &s.ceilings),
        ("reference", &s.reference),
    ] {
        if a.city_count() != nc || a.lever_count() != nl {
            out.push(Violation::new(
                name,
                format!(
                    "shape {}x{} does not match {nc} cities x {nl} levers",
                    a.city_count(),
                    a.lever_count()
                ),
            ));
        }
    }
    if !out.is_empty() {
        return out;
    }

    for c in 0..nc {
        for l in 0..nl {
            let (lo, hi) = (s.floors.get(c, l), s.ceilings.get(c, l));
            let cell = format!("cells[{}, {}]", s.cities[c], s.levers[l]);
            if !lo.is_finite() || !hi.is_finite() || !s.reference.get(c, l).is_finite() {
                out.push(Violation::new(cell, "non-finite floor, ceiling or reference"));
            } else if lo > hi {
                out.push(Violation::new(
                    cell,
                    format!("floor {lo} exceeds ceiling {hi}"),
                ));
            }
        }
    }
    let lo_sum = s.floors.total();
    let hi_sum = s.ceilings.total();
    if !s.total_budget.is_finite() {
        out.push(Violation::new("total_budget", "must be finite"));
    } else if s.total_budget < lo_sum {
        out.push(Violation::new(
            "total_budget",
            format!(
                "infeasible: total budget {} is below the sum of floors {lo_sum}",
                s.total_budget
            ),
        ));
    } else if s.total_budget > hi_sum {
        out.push(Violation::new(
            "total_budget",
            format!(
                "infeasible: total budget {} exceeds the sum of ceilings {hi_sum}",
                s.total_budget
            ),
        ));
    }
    if !(s.lambda >= 0.0 && s.lambda.is_finite()) {
        out.push(Violation::new(
            "smoothing_tradeoff",
            format!("lambda must be a finite nonnegative number, got {}", s.lambda),
        ));
    }
    for (c, &w) in s.city_weights.iter().enumerate() {
        if !(w >= 0.0 && w.is_finite()) {
            out.push(Violation::new(
                format!("city_weights.{}", s.cities.get(c).map_or("?", |v| v)),
                format!("weight must be finite and nonnegative, got {w}"),
            ));
        }
    }
    for (l, &w) in s.lever_weights.iter().enumerate() {
        if !(w >= 0.0 && w.is_finite()) {
            out.push(Violation::new(
                format!("lever_weights.{}", s.levers.get(l).map_or("?", |v| v)),
                format!("weight must be finite and nonnegative, got {w}"),
            ));
        }
    }
    if s.city_weights.len() != nc {
        out.push(Violation::new("city_weights", "one weight per city required"));
    }
    if s.lever_weights.len() != nl {
        out.push(Violation::new("lever_weights", "one weight per lever required"));
    }
    out
}

/// Reference cells outside their own floor/ceiling box. These are only
/// warnings: the penalty is defined for any reference vector.
pub fn reference_warnings(s: &Scenario) -> Vec<String> {
    let mut out = Vec::new();
    for c in 0..s.city_count() {
        for l in 0..s.lever_count() {
            let r = s.reference.get(c, l);
            if r < s.floors.get(c, l) || r > s.ceilings.get(c, l) {
                out.push(format!(
                    "reference budget {r} for ({}, {}) lies outside [{}, {}]",
                    s.cities[c],
                    s.levers[l],
                    s.floors.get(c, l),
                    s.ceilings.get(c, l)
                ));
            }
        }
    }
    out
}
