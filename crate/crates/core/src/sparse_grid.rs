//! Spatially adaptive sparse grids with piecewise-linear hierarchical
//! bases.
//!
//! Level convention: along one dimension, level `l ≥ 1` holds the points
//! `i / 2^l` of the unit interval for odd `i`. Level 1 is the single center
//! point with a constant basis function; from level 2 on, the outermost hat
//! of each level is extended linearly to the boundary, so no boundary nodes
//! are needed. The starting grid is the center node plus its `2d` children.
//!
//! Refinement proceeds in generations. Every node whose hierarchical surplus
//! exceeds the threshold spawns its `2d` children; a child is kept only if
//! its own surplus exceeds the threshold. Hierarchical parents that a child
//! needs are inserted first, so the grid stays downward closed.

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("invalid grid argument: {0}")]
    Invalid(String),
    #[error("function evaluation failed at {coords:?}: {message}")]
    Evaluation { coords: Vec<f64>, message: String },
    #[error("point {point:?} lies outside the grid domain")]
    OutOfDomain { point: Vec<f64> },
}

/// Refinement threshold on the absolute hierarchical surplus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Absolute(f64),
    /// Fraction of the value range observed on the starting grid.
    RelativeToRange(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::RelativeToRange(0.01)
    }
}

/// Per-dimension `(level, index)` pairs.
pub type NodeKey = Vec<(u32, u32)>;

#[derive(Debug, Clone, PartialEq)]
pub struct GridNode {
    pub key: NodeKey,
    pub coords: Vec<f64>,
    pub value: f64,
    pub surplus: f64,
}

#[derive(Debug, Clone)]
pub struct SparseGrid {
    nodes: BTreeMap<NodeKey, GridNode>,
    domain: Vec<(f64, f64)>,
    eps_add: f64,
    max_level: u32,
}

fn unit_coord(level: u32, index: u32) -> f64 {
    index as f64 / (1u64 << level) as f64
}

/// Modified hat function of `(level, index)` at unit coordinate `x`.
fn basis_1d(level: u32, index: u32, x: f64) -> f64 {
    if level == 1 {
        return 1.0;
    }
    let scale = (1u64 << level) as f64;
    let last = (1u32 << level) - 1;
    if index == 1 {
        (2.0 - scale * x).max(0.0)
    } else if index == last {
        (scale * x - (last as f64 - 1.0)).max(0.0)
    } else {
        (1.0 - (scale * x - index as f64).abs()).max(0.0)
    }
}

fn parent_1d(level: u32, index: u32) -> Option<(u32, u32)> {
    if level <= 1 {
        return None;
    }
    let up = index.div_ceil(2);
    let j = if up % 2 == 1 { up } else { (index - 1) / 2 };
    Some((level - 1, j))
}

/// The 1-D ancestor chain of a node, self included, coarsest first.
fn chain_1d(level: u32, index: u32) -> Vec<(u32, u32)> {
    let mut chain = vec![(level, index)];
    let mut cur = (level, index);
    while let Some(p) = parent_1d(cur.0, cur.1) {
        chain.push(p);
        cur = p;
    }
    chain.reverse();
    chain
}

fn root_key(dim: usize) -> NodeKey {
    vec![(1, 1); dim]
}

fn children(key: &NodeKey) -> Vec<NodeKey> {
    let mut out = Vec::with_capacity(2 * key.len());
    for d in 0..key.len() {
        let (l, i) = key[d];
        for ci in [2 * i - 1, 2 * i + 1] {
            let mut k = key.clone();
            k[d] = (l + 1, ci);
            out.push(k);
        }
    }
    out
}

fn parents(key: &NodeKey) -> Vec<NodeKey> {
    (0..key.len())
        .filter_map(|d| {
            parent_1d(key[d].0, key[d].1).map(|p| {
                let mut k = key.clone();
                k[d] = p;
                k
            })
        })
        .collect()
}

impl SparseGrid {
    fn empty(domain: Vec<(f64, f64)>, eps_add: f64, max_level: u32) -> Self {
        Self {
            nodes: BTreeMap::new(),
            domain,
            eps_add,
            max_level,
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn domain(&self) -> &[(f64, f64)] {
        &self.domain
    }

    /// The resolved absolute refinement threshold.
    pub fn eps_add(&self) -> f64 {
        self.eps_add
    }

    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GridNode> {
        self.nodes.values()
    }

    pub fn contains(&self, key: &NodeKey) -> bool {
        self.nodes.contains_key(key)
    }

    fn to_domain(&self, key: &NodeKey) -> Vec<f64> {
        key.iter()
            .zip(&self.domain)
            .map(|(&(l, i), &(lo, hi))| lo + (hi - lo) * unit_coord(l, i))
            .collect()
    }

    /// Interpolant at a node's own location from its strict ancestors.
    fn ancestor_interpolation(&self, key: &NodeKey) -> f64 {
        let chains: Vec<Vec<(u32, u32)>> = key.iter().map(|&(l, i)| chain_1d(l, i)).collect();
        let unit: Vec<f64> = key.iter().map(|&(l, i)| unit_coord(l, i)).collect();
        let mut idx = vec![0usize; key.len()];
        let mut total = 0.0;
        let mut probe: NodeKey = key.clone();
        loop {
            let mut weight = 1.0;
            for d in 0..key.len() {
                let (l, i) = chains[d][idx[d]];
                probe[d] = (l, i);
                weight *= basis_1d(l, i, unit[d]);
            }
            if weight != 0.0 && probe != *key {
                if let Some(node) = self.nodes.get(&probe) {
                    total += node.surplus * weight;
                }
            }
            let mut d = key.len();
            loop {
                if d == 0 {
                    return total;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < chains[d].len() {
                    break;
                }
                idx[d] = 0;
            }
        }
    }

    fn insert_evaluated(&mut self, key: NodeKey, value: f64) -> f64 {
        let surplus = value - self.ancestor_interpolation(&key);
        let coords = self.to_domain(&key);
        self.nodes.insert(
            key.clone(),
            GridNode {
                key,
                coords,
                value,
                surplus,
            },
        );
        surplus
    }

    /// Inserts a node and, first, any missing hierarchical ancestors.
    /// Returns keys of every node inserted, parents before children.
    fn insert_closed<F, E>(&mut self, key: &NodeKey, f: &F) -> Result<Vec<NodeKey>, GridError>
    where
        F: Fn(&[f64]) -> Result<f64, E>,
        E: Display,
    {
        let mut inserted = Vec::new();
        if self.nodes.contains_key(key) {
            return Ok(inserted);
        }
        for p in parents(key) {
            inserted.extend(self.insert_closed(&p, f)?);
        }
        let coords = self.to_domain(key);
        let value = evaluate(f, &coords)?;
        self.insert_evaluated(key.clone(), value);
        inserted.push(key.clone());
        Ok(inserted)
    }

    /// Whether the interpolant misses `f` by more than `eps` at any child of
    /// `key`. A ridge running between two nodes leaves both with a small
    /// surplus, so low-surplus candidates are only dropped after this
    /// one-level lookahead.
    fn lookahead_misses<F, E>(&self, key: &NodeKey, f: &F, eps: f64) -> Result<bool, GridError>
    where
        F: Fn(&[f64]) -> Result<f64, E>,
        E: Display,
    {
        for child in children(key) {
            if child.iter().any(|&(l, _)| l > self.max_level) || self.nodes.contains_key(&child) {
                continue;
            }
            let coords = self.to_domain(&child);
            if (evaluate(f, &coords)? - self.interpolate(&coords)?).abs() > eps {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Sum of surplus × hierarchical basis over all nodes at `x`.
    pub fn interpolate(&self, x: &[f64]) -> Result<f64, GridError> {
        if x.len() != self.dim() {
            return Err(GridError::Invalid(format!(
                "point has {} coordinates, grid has {}",
                x.len(),
                self.dim()
            )));
        }
        let tol = 1e-12;
        let mut unit = Vec::with_capacity(x.len());
        for (&xi, &(lo, hi)) in x.iter().zip(&self.domain) {
            let u = (xi - lo) / (hi - lo);
            if !(u >= -tol && u <= 1.0 + tol) {
                return Err(GridError::OutOfDomain { point: x.to_vec() });
            }
            unit.push(u.clamp(0.0, 1.0));
        }
        let mut total = 0.0;
        'nodes: for node in self.nodes.values() {
            let mut w = node.surplus;
            for (d, &(l, i)) in node.key.iter().enumerate() {
                let b = basis_1d(l, i, unit[d]);
                if b == 0.0 {
                    continue 'nodes;
                }
                w *= b;
            }
            total += w;
        }
        Ok(total)
    }

    /// All `(coordinates, value)` pairs, ordered by node key.
    pub fn grid_samples(&self) -> Vec<(Vec<f64>, f64)> {
        self.nodes
            .values()
            .map(|n| (n.coords.clone(), n.value))
            .collect()
    }

    /// Every non-root node has all of its per-dimension parents.
    pub fn is_downward_closed(&self) -> bool {
        self.nodes
            .keys()
            .all(|k| parents(k).iter().all(|p| self.nodes.contains_key(p)))
    }

    /// Text dump, one node per line, for plotting grid density.
    pub fn dump(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        let mut header: Vec<String> = Vec::new();
        header.extend((0..d).map(|i| format!("level_{i}")));
        header.extend((0..d).map(|i| format!("index_{i}")));
        header.extend((0..d).map(|i| format!("x_{i}")));
        header.push("value".into());
        header.push("surplus".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for n in self.nodes.values() {
            let mut cols: Vec<String> = Vec::new();
            cols.extend(n.key.iter().map(|(l, _)| l.to_string()));
            cols.extend(n.key.iter().map(|(_, i)| i.to_string()));
            cols.extend(n.coords.iter().map(|x| x.to_string()));
            cols.push(n.value.to_string());
            cols.push(n.surplus.to_string());
            let _ = writeln!(out, "{}", cols.join(","));
        }
        out
    }
}

fn evaluate<F, E>(f: &F, coords: &[f64]) -> Result<f64, GridError>
where
    F: Fn(&[f64]) -> Result<f64, E>,
    E: Display,
{
    match f(coords) {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(GridError::Evaluation {
            coords: coords.to_vec(),
            message: format!("non-finite value {v}"),
        }),
        Err(e) => Err(GridError::Evaluation {
            coords: coords.to_vec(),
            message: e.to_string(),
        }),
    }
}

/// Builds an adaptive sparse grid for `f` over the `domain` box.
///
/// Function evaluations inside one refinement generation run in parallel;
/// insertion order is deterministic, so the result does not depend on the
/// thread count.
pub fn build_adaptive_grid<F, E>(
    f: F,
    domain: &[(f64, f64)],
    eps_add: Threshold,
    max_level: u32,
) -> Result<SparseGrid, GridError>
where
    F: Fn(&[f64]) -> Result<f64, E> + Sync,
    E: Display + Send,
{
    if domain.is_empty() {
        return Err(GridError::Invalid("domain must have at least one dimension".into()));
    }
    if let Some(&(lo, hi)) = domain.iter().find(|(lo, hi)| !(lo < hi)) {
        return Err(GridError::Invalid(format!("empty domain interval [{lo}, {hi}]")));
    }
    if !(1..=30).contains(&max_level) {
        return Err(GridError::Invalid(format!("max_level must be in 1..=30, got {max_level}")));
    }
    let raw = match eps_add {
        Threshold::Absolute(e) | Threshold::RelativeToRange(e) => e,
    };
    if !(raw > 0.0) {
        return Err(GridError::Invalid(format!("eps_add must be positive, got {raw}")));
    }

    let dim = domain.len();
    let mut grid = SparseGrid::empty(domain.to_vec(), f64::INFINITY, max_level);

    let root = root_key(dim);
    let mut start = vec![root.clone()];
    if max_level >= 2 {
        start.extend(children(&root));
    }
    for key in &start {
        grid.insert_closed(key, &f)?;
    }

    let eps = match eps_add {
        Threshold::Absolute(e) => e,
        Threshold::RelativeToRange(frac) => {
            let (lo, hi) = grid
                .nodes
                .values()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), n| {
                    (a.min(n.value), b.max(n.value))
                });
            let range = hi - lo;
            if range > 0.0 {
                frac * range
            } else {
                frac * lo.abs().max(1.0)
            }
        }
    };
    grid.eps_add = eps;

    let mut frontier: Vec<NodeKey> = grid
        .nodes
        .values()
        .filter(|n| n.surplus.abs() > eps)
        .map(|n| n.key.clone())
        .collect();

    while !frontier.is_empty() {
        let mut candidates: Vec<NodeKey> = frontier
            .iter()
            .flat_map(children)
            .filter(|k| k.iter().all(|&(l, _)| l <= max_level) && !grid.nodes.contains_key(k))
            .collect();
        candidates.sort();
        candidates.dedup();

        let coords: Vec<Vec<f64>> = candidates.iter().map(|k| grid.to_domain(k)).collect();
        let values: Vec<Result<f64, GridError>> =
            coords.par_iter().map(|c| evaluate(&f, c)).collect();

        let mut next = Vec::new();
        for (key, value) in candidates.into_iter().zip(values) {
            let value = value?;
            if grid.nodes.contains_key(&key) {
                // already inserted as a parent of an earlier candidate
                continue;
            }
            for p in parents(&key) {
                for added in grid.insert_closed(&p, &f)? {
                    if grid.nodes[&added].surplus.abs() > eps {
                        next.push(added);
                    }
                }
            }
            let surplus = grid.insert_evaluated(key.clone(), value);
            if surplus.abs() > eps || grid.lookahead_misses(&key, &f, eps)? {
                next.push(key);
            } else {
                grid.nodes.remove(&key);
            }
        }
        frontier = next;
    }
    Ok(grid)
}
