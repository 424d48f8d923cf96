//! Budget allocation across cities and marketing levers.
//!
//! The pipeline fits a smooth, shape-constrained response surface per city
//! from incremental-over-budget measurements taken on an adaptive sparse
//! grid, then splits a fixed total budget across cities and levers with a
//! consensus ADMM that trades response against distance from a reference
//! allocation. A budget-value evaluation module scores allocations from
//! experiment data.

pub mod bspline;
pub mod bve;
pub mod optimizer;
pub mod oracle;
pub mod pipeline;
pub mod qp;
pub mod response;
pub mod scenario;
pub mod smoother;
pub mod sparse_grid;

pub use response::Response;
pub use scenario::{Allocation, Scenario};
