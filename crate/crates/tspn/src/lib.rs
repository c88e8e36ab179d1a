//! Euclidean TSP with neighborhoods (TSPN) toolkit.
//!
//! The solver follows the shifted-quadtree playbook: guess a tour anchor and
//! radius, snap the candidate points to a coarse grid, build a randomly
//! shifted quadtree, and run a portal-respecting multipath DP whose
//! subproblem graph doubles as a group Steiner instance. An LP relaxation of
//! that instance is rounded into candidate solution trees, each of which
//! unfolds back into a closed tour touching every neighborhood.
//!
//! The crate also ships generators for two hardness constructions (a cube
//! gadget family in R^3 and a high-dimensional vertex-cover reduction), the
//! numeric verifiers for their promised gap properties, and brute-force
//! oracles small enough to trust.

pub mod dpgraph;
pub mod error;
pub mod geometry;
pub mod hardness;
pub mod instance;
pub mod oracle;
pub mod pipeline;
pub mod quadtree;
pub mod report;
pub mod stgst;

pub use error::{Error, Result};
