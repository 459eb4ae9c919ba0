//! Simulation, estimation and metrology for Gaussian mixture-of-experts
//! models that combine always-active shared experts with gated routed
//! experts.
//!
//! The crate covers the full experimental loop: sampling datasets from a
//! ground-truth model ([`sampler`]), maximum-likelihood fitting by a
//! generalized EM algorithm ([`em`]), Voronoi parameter losses ([`voronoi`]),
//! convergence-rate benchmarks ([`bench`]), plus identifiability probes,
//! polynomial-system searches and router metrics.

pub mod bench;
pub mod em;
pub mod error;
pub mod expert;
pub mod gating;
pub mod identifiability;
pub mod model;
pub mod polysys;
pub mod router;
pub mod sampler;
pub mod voronoi;

pub use error::{Error, Result};
pub use expert::{ExpertFamily, ExpertFunction};
pub use gating::{gate_weights, GatingKind};
pub use model::{Dataset, MixingMeasurePair, RoutedAtom, SharedAtom, VARIANCE_FLOOR};
