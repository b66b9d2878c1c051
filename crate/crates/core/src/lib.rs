//! Chance-constrained AC optimal power flow with point-to-point HVDC lines.
//!
//! Wind forecast errors are modeled as a zero-mean multivariate Gaussian. Generators and
//! HVDC converters respond to the aggregate deviation through affine participation
//! factors, and every operating limit is tightened by an uncertainty margin derived from
//! a linearization of the AC power-flow equations around the forecast point.

pub mod algorithm;
pub mod case;
pub mod ipm;
pub mod legacy;
pub mod model;
pub mod opf;
pub mod powerflow;
pub mod sensitivity;
pub mod uncertainty;
pub mod validation;

pub use case::{parse_case, serialize_case, CaseError};
pub use model::{validate_network, AcLine, Bus, BusKind, Generator, HvdcLine, Network, QminConvention, ValidationReport, WindFarm};
