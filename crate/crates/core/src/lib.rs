//! Virtual planar five-rail trap: analytic fields, equilibrium analysis,
//! particle dynamics, segment shuttling and synthetic imaging.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod potential;
pub mod shuttle;
pub mod solve;
pub mod vision;

pub use error::{Result, TrapError};
pub use geometry::{BoundarySegment, DriveParams, Rect, TrapGeometry};
pub use potential::{TrapModel, Vec3, VoltageState};
