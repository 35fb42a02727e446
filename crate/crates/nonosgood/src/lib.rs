//! Numerical lab for divergence-free velocity fields whose modulus of
//! continuity fails the Osgood condition.
//!
//! The crate builds the Cantor-to-dyadic transport field (`traj_field`), the
//! fixed-point velocity/density families (`fixpoint`), and the checks that
//! exercise them (`verify`). Lengths that underflow `f64` are carried as
//! natural logarithms throughout.

// `!(a > b)` is used on purpose so that NaN lands in the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod bblock;
pub mod fixpoint;
pub mod geometry;
pub mod moc;
pub mod real;
pub mod traj_field;
pub mod verify;

pub use real::Real;

pub type Modulus = moc::Modulus<f64>;
pub type ModulusPair = moc::ModulusPair<f64>;
pub type SymbolString = geometry::SymbolString;
pub type LengthSequence = geometry::LengthSequence<f64>;
pub type BuildingBlock = bblock::BuildingBlock<f64>;
pub type TrajField = traj_field::TrajField<f64>;
pub type TrajConfig = traj_field::TrajConfig<f64>;

pub use fixpoint::{DensitySnapshot, ParamTable};
pub use verify::CheckReport;

/// Version stamped into every file the crate or the cli writes.
pub const FORMAT_VERSION: u32 = 1;
