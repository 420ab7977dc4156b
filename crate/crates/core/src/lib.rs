//! Simulation and evaluation library for physics-constrained data-poisoning
//! attacks on learning-based fault-line localization.
//!
//! The crate covers the full experimental loop:
//!
//! * a quasi-steady-state grid model with Newton power-flow ([`grid`],
//!   [`power_flow`]),
//! * labeled fault-localization dataset generation ([`fault`]),
//! * the reactive nodal-current feature map ψ_q = Im(Y⁰Δu) ([`features`]),
//! * weighted-least-squares state estimation with bad-data detection
//!   ([`estimation`]),
//! * feature- and measurement-level backdoor poisoning ([`attack`]),
//! * small dense victim classifiers trained from scratch ([`models`]),
//! * sweep experiments with trial averaging and confidence intervals
//!   ([`harness`], [`stats`]).
//!
//! Heavy loops (dataset generation, per-trial training) parallelize with
//! rayon when the default `parallel` feature is enabled; disabling it yields
//! a dependency-light sequential build that produces bit-identical results.

pub mod attack;
pub mod error;
pub mod estimation;
pub mod exec;
pub mod fault;
pub mod features;
pub mod grid;
pub mod harness;
pub mod models;
pub mod power_flow;
pub mod stats;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
pub use grid::{AdmittanceMatrix, BusState, GridModel, Line, OperatingLimits};
