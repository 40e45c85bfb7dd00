//! Derivative-free funnel control for nonlinear multi-input multi-output
//! systems of arbitrary relative degree.
//!
//! The controller only measures the tracking error `e = y - y_ref` and the
//! states of a cascade of linear input filters. Given a performance funnel
//! `φ`, it keeps `φ(t)‖e(t)‖ < 1` for all time whenever the initial data
//! satisfy the feasibility conditions in [`controller::initial_feasibility`].
//!
//! - [`signals`]: funnel functions and reference trajectories
//! - [`plant`]: the system class and the built-in plants
//! - [`controller`]: filters, the θ-chain and the control input
//! - [`integrator`]: guarded adaptive integration of the closed loop
//! - [`analysis`]: identities and bounds checked along stored runs
//! - [`config`], [`experiment`]: TOML configurations and output bundles

pub mod analysis;
pub mod config;
pub mod controller;
pub mod error;
pub mod experiment;
pub mod integrator;
pub mod plant;
pub mod signals;
