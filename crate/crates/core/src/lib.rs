//! Numerical laboratory for gradient flows on factorized models.
//!
//! A gradient flow on parameters θ of an overparameterized model induces,
//! through an architecture-determined lifting z = φ(θ), a flow
//! ż = -M(θ)∇f(z) with M = ∂φ ∂φ^T. This crate implements the liftings,
//! their conservation laws and balance structure, the intrinsic
//! reformulations ż = -K(z)∇f(z) that hold under balanced-type
//! initializations, the structural criteria that decide when such a
//! reformulation exists, and the infinite-depth (neural ODE) limit,
//! together with the integrators and diagnostics to verify all of it by
//! direct simulation.
//!
//! The `intrinsic-flow` binary drives JSON-configured experiments and writes
//! CSV series plus a `manifest.json` summary per run; see the `cli` module.

pub mod cli;
pub mod conservation;
pub mod criteria;
pub mod flows;
pub mod linalg;
pub mod models;
pub mod neural_ode;
pub mod numdiff;
pub mod objectives;
