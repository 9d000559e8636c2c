//! Periodic homogenization toolkit for the Poisson-Nernst-Planck equations in
//! porous media.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`unitcell`] rasterizes a periodic reference cell and its two-phase
//!    permittivity.
//! 2. [`cellcorrect`] solves the periodic corrector problems on that cell.
//! 3. [`upscale`] assembles the effective tensors `p`, `ε⁰`, `𝕄`, `Ĥ`.
//! 4. [`macropnp`] time-steps the upscaled system, and [`microdns`] runs the
//!    oscillating-coefficient system at finite scale ratio for validation.

pub mod cellcorrect;
pub mod error;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod macropnp;
pub mod microdns;
pub mod transport;
pub mod unitcell;
pub mod upscale;

pub use error::{CoreError, Result};
pub use grid::{Grid, GridRole, ScalarField};
