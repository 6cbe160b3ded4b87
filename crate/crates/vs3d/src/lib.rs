//! Velocity-space editing engine over toy rectified-flow generators.
//!
//! The stack: shared-noise branch coupling drives an edit offset through a
//! rectified-flow ODE; a per-step calibrated unconditional embedding absorbs
//! guidance-asymmetry and global-condition leakage on preserved content;
//! partial-mean extrapolation amplifies the consistent edit signal; and the
//! sparse token stages decide per token what to retract toward the source
//! encoding via condition-swapped twin agreement. A desk-scale procedural
//! backbone (trained by conditional flow matching) and an analytic
//! Gaussian-flow oracle make the whole pipeline executable and checkable on
//! a laptop CPU.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod flow;
pub mod flowedit;
pub mod io;
pub mod pipeline;
pub mod pmg;
pub mod rasi;
pub mod tar;
pub mod toyworld;

pub use error::{Result, VsError};
