//! Frequency-aware perturbation and selection for multi-parametric
//! quantitative-map reconstruction, driven end to end by synthetic phantoms
//! with a controllable synthetic-to-"real" domain shift.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`kspace`]: unitary FFTs, per-frequency Wasserstein distance maps and
//!   distance-guided k-space perturbation
//! - [`phantom`]: procedural paired data with a closed-form multi-echo
//!   forward model and a domain-shift simulator
//! - [`tensor`]: a small reverse-mode autodiff engine over dense f64 arrays
//! - [`hfsnet`]: the hierarchical frequency-selection network
//! - [`training`]: mean-teacher optimization with spatial+spectral losses
//! - [`eval`]: image metrics, agreement statistics, ROC/AUC analysis
//! - [`dti`]: six-direction diffusion-tensor synthesis and fitting
//! - [`fpsd`]: the bit-exact array/bundle container format
//! - [`config`]: the experiment configuration grammar

pub mod config;
pub mod dti;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fpsd;
pub mod hfsnet;
pub mod phantom;
pub mod tensor;
pub mod training;
pub mod kspace;

pub use error::{FpsError, Result};
pub use kspace::{ComplexImage, DistanceMap, PerturbMode, PerturbationConfig};
pub use phantom::{DomainShiftConfig, ParameterMaps, SamplePair};
pub use tensor::{Graph, ParamSet, Tensor, Var};
