//! Ultrasound beamforming from focused-emission channel data.
//!
//! The crate covers the whole chain from a point-scatterer simulator to image
//! quality metrics. Beamformers come in three families:
//!
//! * delay-and-sum ([`classic_bf`]),
//! * adaptive Capon-type filters and IAA ([`adaptive_bf`]),
//! * per-depth regularized inversion of the lateral scanline model
//!   `s[n] = A^H A x[n] + g[n]`, with an l1 (basis pursuit) or l2 (Tikhonov)
//!   penalty ([`inverse_bf`]).
//!
//! Data flow: [`phantom::simulate_raw`] -> [`acquisition::analytic_signal`] ->
//! [`acquisition::compensate_delays`] -> a beamformer -> [`imaging`] / [`metrics`].

// Negated comparisons double as NaN rejection in parameter checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod adaptive_bf;
pub mod classic_bf;
pub mod config;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod inverse_bf;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod phantom;
pub mod pipeline;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
