//! Energy-aware duty-cycle scheduling for battery-powered acoustic sensors.
//!
//! Event traces ([`trace`]) drive single-device simulations ([`sim`]) whose
//! wake-up intervals are either fixed or learned with tabular Q-learning
//! ([`qsched`]). Probes are judged by a Goertzel filter-bank gate or an
//! abstract detector ([`detect`]), and every activity is billed against a
//! measured current profile ([`power`]). [`collab`] extends this to
//! networks of devices that coordinate to avoid duplicate detections.

// `!(x > 0.0)` style checks are there to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod collab;
pub mod config;
pub mod detect;
pub mod power;
pub mod qsched;
pub mod rng;
pub mod sim;
pub mod trace;
