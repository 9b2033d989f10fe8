//! Simulation and backstepping ramp-metering control of ARZ traffic on two
//! freeway segments joined at an on-ramp junction.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod model;
pub mod linearize;
pub mod stability;
pub mod kernels;
pub mod controller;
pub mod simulate;
pub mod config;
pub mod commands;
pub mod verify;
