//! Quasi-static time-series simulation of low-voltage feeders with passive
//! and centrally coordinated PV inverters.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cic;
pub mod cli;
pub mod config;
pub mod error;
pub mod gss;
pub mod inverters;
pub mod network;
pub mod powerflow;
pub mod profiles;
pub mod qp;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
