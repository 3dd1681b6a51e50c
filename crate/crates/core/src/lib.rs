//! Simulated data-acquisition and control stack for large-area CCD systems.

pub mod calibration;
pub mod client;
pub mod config;
pub mod controller;
pub mod detector;
pub mod server;
pub mod transport;
