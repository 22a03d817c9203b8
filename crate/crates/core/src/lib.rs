//! Cell-free massive-MIMO IoT simulator and power-control toolkit.
//!
//! Modules follow the processing chain: [`netgen`] draws network scenarios,
//! [`estimation`] computes LMMSE channel estimates and their statistics,
//! [`ul_perf`] evaluates uplink MMSE SINRs (exact and random-matrix),
//! [`ul_power`] runs the uplink power-control algorithms, [`dl_power`] handles
//! downlink MR precoding and its power control, [`regressor`] learns per-AP
//! downlink powers, and [`harness`] runs the experiments.

pub mod error;
pub mod estimation;
pub mod netgen;
pub mod rng;
pub mod ul_perf;
pub mod ul_power;
pub mod dl_power;
pub mod regressor;
pub mod harness;

pub use error::{Error, Result};
pub use estimation::{compute_stats, draw_channel, ChannelDraw, EstimationStats};
pub use netgen::{generate_scenario, RadioConfig, Scenario, ScenarioConfig};
