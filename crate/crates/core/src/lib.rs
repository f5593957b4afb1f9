//! Mesoscopic simulator for signalized grid networks with queue-based,
//! occupancy-weighted and bus-priority max-pressure controllers, plus the
//! experiment harness that drives them.
//!
//! The pieces, roughly in data-flow order: [`network`] builds the grid,
//! [`demand`] and [`routing`] generate trips, [`dynamics`] moves vehicles,
//! [`sensing`] turns state into what controllers see, [`controller`] picks
//! phases, [`metrics`] scores runs, [`stability`] covers the isolated
//! intersection theory and [`experiment`] ties everything into seeded sweeps.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod demand;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod routing;
pub mod sensing;
pub mod stability;

pub use error::{Error, Result};
