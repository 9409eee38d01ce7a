//! Peak age-of-information (PAoI) modelling and scheduling for dense D2D
//! networks under a stationary randomized slot-access policy.
//!
//! - [`model`]: layouts, channel/traffic constants, policies.
//! - [`analytics`]: closed-form success probability, PAoI and gradients.
//! - [`sim`]: slot-level Monte Carlo simulator used as ground truth.
//! - [`sched`]: uniform baseline, coordinate descent, projected gradient.
//! - [`gli`]: location-driven convolutional scheduler and its training.
//! - [`harness`]: dataset generation, experiment sweeps and validation.

pub mod analytics;
pub mod error;
pub mod gli;
pub mod harness;
pub mod io;
pub mod model;
pub mod sched;
pub mod sim;

pub use error::{Error, Result};
pub use model::{
    distance_matrix, generate_layout, ChannelParams, DistanceMatrix, Layout, LayoutGenSpec, Point,
    Policy, TrafficParams,
};
