//! Masked-model planning in gridworlds: environments, demonstrations,
//! token encoding, a small masked transformer, energy functions and
//! iterative planners, plus the evaluation harness that ties them together.

pub mod codec;
pub mod dataset;
pub mod energy;
pub mod gridworld;
pub mod harness;
pub mod oracle;
pub mod planner;
pub mod rng;
pub mod model;
