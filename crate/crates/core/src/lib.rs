//! Multi-agent Supply Chain gridworld.
//!
//! Agents own processing centers along a conveyor of units. A unit halts at
//! each center until the owner, standing on the center tile, processes it
//! for a reward of 1. Processing can break the center; repairing it takes
//! two agents, so an agent whose center is broken depends on the others.
//!
//! The crate is organised bottom up:
//!
//! - [`topology`]: the abstract graph of centers, upstream and downstream
//!   sets, equal-split cost shares;
//! - [`layout`]: grid maps generated from a topology, with ASCII import and export;
//! - [`engine`]: the seeded step function, observations and episode driver;
//! - [`log`]: line-delimited episode logs and replay;
//! - [`metrics`]: care matrices, reciprocity, care direction and efficiency;
//! - [`policies`]: scripted agents;
//! - [`learner`]: a small actor-critic trainer with a population of agents;
//! - [`scenario`] and [`runner`]: configuration files, presets, sweeps and artifacts.

pub mod engine;
pub mod layout;
pub mod learner;
pub mod log;
pub mod metrics;
pub mod policies;
pub mod rng;
pub mod runner;
pub mod scenario;
pub mod topology;
