//! Configuration path control for underactuated planar chains: dynamics,
//! the control law, a ball-tree store of recorded targets, candidate
//! ranking, the runtime loop, and the acrobot experiments.

pub mod control_law;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod mathkit;
pub mod target_store;
pub mod value;
pub mod verify;
pub mod zd;

pub use error::{Error, Result};
