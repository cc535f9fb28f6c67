pub mod charts;
pub mod error;
pub mod exec;
pub mod io;
pub mod kinematics;
pub mod manifold;
pub mod phase;
pub mod planner;
pub mod serde_util;
pub mod stats;
pub mod tasks;

pub use error::{Error, Result};
