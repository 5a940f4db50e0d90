//! Chunk-level co-scheduling of compute tiles and communication, with a
//! discrete-event multi-device simulator to check and time the result.
//!
//! The pipeline is: a [`schedule::CommSchedule`] (from [`templates`] or
//! [`lowering`]) plus a [`kernel::TileProgram`] are planned into
//! synchronization points and a swizzled tile order ([`planner`]), realized
//! onto communication backends ([`backend`]), then executed by [`sim`].
//! [`tune`] searches over the knobs of that pipeline.

pub mod backend;
pub mod kernel;
pub mod lowering;
pub mod planner;
pub mod region;
pub mod schedule;
pub mod sim;
pub mod templates;
pub mod tune;
pub mod workload;

pub use region::{Chunk, Layout, Region, TensorSpec};
pub use schedule::{CommOp, CommSchedule, Dependency, OpRef};
