// `!(x > 0.0)` is the NaN-rejecting form used throughout for config checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod dynamics;
pub mod executive;
pub mod localization;
pub mod log;
pub mod math;
pub mod metrics;
pub mod perception;
pub mod planner;
pub mod scenario;
pub mod telemetry;
pub mod track;
pub mod tracker;
pub mod trajectory;
