//! Joint image-sequence reconstruction and optical flow estimation with
//! total variation regularization on both the images and the flow.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data_gen;
pub mod diff;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod grid;
pub mod io;
pub mod joint;
pub mod metrics;
pub mod prox;
pub mod report;
pub mod solver_u;
pub mod solver_v;

pub use error::{Error, Result};
pub use grid::{DualState, FlowField, FlowFrame, Frame, Grid, ImageSequence};
