//! Simulation of Autler–Townes phonon-number spectroscopy on a single
//! trapped ion: a probed S–D transition whose upper level is dressed by a
//! motional-sideband coupling to a second metastable level D'.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algebra;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod sequence;
pub mod spectroscopy;

pub use error::{Error, Result};
