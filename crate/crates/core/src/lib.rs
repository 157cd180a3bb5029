#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Simulation and analysis toolkit for ion-implanted single-photon emitters.

pub mod analysis;
pub mod correlator;
pub mod defectstats;
pub mod error;
pub mod fitkit;
pub mod implantation;
pub mod photonsim;
pub mod seeding;
pub mod timetag;

pub use error::{Error, Result};
pub use timetag::{Tag, TimeTagStream};
