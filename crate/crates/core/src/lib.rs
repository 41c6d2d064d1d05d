#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annulus;
pub mod distance;
pub mod error;
pub mod filters;
pub mod geom;
pub mod levelset;
pub mod mesh;
pub mod metrics;
pub mod nrrd;
pub mod phantom;
pub mod pipeline;
pub mod service;
pub mod session;
pub mod spatial;
pub mod surface;
pub mod volume;

pub use error::{Error, Result};
