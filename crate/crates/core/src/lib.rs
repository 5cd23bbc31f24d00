pub mod bounds;
pub mod error;
pub mod infomet;
pub mod measures;
pub mod numkit;
pub mod protosim;
pub mod scalar;
pub mod sdpcore;
pub mod statemodel;

pub use error::{Error, Result};
pub use scalar::{Real, Tolerances, TOL};
