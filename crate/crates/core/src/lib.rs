pub mod cli;
pub mod consistency;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod ingest;
pub mod posegraph;
pub mod sift;
pub mod surfelmap;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
pub use geometry::{Pose, Twist};
