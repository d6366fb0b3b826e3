//! Fixed-point inference engine, hardware-oriented graph transforms, and an
//! analytic cost model for a two-branch road-segmentation CNN.

pub mod accel;
pub mod error;
pub mod float_exec;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod perf;
pub mod quant;
pub mod selftest;
pub mod tensor;
pub mod transforms;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Dims, Tensor};
