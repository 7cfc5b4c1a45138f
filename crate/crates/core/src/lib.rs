//! Surfel-based large-scene surface reconstruction.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`). The training
//! pipeline runs in `f32`; gradient and oracle checks run in `f64`. Concrete
//! aliases for both are exported at the crate root.

pub mod compression;
pub mod contribution;
pub mod dataset;
pub mod density;
pub mod error;
pub mod geo;
pub mod image;
pub mod io;
pub mod math;
pub mod mesh;
pub mod objective;
pub mod pipeline;
pub mod raster;
pub mod scalar;
pub mod scenegen;
pub mod spatial;
pub mod splat;
pub mod train;

pub use error::{Error, Result};
pub use math::{Mat3, Quat, Vec3};
pub use scalar::Real;
pub use splat::{Camera, SceneModel, Surfel};

pub type Surfel32 = Surfel<f32>;
pub type Surfel64 = Surfel<f64>;
pub type Camera32 = Camera<f32>;
pub type Camera64 = Camera<f64>;
pub type SceneModel32 = SceneModel<f32>;
pub type SceneModel64 = SceneModel<f64>;
