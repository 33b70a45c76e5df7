pub mod calibration;
pub mod error;
pub mod frame;
pub mod geometry;
pub mod registration;
pub mod scene;
pub mod session;
pub mod tracking;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{Point3, RigidTransform, UnitQuaternion, Vec3};
