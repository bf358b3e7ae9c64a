//! Penalized point-to-Gaussian ICP with GNSS and IMU orientation priors.
//!
//! The registration cost adds two Mahalanobis penalties to the usual
//! alignment term: one pulling the translation toward a GNSS position and one
//! pulling the rotation toward an IMU orientation, measured in the tangent
//! space of SO(3).

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod lie;
pub mod odometry;
pub mod penalties;
pub mod pointcloud;
pub mod registration;
pub mod sim;

pub use error::{Error, Result};
pub use eval::{accumulate, kitti_metrics, Trajectory, TrajectoryMetrics};
pub use lie::{RigidTransform, Rotation};
pub use penalties::{PenaltyWeights, Priors, RotationPrior, TranslationPrior};
pub use pointcloud::{PointCloud, SpatialIndex};
pub use registration::{register, RegistrationConfig, RegistrationResult};
