use thiserror::Error;

use crate::lie::RigidTransform;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not skew-symmetric (asymmetry {0:.3e})")]
    NotSkewSymmetric(f64),

    #[error("rotation angle too close to pi for a unique logarithm (trace {0})")]
    AngleNearPi(f64),

    #[error("left Jacobian is singular at angle {0}")]
    JacobianSingular(f64),

    #[error("matrix is not a valid rotation: {0}")]
    InvalidRotation(String),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("too few points: need more than {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("covariance is singular or not positive definite")]
    SingularCovariance,

    #[error("invalid covariance at line {line}: {reason}")]
    InvalidCovariance { line: usize, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Every scan point fell outside the correspondence gate.
    #[error("no correspondences within the distance gate")]
    NoCorrespondences { pose: Box<RigidTransform> },

    /// The damped normal equations could not be solved.
    #[error("normal equations are degenerate")]
    DegenerateNormalEquations { pose: Box<RigidTransform> },

    #[error("trajectory too short: {0}")]
    TrajectoryTooShort(String),

    #[error("malformed file at {location}: {reason}")]
    MalformedFile { location: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// The last valid pose carried by registration failures, if any.
    pub fn last_pose(&self) -> Option<&RigidTransform> {
        match self {
            Error::NoCorrespondences { pose } | Error::DegenerateNormalEquations { pose } => {
                Some(pose)
            }
            _ => None,
        }
    }

    pub(crate) fn malformed_line(line: usize, reason: impl Into<String>) -> Self {
        Error::MalformedFile {
            location: format!("line {line}"),
            reason: reason.into(),
        }
    }

    pub(crate) fn malformed_byte(offset: usize, reason: impl Into<String>) -> Self {
        Error::MalformedFile {
            location: format!("byte {offset}"),
            reason: reason.into(),
        }
    }
}
