//! Trajectory accumulation and KITTI-style odometry metrics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lie::RigidTransform;

pub const DEFAULT_SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// World-frame poses with cumulative path length (meters) at each pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<RigidTransform>,
    pub lengths: Vec<f64>,
}

impl Trajectory {
    pub fn from_poses(poses: Vec<RigidTransform>) -> Self {
        let mut lengths = Vec::with_capacity(poses.len());
        let mut acc = 0.0;
        for (i, p) in poses.iter().enumerate() {
            if i > 0 {
                acc += (p.translation - poses[i - 1].translation).norm();
            }
            lengths.push(acc);
        }
        Self { poses, lengths }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.lengths.last().copied().unwrap_or(0.0)
    }

    /// `pose_{k-1}^{-1} * pose_k` for every consecutive pair.
    pub fn relatives(&self) -> Vec<RigidTransform> {
        self.poses
            .windows(2)
            .map(|w| w[0].inverse().compose(&w[1]))
            .collect()
    }
}

/// Chains relative motions from the identity: `pose_k = pose_{k-1} * rel_k`.
/// The result has one more pose than `relative_poses`.
pub fn accumulate(relative_poses: &[RigidTransform]) -> Result<Trajectory> {
    if relative_poses.is_empty() {
        return Err(Error::InvalidArgument("no relative poses".into()));
    }
    let mut poses = Vec::with_capacity(relative_poses.len() + 1);
    let mut cur = RigidTransform::identity();
    poses.push(cur);
    for rel in relative_poses {
        cur = cur.compose(rel);
        poses.push(cur);
    }
    Ok(Trajectory::from_poses(poses))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentError {
    pub start: usize,
    /// Nominal segment length, meters.
    pub length: f64,
    /// Percent.
    pub t_err: f64,
    /// Degrees per meter.
    pub r_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMetrics {
    pub translation_error_percent: f64,
    pub rotation_error_deg_per_100m: f64,
    pub per_segment: Vec<SegmentError>,
}

/// Average relative errors over every realizable `(start, length)` segment.
///
/// Segments start at every pose. A segment ends at the first pose whose
/// ground-truth cumulative length exceeds `start + length`. Errors are
/// normalized by the ground-truth distance actually covered between the two
/// poses.
pub fn kitti_metrics(
    estimate: &Trajectory,
    ground_truth: &Trajectory,
    segment_lengths: &[f64],
) -> Result<TrajectoryMetrics> {
    if estimate.len() != ground_truth.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lengths differ: {} estimated vs {} ground truth poses",
            estimate.len(),
            ground_truth.len()
        )));
    }
    if ground_truth.len() < 2 {
        return Err(Error::TrajectoryTooShort("fewer than two poses".into()));
    }
    if segment_lengths.is_empty() || segment_lengths.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::InvalidArgument("segment lengths must be positive".into()));
    }
    let dist = &ground_truth.lengths;
    let n = ground_truth.len();
    let per_segment: Vec<SegmentError> = (0..n)
        .into_par_iter()
        .flat_map_iter(|first| {
            segment_lengths.iter().filter_map(move |&len| {
                let last = (first..n).find(|&i| dist[i] > dist[first] + len)?;
                let covered = dist[last] - dist[first];
                let gt = ground_truth.poses[first].inverse().compose(&ground_truth.poses[last]);
                let est = estimate.poses[first].inverse().compose(&estimate.poses[last]);
                let err = est.inverse().compose(&gt);
                Some(SegmentError {
                    start: first,
                    length: len,
                    t_err: 100.0 * err.translation.norm() / covered,
                    r_err: err.rotation.angle().to_degrees() / covered,
                })
            })
        })
        .collect();
    if per_segment.is_empty() {
        return Err(Error::TrajectoryTooShort(format!(
            "ground-truth path of {:.3} m admits no segment of the requested lengths",
            ground_truth.total_length()
        )));
    }
    let m = per_segment.len() as f64;
    Ok(TrajectoryMetrics {
        translation_error_percent: per_segment.iter().map(|s| s.t_err).sum::<f64>() / m,
        rotation_error_deg_per_100m: 100.0 * per_segment.iter().map(|s| s.r_err).sum::<f64>() / m,
        per_segment,
    })
}
