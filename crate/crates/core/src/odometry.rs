//! Sequential scan-to-map registration.
//!
//! Scan `k` is registered against the union of the previous `map_window`
//! scans, each placed in the world frame by its estimated pose. Priors are
//! absolute (world frame) and seed the solver when present; otherwise the
//! previous motion is extrapolated.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::lie::RigidTransform;
use crate::penalties::Priors;
use crate::pointcloud::PointCloud;
use crate::registration::{
    prepare_scan, register_with_target, IterationRecord, RegistrationConfig, RegistrationTarget,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryOptions {
    /// Number of previous scans merged into the reference map (at least 1).
    pub map_window: usize,
}

impl Default for OdometryOptions {
    fn default() -> Self {
        Self { map_window: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Converged,
    NotConverged,
    /// Registration failed; the seed pose was kept.
    Failed,
}

impl std::fmt::Display for StepStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Converged => "converged",
            Self::NotConverged => "not_converged",
            Self::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub index: usize,
    pub status: StepStatus,
    pub iterations: usize,
    pub total_cost: f64,
    pub seed: RigidTransform,
    pub estimate: RigidTransform,
    pub message: Option<String>,
    pub trace: Vec<IterationRecord>,
}

#[derive(Debug, Clone)]
pub struct OdometryResult {
    pub trajectory: Trajectory,
    pub steps: Vec<StepReport>,
}

impl OdometryResult {
    pub fn all_converged(&self) -> bool {
        self.steps.iter().all(|s| s.status == StepStatus::Converged)
    }
}

/// Runs the pipeline. `priors[k]`, when given, applies to scan `k`; the first
/// pose is the identity regardless.
pub fn run_odometry(
    scans: &[PointCloud],
    priors: Option<&[Priors]>,
    config: &RegistrationConfig,
    options: &OdometryOptions,
) -> Result<OdometryResult> {
    config.validate()?;
    if scans.is_empty() {
        return Err(Error::InvalidArgument("no scans".into()));
    }
    if options.map_window == 0 {
        return Err(Error::InvalidArgument("map window must be at least 1".into()));
    }
    if let Some(p) = priors {
        if p.len() != scans.len() {
            return Err(Error::InvalidArgument(format!(
                "{} priors for {} scans",
                p.len(),
                scans.len()
            )));
        }
    }
    let mut poses = vec![RigidTransform::identity()];
    let mut window: VecDeque<PointCloud> = VecDeque::new();
    window.push_back(scans[0].clone());
    let mut steps = Vec::with_capacity(scans.len() - 1);
    for (k, scan) in scans.iter().enumerate().skip(1) {
        let step_priors = priors.map(|p| p[k]).unwrap_or_else(Priors::none);
        let seed = if step_priors.is_empty() {
            constant_velocity(&poses)
        } else {
            crate::registration::prior_seed(&step_priors)
        };
        let map = PointCloud::concat(window.iter());
        let outcome = RegistrationTarget::new(&map, config).and_then(|target| {
            let scan = prepare_scan(scan, config)?;
            register_with_target(&scan, &target, Some(seed), &step_priors, config)
        });
        let report = match outcome {
            Ok(r) => StepReport {
                index: k,
                status: if r.converged {
                    StepStatus::Converged
                } else {
                    StepStatus::NotConverged
                },
                iterations: r.iterations,
                total_cost: r.cost_breakdown.total(),
                seed,
                estimate: r.estimate,
                message: None,
                trace: r.trace,
            },
            Err(e) => StepReport {
                index: k,
                status: StepStatus::Failed,
                iterations: 0,
                total_cost: f64::NAN,
                seed,
                estimate: seed,
                message: Some(e.to_string()),
                trace: Vec::new(),
            },
        };
        poses.push(report.estimate);
        window.push_back(scan.transformed(&report.estimate));
        while window.len() > options.map_window {
            window.pop_front();
        }
        steps.push(report);
    }
    Ok(OdometryResult {
        trajectory: Trajectory::from_poses(poses),
        steps,
    })
}

/// Repeats the last relative motion; the identity before two poses exist.
fn constant_velocity(poses: &[RigidTransform]) -> RigidTransform {
    match poses {
        [.., a, b] => b.compose(&a.inverse().compose(b)),
        [only] => *only,
        [] => RigidTransform::identity(),
    }
}
