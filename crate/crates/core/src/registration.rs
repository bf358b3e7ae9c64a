//! Penalized ICP.
//!
//! The objective at pose `T = (R, t)` is
//!
//! ```text
//! alpha_p / M * sum_m w_m e_m^T W_m^{-1} e_m          (point term)
//!   + alpha_t * (t - t_s)^T Sigma_t^{-1} (t - t_s)    (GNSS term)
//!   + alpha_theta * beta^T Sigma_eps^{-1} beta        (Lie term)
//! ```
//!
//! with `e_m = q_m - T p_m` and `beta = log(C_s R^T)`. Every term is whitened
//! into 3-vector residual blocks and minimized by damped Gauss-Newton over a
//! left increment `R <- exp(d_rot^) R`, `t <- t + d_t`. In yaw-only mode the
//! rotation increment is restricted to the world z axis.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lie::{exp_so3, hat, RigidTransform, Rotation};
use crate::penalties::{
    rotation_penalty_residual, translation_penalty_residual, PenaltyWeights, Priors, Whitener,
};
use crate::pointcloud::{
    estimate_covariances, median_spacing, PointCloud, SpatialIndex, DEFAULT_COVARIANCE_K,
    DEFAULT_FLATTEN_RATIO,
};

/// Which cloud supplies the per-pair covariance `W_m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceSource {
    #[default]
    Map,
    /// Scan covariances, rotated into the map frame at the matching pose.
    Scan,
}

impl std::str::FromStr for CovarianceSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map" => Ok(Self::Map),
            "scan" => Ok(Self::Scan),
            other => Err(Error::InvalidArgument(format!(
                "covariance_source must be 'map' or 'scan', got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for CovarianceSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Map => "map",
            Self::Scan => "scan",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub weights: PenaltyWeights,
    pub max_iterations: usize,
    /// Meters.
    pub translation_epsilon: f64,
    /// Radians.
    pub rotation_epsilon: f64,
    /// Fraction of correspondences, closest first, that keep weight 1.
    pub trim_ratio: f64,
    /// Gate in meters; `None` means three times the map's median point spacing.
    pub max_correspondence_distance: Option<f64>,
    pub yaw_only: bool,
    /// Neighborhood size for `W_m`; 0 uses identity covariances.
    pub covariance_k: usize,
    pub flatten_ratio: f64,
    pub covariance_source: CovarianceSource,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            weights: PenaltyWeights::default(),
            max_iterations: 60,
            translation_epsilon: 1e-4,
            rotation_epsilon: 1e-5,
            trim_ratio: 0.85,
            max_correspondence_distance: None,
            yaw_only: false,
            covariance_k: DEFAULT_COVARIANCE_K,
            flatten_ratio: DEFAULT_FLATTEN_RATIO,
            covariance_source: CovarianceSource::Map,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.max_iterations < 1 {
            return bad("max_iterations must be >= 1".into());
        }
        if !(self.translation_epsilon > 0.0) || !(self.rotation_epsilon > 0.0) {
            return bad("epsilons must be > 0".into());
        }
        if !(self.trim_ratio > 0.0 && self.trim_ratio <= 1.0) {
            return bad(format!("trim_ratio {} must be in (0, 1]", self.trim_ratio));
        }
        if let Some(d) = self.max_correspondence_distance {
            if !(d > 0.0) {
                return bad(format!("max_correspondence_distance {d} must be > 0"));
            }
        }
        if self.covariance_k != 0 && self.covariance_k < 4 {
            return bad("covariance_k must be 0 or >= 4".into());
        }
        if !(self.flatten_ratio > 0.0 && self.flatten_ratio <= 1.0) {
            return bad("flatten_ratio must be in (0, 1]".into());
        }
        Ok(())
    }

    fn dof(&self) -> usize {
        if self.yaw_only {
            4
        } else {
            6
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub scan_id: usize,
    pub map_id: usize,
    /// Outlier weight `w_m` in `[0, 1]`.
    pub weight: f64,
    /// Pair covariance `W_m`, map frame.
    pub w_matrix: Matrix3<f64>,
    /// `L^{-1}` with `W_m = L L^T`.
    pub whitener: Matrix3<f64>,
    /// Euclidean pair distance at matching time.
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub point_term: f64,
    pub gnss_term: f64,
    pub lie_term: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.point_term + self.gnss_term + self.lie_term
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub cost: f64,
    pub pose: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub estimate: RigidTransform,
    pub converged: bool,
    pub iterations: usize,
    pub cost_breakdown: CostBreakdown,
    pub trace: Vec<IterationRecord>,
}

/// A map prepared for repeated matching: covariances, their whiteners, the
/// k-d tree, and the resolved correspondence gate.
#[derive(Debug, Clone)]
pub struct RegistrationTarget {
    pub cloud: PointCloud,
    pub index: SpatialIndex,
    pub gate: f64,
    whiteners: Option<Vec<Matrix3<f64>>>,
}

impl RegistrationTarget {
    pub fn new(map: &PointCloud, config: &RegistrationConfig) -> Result<Self> {
        if map.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let cloud = if config.covariance_source == CovarianceSource::Map
            && config.covariance_k > 0
            && map.covariances.is_none()
        {
            estimate_covariances(map, config.covariance_k, config.flatten_ratio)?
        } else {
            map.clone()
        };
        let index = SpatialIndex::build(&cloud)?;
        let gate = match config.max_correspondence_distance {
            Some(d) => d,
            None => 3.0 * median_spacing(&index),
        };
        if !(gate > 0.0) {
            return Err(Error::InvalidArgument(
                "correspondence gate resolved to zero; set max_correspondence_distance".into(),
            ));
        }
        let whiteners = match (&cloud.covariances, config.covariance_source) {
            (Some(covs), CovarianceSource::Map) => Some(
                covs.par_iter()
                    .map(|c| Whitener::new(c).map(|w| w.l_inv))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        Ok(Self {
            cloud,
            index,
            gate,
            whiteners,
        })
    }
}

/// Copy of `scan` with covariances attached when the config reads them from the scan side.
pub fn prepare_scan(scan: &PointCloud, config: &RegistrationConfig) -> Result<PointCloud> {
    if scan.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if config.covariance_source == CovarianceSource::Scan
        && config.covariance_k > 0
        && scan.covariances.is_none()
    {
        estimate_covariances(scan, config.covariance_k, config.flatten_ratio)
    } else {
        Ok(scan.clone())
    }
}

/// Nearest-neighbor correspondences within the gate, trimmed by distance.
pub fn match_points(
    scan: &PointCloud,
    target: &RegistrationTarget,
    pose: &RigidTransform,
    config: &RegistrationConfig,
) -> Result<Vec<Correspondence>> {
    if scan.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let rot = pose.rotation.matrix();
    let scan_side = config.covariance_source == CovarianceSource::Scan;
    let mut corrs: Vec<Correspondence> = scan
        .points
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let q = pose.transform_point(p);
            let n = target.index.nearest_one(&q);
            if n.distance > target.gate {
                return None;
            }
            let (w_matrix, whitener) = if scan_side {
                match &scan.covariances {
                    Some(c) => {
                        let w = rot * c[i] * rot.transpose();
                        let w = 0.5 * (w + w.transpose());
                        match Whitener::new(&w) {
                            Ok(wh) => (w, wh.l_inv),
                            Err(e) => return Some(Err(e)),
                        }
                    }
                    None => (Matrix3::identity(), Matrix3::identity()),
                }
            } else {
                match (&target.cloud.covariances, &target.whiteners) {
                    (Some(c), Some(wh)) => (c[n.id], wh[n.id]),
                    _ => (Matrix3::identity(), Matrix3::identity()),
                }
            };
            Some(Ok(Correspondence {
                scan_id: i,
                map_id: n.id,
                weight: 1.0,
                w_matrix,
                whitener,
                distance: n.distance,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    if corrs.is_empty() {
        return Err(Error::NoCorrespondences {
            pose: Box::new(*pose),
        });
    }
    let mut order: Vec<usize> = (0..corrs.len()).collect();
    order.sort_by(|&a, &b| {
        corrs[a]
            .distance
            .total_cmp(&corrs[b].distance)
            .then(corrs[a].scan_id.cmp(&corrs[b].scan_id))
    });
    let keep = ((config.trim_ratio * corrs.len() as f64).ceil() as usize).clamp(1, corrs.len());
    for &i in &order[keep..] {
        corrs[i].weight = 0.0;
    }
    Ok(corrs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Point,
    Gnss,
    Lie,
}

/// One whitened 3-vector residual with its Jacobian in the full 6-vector
/// increment `(d_rot, d_t)`.
#[derive(Debug, Clone, Copy)]
struct Block {
    term: Term,
    r: Vector3<f64>,
    j_rot: Matrix3<f64>,
    j_trans: Matrix3<f64>,
}

fn point_block(
    c: &Correspondence,
    p: &Vector3<f64>,
    q: &Vector3<f64>,
    pose: &RigidTransform,
    scale: f64,
) -> Block {
    let rp = pose.rotation.rotate(p);
    let e = q - rp - pose.translation;
    let li = c.whitener * scale;
    Block {
        term: Term::Point,
        r: li * e,
        j_rot: li * hat(&rp),
        j_trans: -li,
    }
}

fn blocks(
    corrs: &[Correspondence],
    scan: &PointCloud,
    map: &PointCloud,
    pose: &RigidTransform,
    priors: &Priors,
    config: &RegistrationConfig,
) -> Result<Vec<Block>> {
    if corrs.is_empty() {
        return Err(Error::NoCorrespondences {
            pose: Box::new(*pose),
        });
    }
    let w = &config.weights;
    let per_pair = w.alpha_p / corrs.len() as f64;
    let mut out: Vec<Block> = corrs
        .iter()
        .filter(|c| c.weight > 0.0 && per_pair > 0.0)
        .map(|c| {
            point_block(
                c,
                &scan.points[c.scan_id],
                &map.points[c.map_id],
                pose,
                (c.weight * per_pair).sqrt(),
            )
        })
        .collect();
    if let Some(tp) = &priors.translation {
        if w.alpha_t > 0.0 {
            let (r, j) = translation_penalty_residual(tp, &pose.translation)?;
            let s = w.alpha_t.sqrt();
            out.push(Block {
                term: Term::Gnss,
                r: r * s,
                j_rot: Matrix3::zeros(),
                j_trans: j * s,
            });
        }
    }
    if let Some(rp) = &priors.rotation {
        if w.alpha_theta > 0.0 {
            let (r, j) = rotation_penalty_residual(rp, &pose.rotation)?;
            let s = w.alpha_theta.sqrt();
            out.push(Block {
                term: Term::Lie,
                r: r * s,
                j_rot: j * s,
                j_trans: Matrix3::zeros(),
            });
        }
    }
    Ok(out)
}

/// The full objective and its three addends at `pose`.
pub fn evaluate_cost(
    corrs: &[Correspondence],
    scan: &PointCloud,
    map: &PointCloud,
    pose: &RigidTransform,
    priors: &Priors,
    config: &RegistrationConfig,
) -> Result<CostBreakdown> {
    let mut out = CostBreakdown::default();
    for b in blocks(corrs, scan, map, pose, priors, config)? {
        let v = b.r.norm_squared();
        match b.term {
            Term::Point => out.point_term += v,
            Term::Gnss => out.gnss_term += v,
            Term::Lie => out.lie_term += v,
        }
    }
    Ok(out)
}

/// Stacked whitened residuals and their Jacobian in the solver's parameterization.
#[derive(Debug, Clone)]
pub struct ResidualStack {
    pub residuals: DVector<f64>,
    /// Columns are `(d_rot, d_t)`, or `(d_yaw, d_t)` in yaw-only mode.
    pub jacobian: DMatrix<f64>,
    pub terms: Vec<Term>,
}

pub fn residual_stack(
    corrs: &[Correspondence],
    scan: &PointCloud,
    map: &PointCloud,
    pose: &RigidTransform,
    priors: &Priors,
    config: &RegistrationConfig,
) -> Result<ResidualStack> {
    let bs = blocks(corrs, scan, map, pose, priors, config)?;
    let n = config.dof();
    let mut residuals = DVector::zeros(3 * bs.len());
    let mut jacobian = DMatrix::zeros(3 * bs.len(), n);
    let mut terms = Vec::with_capacity(bs.len());
    for (i, b) in bs.iter().enumerate() {
        residuals.fixed_rows_mut::<3>(3 * i).copy_from(&b.r);
        fill_jacobian_rows(&mut jacobian, 3 * i, b, config.yaw_only);
        terms.push(b.term);
    }
    Ok(ResidualStack {
        residuals,
        jacobian,
        terms,
    })
}

fn fill_jacobian_rows(j: &mut DMatrix<f64>, row: usize, b: &Block, yaw_only: bool) {
    if yaw_only {
        j.view_mut((row, 0), (3, 1)).copy_from(&b.j_rot.column(2));
        j.view_mut((row, 1), (3, 3)).copy_from(&b.j_trans);
    } else {
        j.view_mut((row, 0), (3, 3)).copy_from(&b.j_rot);
        j.view_mut((row, 3), (3, 3)).copy_from(&b.j_trans);
    }
}

fn normal_equations(bs: &[Block], yaw_only: bool) -> (DMatrix<f64>, DVector<f64>) {
    let n = if yaw_only { 4 } else { 6 };
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut rows = DMatrix::zeros(3, n);
    for b in bs {
        fill_jacobian_rows(&mut rows, 0, b, yaw_only);
        h += rows.transpose() * &rows;
        g += rows.transpose() * b.r;
    }
    (h, g)
}

/// Applies the increment `x` (solver parameterization) on the left.
pub fn apply_increment(pose: &RigidTransform, x: &DVector<f64>, yaw_only: bool) -> RigidTransform {
    if yaw_only {
        RigidTransform::new(
            Rotation::from_yaw(x[0]).compose(&pose.rotation),
            pose.translation + Vector3::new(x[1], x[2], x[3]),
        )
    } else {
        RigidTransform::new(
            exp_so3(&Vector3::new(x[0], x[1], x[2])).compose(&pose.rotation),
            pose.translation + Vector3::new(x[3], x[4], x[5]),
        )
    }
}

const INITIAL_DAMPING: f64 = 1e-6;
const DAMPING_RETRIES: usize = 10;

/// One damped Gauss-Newton update on fixed correspondences.
///
/// The undamped step is tried first. On failure or cost increase the system
/// is damped with `lambda * diag(H)`, `lambda` starting at 1e-6 and growing
/// tenfold per retry. If no retry lowers the cost the input pose is returned.
pub fn step(
    corrs: &[Correspondence],
    scan: &PointCloud,
    map: &PointCloud,
    pose: &RigidTransform,
    priors: &Priors,
    config: &RegistrationConfig,
) -> Result<RigidTransform> {
    let bs = blocks(corrs, scan, map, pose, priors, config)?;
    let current: f64 = bs.iter().map(|b| b.r.norm_squared()).sum();
    let (h, g) = normal_equations(&bs, config.yaw_only);
    if g.iter().all(|v| *v == 0.0) {
        return Ok(*pose);
    }
    let n = h.nrows();
    let max_diag = h.diagonal().max();
    let damping = DVector::from_iterator(
        n,
        h.diagonal().iter().map(|d| {
            if max_diag > 0.0 {
                d.max(1e-12 * max_diag)
            } else {
                1.0
            }
        }),
    );
    let mut solved_any = false;
    let lambdas = std::iter::once(0.0)
        .chain((0..DAMPING_RETRIES).map(|i| INITIAL_DAMPING * 10f64.powi(i as i32)));
    for lambda in lambdas {
        let mut a = h.clone();
        for i in 0..n {
            a[(i, i)] += lambda * damping[i];
        }
        let Some(chol) = a.cholesky() else { continue };
        let x = -chol.solve(&g);
        if x.iter().any(|v| !v.is_finite()) {
            continue;
        }
        solved_any = true;
        let candidate = apply_increment(pose, &x, config.yaw_only);
        match evaluate_cost(corrs, scan, map, &candidate, priors, config) {
            Ok(c) if c.total() <= current => return Ok(candidate),
            _ => {}
        }
    }
    if solved_any {
        Ok(*pose)
    } else {
        Err(Error::DegenerateNormalEquations {
            pose: Box::new(*pose),
        })
    }
}

/// Initial pose composed from the priors: GNSS translation and IMU orientation.
pub fn prior_seed(priors: &Priors) -> RigidTransform {
    RigidTransform::new(
        priors.rotation.map(|r| r.c_s).unwrap_or_default(),
        priors.translation.map(|t| t.t_s).unwrap_or_else(Vector3::zeros),
    )
}

/// Full registration of `scan` onto `map`. Without an explicit initial pose
/// the priors seed the solver (identity when there are none).
pub fn register(
    scan: &PointCloud,
    map: &PointCloud,
    initial: Option<RigidTransform>,
    priors: &Priors,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    let target = RegistrationTarget::new(map, config)?;
    let scan = prepare_scan(scan, config)?;
    register_with_target(&scan, &target, initial, priors, config)
}

/// Registration against a prepared target. `scan` must already carry
/// covariances if the config reads them from the scan side.
pub fn register_with_target(
    scan: &PointCloud,
    target: &RegistrationTarget,
    initial: Option<RigidTransform>,
    priors: &Priors,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    if scan.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut pose = initial.unwrap_or_else(|| prior_seed(priors));
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iterations {
        let corrs = match_points(scan, target, &pose, config)?;
        let next = step(&corrs, scan, &target.cloud, &pose, priors, config)?;
        let cost = evaluate_cost(&corrs, scan, &target.cloud, &next, priors, config)?.total();
        let d_trans = (next.translation - pose.translation).norm();
        let d_rot = next.rotation.compose(&pose.rotation.inverse()).angle();
        pose = next;
        trace.push(IterationRecord { cost, pose });
        if d_trans < config.translation_epsilon && d_rot < config.rotation_epsilon {
            converged = true;
            break;
        }
    }
    let corrs = match_points(scan, target, &pose, config)?;
    let cost_breakdown = evaluate_cost(&corrs, scan, &target.cloud, &pose, priors, config)?;
    Ok(RegistrationResult {
        estimate: pose,
        converged,
        iterations: trace.len(),
        cost_breakdown,
        trace,
    })
}
