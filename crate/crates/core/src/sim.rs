//! Seeded synthetic scenes, scans, trajectories and noisy sensor priors.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64`; Gaussian draws use `rand_distr::StandardNormal`. Output is
//! bit-deterministic for a given seed.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lie::{exp_so3, log_so3, AxisAngle, RigidTransform, Rotation};
use crate::penalties::{RotationPrior, TranslationPrior};
use crate::pointcloud::PointCloud;

/// Variance floor applied to prior covariance diagonals.
pub const COVARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Box room with two interior blocks; every wall lies on a known plane.
    StructuredRoom,
    /// The z = 0 plane: x, y and yaw are unobservable.
    FlatPlane,
    /// Open vertical cylinder about the z axis: yaw is unobservable.
    RotationallyAmbiguousCylinder,
    /// Long corridor along x with sparse pillars.
    SparseCorridor,
    /// Corridor along -x leading into a cylindrical rotunda centered at the origin.
    CylinderCorridor,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "structured_room" => Self::StructuredRoom,
            "flat_plane" => Self::FlatPlane,
            "rotationally_ambiguous_cylinder" | "cylinder" => Self::RotationallyAmbiguousCylinder,
            "sparse_corridor" => Self::SparseCorridor,
            "cylinder_corridor" => Self::CylinderCorridor,
            other => return Err(Error::InvalidArgument(format!("unknown scene kind '{other}'"))),
        })
    }
}

impl std::fmt::Display for SceneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::StructuredRoom => "structured_room",
            Self::FlatPlane => "flat_plane",
            Self::RotationallyAmbiguousCylinder => "rotationally_ambiguous_cylinder",
            Self::SparseCorridor => "sparse_corridor",
            Self::CylinderCorridor => "cylinder_corridor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    /// Points per square meter of surface.
    pub density: f64,
    /// Characteristic size in meters.
    pub extent: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0) || !(self.extent > 0.0) {
            return Err(Error::InvalidArgument(
                "scene density and extent must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Cylinder radius for the cylinder kinds.
    pub fn cylinder_radius(&self) -> f64 {
        match self.kind {
            SceneKind::CylinderCorridor => ROTUNDA_RADIUS,
            _ => 0.5 * self.extent,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

const ROTUNDA_RADIUS: f64 = 4.0;
const WALL_HEIGHT: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisySensorSpec {
    /// Per-axis GNSS standard deviation, meters.
    pub gnss_sigma: Vector3<f64>,
    /// Per-axis standard deviation of the left perturbation, radians.
    pub imu_rot_sigma: Vector3<f64>,
    pub outlier_prob: f64,
    /// Radians.
    pub outlier_magnitude: f64,
    pub seed: u64,
}

impl NoisySensorSpec {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            gnss_sigma: Vector3::zeros(),
            imu_rot_sigma: Vector3::zeros(),
            outlier_prob: 0.0,
            outlier_magnitude: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gnss_sigma.iter().chain(self.imu_rot_sigma.iter()).all(|s| *s >= 0.0)
            && (0.0..=1.0).contains(&self.outlier_prob)
            && self.outlier_magnitude >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("invalid noise spec".into()))
        }
    }
}

/// Mixes a stream index into a base seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Sampler {
    rng: ChaCha8Rng,
    density: f64,
    points: Vec<Vector3<f64>>,
}

impl Sampler {
    fn count(&self, area: f64) -> usize {
        (self.density * area).round() as usize
    }

    /// Axis-aligned rectangle: `origin + u * a + v * b`, `u, v` in `[0, 1]`.
    fn rect(&mut self, origin: Vector3<f64>, a: Vector3<f64>, b: Vector3<f64>) {
        let n = self.count(a.norm() * b.norm());
        for _ in 0..n {
            let u: f64 = self.rng.random();
            let v: f64 = self.rng.random();
            self.points.push(origin + a * u + b * v);
        }
    }

    /// Axis-aligned box without its bottom face.
    fn block(&mut self, center: Vector3<f64>, size: Vector3<f64>) {
        let lo = center - size / 2.0;
        let (x, y, z) = (
            Vector3::new(size.x, 0.0, 0.0),
            Vector3::new(0.0, size.y, 0.0),
            Vector3::new(0.0, 0.0, size.z),
        );
        self.rect(lo, x, z);
        self.rect(lo + y, x, z);
        self.rect(lo, y, z);
        self.rect(lo + x, y, z);
        self.rect(lo + z, x, y);
    }

    fn cylinder(&mut self, radius: f64, height: f64) {
        let n = self.count(2.0 * PI * radius * height);
        for _ in 0..n {
            let a: f64 = self.rng.random_range(0.0..2.0 * PI);
            let z: f64 = self.rng.random_range(0.0..height);
            self.points.push(Vector3::new(radius * a.cos(), radius * a.sin(), z));
        }
    }

    fn disc(&mut self, radius: f64) {
        let n = self.count(PI * radius * radius);
        for _ in 0..n {
            let r = radius * self.rng.random::<f64>().sqrt();
            let a: f64 = self.rng.random_range(0.0..2.0 * PI);
            self.points.push(Vector3::new(r * a.cos(), r * a.sin(), 0.0));
        }
    }

    /// Corridor along x between `x0` and `x1` with walls at `y = +-half_width`,
    /// a floor, and pillars every `pillar_spacing` meters on alternating sides.
    fn corridor(&mut self, x0: f64, x1: f64, half_width: f64, pillar_spacing: f64) {
        let len = x1 - x0;
        let h = WALL_HEIGHT;
        let along = Vector3::new(len, 0.0, 0.0);
        let up = Vector3::new(0.0, 0.0, h);
        self.rect(Vector3::new(x0, -half_width, 0.0), along, up);
        self.rect(Vector3::new(x0, half_width, 0.0), along, up);
        self.rect(
            Vector3::new(x0, -half_width, 0.0),
            along,
            Vector3::new(0.0, 2.0 * half_width, 0.0),
        );
        let pillar = Vector3::new(0.4, 0.4, h);
        let mut x = x0 + 0.5 * pillar_spacing;
        let mut side = 1.0;
        while x < x1 {
            let y = side * (half_width - 0.2);
            self.block(Vector3::new(x, y, 0.5 * h), pillar);
            side = -side;
            x += pillar_spacing;
        }
    }
}

/// Deterministic surface sampling of the requested scene.
pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let e = spec.extent;
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        density: spec.density,
        points: Vec::new(),
    };
    match spec.kind {
        SceneKind::StructuredRoom => {
            let (lx, ly, lz) = (e, 0.8 * e, 0.3 * e);
            let o = Vector3::new(-lx / 2.0, -ly / 2.0, 0.0);
            let (x, y, z) = (
                Vector3::new(lx, 0.0, 0.0),
                Vector3::new(0.0, ly, 0.0),
                Vector3::new(0.0, 0.0, lz),
            );
            s.rect(o, x, y);
            s.rect(o + z, x, y);
            s.rect(o, x, z);
            s.rect(o + y, x, z);
            s.rect(o, y, z);
            s.rect(o + x, y, z);
            let b = 0.1 * e;
            s.block(Vector3::new(0.2 * e, 0.15 * e, 0.5 * b), Vector3::repeat(b));
            s.block(
                Vector3::new(-0.25 * e, -0.2 * e, 0.075 * e),
                Vector3::new(0.06 * e, 0.12 * e, 0.15 * e),
            );
        }
        SceneKind::FlatPlane => {
            s.rect(
                Vector3::new(-e / 2.0, -e / 2.0, 0.0),
                Vector3::new(e, 0.0, 0.0),
                Vector3::new(0.0, e, 0.0),
            );
        }
        SceneKind::RotationallyAmbiguousCylinder => {
            s.cylinder(0.5 * e, 0.3 * e);
        }
        SceneKind::SparseCorridor => {
            s.corridor(-e / 2.0, e / 2.0, 1.5, 5.0);
        }
        SceneKind::CylinderCorridor => {
            s.cylinder(ROTUNDA_RADIUS, WALL_HEIGHT);
            s.disc(ROTUNDA_RADIUS);
            s.corridor(-e, -ROTUNDA_RADIUS - 2.0, 2.0, 4.0);
        }
    }
    Ok(PointCloud::new(s.points))
}

/// Scene expressed in the sensor frame at `sensor_pose`, keeping each point
/// with probability `subsample`. The sensor origin is recorded.
pub fn sample_scan(
    scene: &PointCloud,
    sensor_pose: &RigidTransform,
    subsample: f64,
    seed: u64,
) -> Result<PointCloud> {
    if !(subsample > 0.0 && subsample <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subsample {subsample} must be in (0, 1]"
        )));
    }
    let inv = sensor_pose.inverse();
    let mut out = PointCloud::new(scene.points.iter().map(|p| inv.transform_point(p)).collect())
        .decimate(subsample, seed);
    out.sensor_origin = Some(Vector3::zeros());
    Ok(out)
}

/// Points within `radius` of `center`.
pub fn crop_radius(cloud: &PointCloud, center: &Vector3<f64>, radius: f64) -> PointCloud {
    let r2 = radius * radius;
    cloud.select(|i| (cloud.points[i] - center).norm_squared() <= r2)
}

/// One draw of noisy priors with the perturbation that produced the rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorDraw {
    pub translation: TranslationPrior,
    pub rotation: RotationPrior,
    /// The left perturbation applied, `C_s = exp(eps^) C_truth`.
    pub epsilon: AxisAngle,
    pub outlier: bool,
}

/// Stateful generator of noisy GNSS/IMU priors.
pub struct PriorSampler {
    spec: NoisySensorSpec,
    rng: ChaCha8Rng,
}

impl PriorSampler {
    pub fn new(spec: &NoisySensorSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: *spec,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        })
    }

    fn normal3(&mut self) -> Vector3<f64> {
        Vector3::new(
            self.rng.sample(StandardNormal),
            self.rng.sample(StandardNormal),
            self.rng.sample(StandardNormal),
        )
    }

    pub fn draw(&mut self, truth: &RigidTransform) -> Result<PriorDraw> {
        let spec = self.spec;
        let t_noise = self.normal3().component_mul(&spec.gnss_sigma);
        let mut epsilon = self.normal3().component_mul(&spec.imu_rot_sigma);
        let u: f64 = self.rng.random();
        let axis = loop {
            let v = self.normal3();
            if v.norm() > 1e-12 {
                break v.normalize();
            }
        };
        let outlier = u < spec.outlier_prob;
        if outlier {
            epsilon += axis * spec.outlier_magnitude;
        }
        let floor = |s: &Vector3<f64>| Matrix3::from_diagonal(&s.map(|v| (v * v).max(COVARIANCE_FLOOR)));
        let translation = TranslationPrior::new(truth.translation + t_noise, floor(&spec.gnss_sigma))?;
        let c_s = exp_so3(&epsilon).compose(&truth.rotation);
        let rotation = RotationPrior::new(c_s, floor(&spec.imu_rot_sigma))?;
        Ok(PriorDraw {
            translation,
            rotation,
            epsilon,
            outlier,
        })
    }
}

/// Single noisy prior draw seeded from `spec.seed`.
pub fn corrupt_prior(
    truth: &RigidTransform,
    spec: &NoisySensorSpec,
) -> Result<(TranslationPrior, RotationPrior)> {
    let d = PriorSampler::new(spec)?.draw(truth)?;
    Ok((d.translation, d.rotation))
}

/// Poses driven by body-frame increments: each step yaws by `yaw` then moves `forward` along the new heading.
pub fn drive(start: &RigidTransform, increments: &[(f64, f64)]) -> Vec<RigidTransform> {
    let mut poses = vec![*start];
    let mut cur = *start;
    for &(forward, yaw) in increments {
        let inc = RigidTransform::new(Rotation::from_yaw(yaw), Vector3::zeros())
            .compose(&RigidTransform::from_translation(Vector3::new(forward, 0.0, 0.0)));
        cur = cur.compose(&inc);
        poses.push(cur);
    }
    poses
}

/// Constant-curvature path of `steps + 1` poses.
pub fn arc_trajectory(start: &RigidTransform, steps: usize, step_length: f64, yaw_rate: f64) -> Vec<RigidTransform> {
    drive(start, &vec![(step_length, yaw_rate); steps])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanSpec {
    pub subsample: f64,
    /// Only points within this distance of the sensor are kept.
    pub crop_radius: Option<f64>,
    /// Draw a fresh surface sample for every scan instead of reusing the scene's points.
    pub resample_surface: bool,
    pub seed: u64,
}

/// A simulated sequence expressed in the frame of its first pose.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub scene: PointCloud,
    pub scans: Vec<PointCloud>,
    pub truth: Vec<RigidTransform>,
    pub priors: Vec<PriorDraw>,
}

/// Scans and priors along `world_poses`. The world is re-anchored so the first
/// truth pose is the identity.
pub fn simulate_sequence(
    scene_spec: &SceneSpec,
    world_poses: &[RigidTransform],
    scan_spec: &ScanSpec,
    noise: &NoisySensorSpec,
) -> Result<Sequence> {
    if world_poses.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let scene = generate_scene(scene_spec)?;
    let anchor = world_poses[0].inverse();
    let mut sampler = PriorSampler::new(noise)?;
    let mut scans = Vec::with_capacity(world_poses.len());
    let mut truth = Vec::with_capacity(world_poses.len());
    let mut priors = Vec::with_capacity(world_poses.len());
    for (k, pose) in world_poses.iter().enumerate() {
        let surface = if scan_spec.resample_surface {
            generate_scene(&scene_spec.with_seed(derive_seed(scene_spec.seed, k as u64)))?
        } else {
            scene.clone()
        };
        let visible = match scan_spec.crop_radius {
            Some(r) => crop_radius(&surface, &pose.translation, r),
            None => surface,
        };
        scans.push(sample_scan(
            &visible,
            pose,
            scan_spec.subsample,
            derive_seed(scan_spec.seed, k as u64),
        )?);
        let rel = anchor.compose(pose);
        priors.push(sampler.draw(&rel)?);
        truth.push(rel);
    }
    Ok(Sequence {
        scene: scene.transformed(&anchor),
        scans,
        truth,
        priors,
    })
}

/// `log(C_s C_truth^T)`: the perturbation a prior carries relative to the truth.
pub fn prior_rotation_error(prior: &RotationPrior, truth: &Rotation) -> Result<AxisAngle> {
    log_so3(&prior.c_s.compose(&truth.inverse()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(kind: SceneKind) -> SceneSpec {
        SceneSpec {
            kind,
            density: 20.0,
            extent: 10.0,
            seed: 3,
        }
    }

    #[test]
    fn flat_plane_is_flat() {
        let c = generate_scene(&spec(SceneKind::FlatPlane)).unwrap();
        assert!(c.len() > 1000);
        assert!(c.points.iter().all(|p| p.z.abs() <= 1e-12));
    }

    #[test]
    fn cylinder_points_lie_on_radius() {
        let s = spec(SceneKind::RotationallyAmbiguousCylinder);
        let c = generate_scene(&s).unwrap();
        let r = s.cylinder_radius();
        assert!(c
            .points
            .iter()
            .all(|p| ((p.x * p.x + p.y * p.y).sqrt() - r).abs() <= 1e-9));
    }

    #[test]
    fn scenes_are_seed_deterministic() {
        for kind in [
            SceneKind::StructuredRoom,
            SceneKind::FlatPlane,
            SceneKind::RotationallyAmbiguousCylinder,
            SceneKind::SparseCorridor,
            SceneKind::CylinderCorridor,
        ] {
            let a = generate_scene(&spec(kind)).unwrap();
            let b = generate_scene(&spec(kind)).unwrap();
            assert_eq!(a, b);
            let c = generate_scene(&spec(kind).with_seed(4)).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn room_points_lie_on_known_planes() {
        let s = spec(SceneKind::StructuredRoom);
        let c = generate_scene(&s).unwrap();
        let (hx, hy, hz) = (5.0, 4.0, 3.0);
        let on_room = |p: &Vector3<f64>| {
            p.z.abs() < 1e-12
                || (p.z - hz).abs() < 1e-12
                || (p.x.abs() - hx).abs() < 1e-12
                || (p.y.abs() - hy).abs() < 1e-12
        };
        let n_room = c.points.iter().filter(|p| on_room(p)).count();
        // Everything else belongs to the two interior blocks.
        assert!(n_room > c.len() * 8 / 10);
    }

    #[test]
    fn sample_scan_examples() {
        let scene = generate_scene(&spec(SceneKind::StructuredRoom)).unwrap();
        let same = sample_scan(&scene, &RigidTransform::identity(), 1.0, 1).unwrap();
        assert_eq!(same.points, scene.points);
        assert_eq!(same.sensor_origin, Some(Vector3::zeros()));

        let t = Vector3::new(0.3, -1.2, 0.4);
        let shifted = sample_scan(&scene, &RigidTransform::from_translation(t), 1.0, 1).unwrap();
        for (a, b) in shifted.points.iter().zip(&scene.points) {
            assert_eq!(*a, b - t);
        }
    }

    #[test]
    fn subsample_count_is_binomial() {
        let scene = PointCloud::new((0..10_000).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect());
        let a = sample_scan(&scene, &RigidTransform::identity(), 0.5, 99).unwrap();
        let b = sample_scan(&scene, &RigidTransform::identity(), 0.5, 99).unwrap();
        assert_eq!(a, b);
        // 3 sigma of Binomial(10^4, 0.5) is 150.
        assert!((a.len() as i64 - 5000).abs() <= 150, "{}", a.len());
    }

    #[test]
    fn noiseless_prior_equals_truth() {
        let truth = RigidTransform::new(exp_so3(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(1.0, 2.0, 3.0));
        let (tp, rp) = corrupt_prior(&truth, &NoisySensorSpec::noiseless(5)).unwrap();
        assert_eq!(tp.t_s, truth.translation);
        assert_eq!(rp.c_s, truth.rotation);
        assert_eq!(tp.sigma_t, Matrix3::identity() * COVARIANCE_FLOOR);
        assert_eq!(rp.sigma_eps, Matrix3::identity() * COVARIANCE_FLOOR);
    }

    #[test]
    fn yaw_noise_statistics() {
        let spec = NoisySensorSpec {
            imu_rot_sigma: Vector3::new(0.0, 0.0, 0.01),
            ..NoisySensorSpec::noiseless(2024)
        };
        let truth = RigidTransform::new(exp_so3(&Vector3::new(0.3, -0.1, 1.0)), Vector3::zeros());
        let mut sampler = PriorSampler::new(&spec).unwrap();
        let n = 10_000;
        let yaws: Vec<f64> = (0..n)
            .map(|_| {
                let d = sampler.draw(&truth).unwrap();
                let eps = prior_rotation_error(&d.rotation, &truth.rotation).unwrap();
                assert!((eps - d.epsilon).norm() <= 1e-12);
                eps.z
            })
            .collect();
        let mean = yaws.iter().sum::<f64>() / n as f64;
        let std = (yaws.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((std / 0.01 - 1.0).abs() <= 0.05, "std {std}");
    }

    #[test]
    fn outliers_are_large() {
        let sigma = Vector3::new(0.01, 0.02, 0.005);
        let spec = NoisySensorSpec {
            imu_rot_sigma: sigma,
            outlier_prob: 1.0,
            outlier_magnitude: 0.5,
            ..NoisySensorSpec::noiseless(8)
        };
        let mut sampler = PriorSampler::new(&spec).unwrap();
        for _ in 0..1000 {
            let d = sampler.draw(&RigidTransform::identity()).unwrap();
            assert!(d.outlier);
            assert!(d.epsilon.norm() >= 0.5 - 3.0 * sigma.norm());
            // Reported covariance is the honest one.
            assert_relative_eq!(d.rotation.sigma_eps[(1, 1)], 0.0004, epsilon = 1e-15);
        }
    }

    #[test]
    fn drive_composes_increments() {
        let poses = arc_trajectory(&RigidTransform::identity(), 4, 1.0, 0.0);
        assert_eq!(poses.len(), 5);
        assert_eq!(poses[4].translation, Vector3::new(4.0, 0.0, 0.0));
        let turn = drive(&RigidTransform::identity(), &[(0.0, PI / 2.0), (1.0, 0.0)]);
        assert_relative_eq!(turn[2].translation, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn sequence_is_anchored_at_identity() {
        let start = RigidTransform::new(Rotation::from_yaw(0.3), Vector3::new(-2.0, 1.0, 0.5));
        let poses = arc_trajectory(&start, 3, 0.5, 0.05);
        let seq = simulate_sequence(
            &spec(SceneKind::StructuredRoom),
            &poses,
            &ScanSpec {
                subsample: 0.3,
                crop_radius: Some(6.0),
                resample_surface: true,
                seed: 1,
            },
            &NoisySensorSpec::noiseless(1),
        )
        .unwrap();
        assert!(seq.truth[0].translation.norm() < 1e-12);
        assert!(seq.truth[0].rotation.angle() < 1e-12);
        assert_eq!(seq.scans.len(), 4);
        for scan in &seq.scans {
            assert!(scan.points.iter().all(|p| p.norm() <= 6.0 + 1e-9));
        }
    }
}
