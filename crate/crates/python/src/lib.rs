//! Python bindings. Vectors are `[x, y, z]` lists and matrices are
//! row-major nested lists.

use nalgebra::{Matrix3, Vector3};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use core_icp::eval::{self, Trajectory};
use core_icp::lie;
use core_icp::penalties;
use core_icp::registration::{self, CovarianceSource};
use core_icp::sim::{self, SceneKind, SceneSpec};

create_exception!(penalized_icp, PenalizedIcpError, PyException);

type Vec3 = [f64; 3];
type Mat3 = [[f64; 3]; 3];

fn err(e: core_icp::Error) -> PyErr {
    PenalizedIcpError::new_err(e.to_string())
}

fn v(a: Vec3) -> Vector3<f64> {
    Vector3::from(a)
}

fn m(a: Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| a[i][j])
}

fn to_v(x: &Vector3<f64>) -> Vec3 {
    [x.x, x.y, x.z]
}

fn to_m(x: &Matrix3<f64>) -> Mat3 {
    [
        [x[(0, 0)], x[(0, 1)], x[(0, 2)]],
        [x[(1, 0)], x[(1, 1)], x[(1, 2)]],
        [x[(2, 0)], x[(2, 1)], x[(2, 2)]],
    ]
}

fn rotation(a: Mat3) -> PyResult<lie::Rotation> {
    lie::Rotation::from_matrix(m(a)).map_err(err)
}

#[pyfunction]
fn hat(phi: Vec3) -> Mat3 {
    to_m(&lie::hat(&v(phi)))
}

#[pyfunction]
fn vee(matrix: Mat3) -> PyResult<Vec3> {
    lie::vee(&m(matrix)).map(|x| to_v(&x)).map_err(err)
}

#[pyfunction]
fn exp_so3(phi: Vec3) -> Mat3 {
    to_m(lie::exp_so3(&v(phi)).matrix())
}

#[pyfunction]
fn log_so3(matrix: Mat3) -> PyResult<Vec3> {
    lie::log_so3(&rotation(matrix)?).map(|x| to_v(&x)).map_err(err)
}

#[pyfunction]
fn left_jacobian(beta: Vec3) -> Mat3 {
    to_m(&lie::left_jacobian(&v(beta)))
}

#[pyfunction]
fn left_jacobian_inv(beta: Vec3) -> PyResult<Mat3> {
    lie::left_jacobian_inv(&v(beta)).map(|x| to_m(&x)).map_err(err)
}

/// `log(c_s c_i^T)`.
#[pyfunction]
fn rotation_error(c_s: Mat3, c_i: Mat3) -> PyResult<Vec3> {
    lie::rotation_error(&rotation(c_s)?, &rotation(c_i)?)
        .map(|x| to_v(&x))
        .map_err(err)
}

#[pyclass(name = "RigidTransform", module = "penalized_icp", from_py_object)]
#[derive(Clone, Copy)]
struct PyRigidTransform(lie::RigidTransform);

#[pymethods]
impl PyRigidTransform {
    #[new]
    #[pyo3(signature = (rotation=None, translation=None))]
    fn new(rotation: Option<Mat3>, translation: Option<Vec3>) -> PyResult<Self> {
        let r = match rotation {
            Some(a) => self::rotation(a)?,
            None => lie::Rotation::identity(),
        };
        Ok(Self(lie::RigidTransform::new(r, translation.map(v).unwrap_or_else(Vector3::zeros))))
    }

    #[staticmethod]
    #[pyo3(signature = (yaw, translation=None))]
    fn from_yaw(yaw: f64, translation: Option<Vec3>) -> Self {
        Self(lie::RigidTransform::new(
            lie::Rotation::from_yaw(yaw),
            translation.map(v).unwrap_or_else(Vector3::zeros),
        ))
    }

    #[getter]
    fn rotation(&self) -> Mat3 {
        to_m(self.0.rotation.matrix())
    }

    #[getter]
    fn translation(&self) -> Vec3 {
        to_v(&self.0.translation)
    }

    /// `(roll, pitch, yaw)` in radians.
    fn roll_pitch_yaw(&self) -> (f64, f64, f64) {
        self.0.rotation.roll_pitch_yaw()
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn compose(&self, other: &Self) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn __mul__(&self, other: &Self) -> Self {
        self.compose(other)
    }

    fn transform_point(&self, p: Vec3) -> Vec3 {
        to_v(&self.0.transform_point(&v(p)))
    }

    /// KITTI row-major `[R | t]`.
    fn to_row_major(&self) -> Vec<f64> {
        self.0.to_row_major().to_vec()
    }

    fn __repr__(&self) -> String {
        let t = self.0.translation;
        format!(
            "RigidTransform(translation=[{}, {}, {}], angle={})",
            t.x,
            t.y,
            t.z,
            self.0.rotation.angle()
        )
    }
}

#[pyclass(name = "PointCloud", module = "penalized_icp", from_py_object)]
#[derive(Clone)]
struct PyPointCloud(core_icp::PointCloud);

#[pymethods]
impl PyPointCloud {
    #[new]
    fn new(points: Vec<Vec3>) -> Self {
        Self(core_icp::PointCloud::new(points.into_iter().map(v).collect()))
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        core_icp::io::read_point_cloud(path).map(Self).map_err(err)
    }

    /// `binary` selects the XYZB format, otherwise ASCII.
    #[pyo3(signature = (path, binary=false))]
    fn write(&self, path: &str, binary: bool) -> PyResult<()> {
        let format = if binary {
            core_icp::io::CloudFormat::Binary
        } else {
            core_icp::io::CloudFormat::Ascii
        };
        core_icp::io::write_point_cloud(&self.0, path, format).map_err(err)
    }

    #[getter]
    fn points(&self) -> Vec<Vec3> {
        self.0.points.iter().map(to_v).collect()
    }

    fn transformed(&self, pose: &PyRigidTransform) -> Self {
        Self(self.0.transformed(&pose.0))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "TranslationPrior", module = "penalized_icp", from_py_object)]
#[derive(Clone, Copy)]
struct PyTranslationPrior(penalties::TranslationPrior);

#[pymethods]
impl PyTranslationPrior {
    #[new]
    fn new(t_s: Vec3, sigma_t: Mat3) -> PyResult<Self> {
        penalties::TranslationPrior::new(v(t_s), m(sigma_t)).map(Self).map_err(err)
    }

    fn penalty(&self, t: Vec3) -> PyResult<f64> {
        penalties::translation_penalty(&self.0, &v(t)).map_err(err)
    }
}

#[pyclass(name = "RotationPrior", module = "penalized_icp", from_py_object)]
#[derive(Clone, Copy)]
struct PyRotationPrior(penalties::RotationPrior);

#[pymethods]
impl PyRotationPrior {
    #[new]
    fn new(c_s: Mat3, sigma_eps: Mat3) -> PyResult<Self> {
        penalties::RotationPrior::new(rotation(c_s)?, m(sigma_eps)).map(Self).map_err(err)
    }

    /// `beta^T Sigma_eps^{-1} beta` with `beta = log(C_s C_i^T)`.
    fn penalty(&self, c_i: Mat3) -> PyResult<f64> {
        penalties::rotation_penalty(&self.0, &rotation(c_i)?).map_err(err)
    }

    fn scaled(&self, factor: f64) -> PyResult<Self> {
        self.0.scaled(factor).map(Self).map_err(err)
    }
}

#[pyclass(name = "RegistrationConfig", module = "penalized_icp", from_py_object)]
#[derive(Clone)]
struct PyRegistrationConfig {
    #[pyo3(get, set)]
    alpha_p: f64,
    #[pyo3(get, set)]
    alpha_t: f64,
    #[pyo3(get, set)]
    alpha_theta: f64,
    #[pyo3(get, set)]
    max_iterations: usize,
    #[pyo3(get, set)]
    translation_epsilon: f64,
    #[pyo3(get, set)]
    rotation_epsilon: f64,
    #[pyo3(get, set)]
    trim_ratio: f64,
    #[pyo3(get, set)]
    max_correspondence_distance: Option<f64>,
    #[pyo3(get, set)]
    yaw_only: bool,
    #[pyo3(get, set)]
    covariance_k: usize,
    #[pyo3(get, set)]
    flatten_ratio: f64,
    #[pyo3(get, set)]
    covariance_source: String,
}

impl PyRegistrationConfig {
    fn to_core(&self) -> PyResult<registration::RegistrationConfig> {
        let cfg = registration::RegistrationConfig {
            weights: penalties::PenaltyWeights {
                alpha_p: self.alpha_p,
                alpha_t: self.alpha_t,
                alpha_theta: self.alpha_theta,
            },
            max_iterations: self.max_iterations,
            translation_epsilon: self.translation_epsilon,
            rotation_epsilon: self.rotation_epsilon,
            trim_ratio: self.trim_ratio,
            max_correspondence_distance: self.max_correspondence_distance,
            yaw_only: self.yaw_only,
            covariance_k: self.covariance_k,
            flatten_ratio: self.flatten_ratio,
            covariance_source: self.covariance_source.parse::<CovarianceSource>().map_err(err)?,
        };
        cfg.validate().map_err(err)?;
        Ok(cfg)
    }
}

#[pymethods]
impl PyRegistrationConfig {
    /// Defaults match the library; any field can be given as a keyword.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let d = registration::RegistrationConfig::default();
        let cfg = Bound::new(
            py,
            Self {
                alpha_p: d.weights.alpha_p,
                alpha_t: d.weights.alpha_t,
                alpha_theta: d.weights.alpha_theta,
                max_iterations: d.max_iterations,
                translation_epsilon: d.translation_epsilon,
                rotation_epsilon: d.rotation_epsilon,
                trim_ratio: d.trim_ratio,
                max_correspondence_distance: d.max_correspondence_distance,
                yaw_only: d.yaw_only,
                covariance_k: d.covariance_k,
                flatten_ratio: d.flatten_ratio,
                covariance_source: d.covariance_source.to_string(),
            },
        )?;
        if let Some(kw) = kwargs {
            for (k, val) in kw.iter() {
                cfg.setattr(k.extract::<String>()?.as_str(), val)?;
            }
        }
        let out = cfg.borrow().clone();
        out.to_core()?;
        Ok(out)
    }
}

#[pyclass(name = "RegistrationResult", module = "penalized_icp", get_all)]
struct PyRegistrationResult {
    estimate: PyRigidTransform,
    converged: bool,
    iterations: usize,
    point_term: f64,
    gnss_term: f64,
    lie_term: f64,
    total_cost: f64,
    /// Cost after each iteration.
    trace_costs: Vec<f64>,
}

/// Registers `scan` onto `map`. Without `initial` the priors seed the solver.
#[pyfunction]
#[pyo3(signature = (scan, map, initial=None, translation_prior=None, rotation_prior=None, config=None))]
fn register(
    py: Python<'_>,
    scan: &PyPointCloud,
    map: &PyPointCloud,
    initial: Option<PyRigidTransform>,
    translation_prior: Option<PyTranslationPrior>,
    rotation_prior: Option<PyRotationPrior>,
    config: Option<PyRegistrationConfig>,
) -> PyResult<PyRegistrationResult> {
    let cfg = match config {
        Some(c) => c.to_core()?,
        None => registration::RegistrationConfig::default(),
    };
    let priors = penalties::Priors {
        translation: translation_prior.map(|p| p.0),
        rotation: rotation_prior.map(|p| p.0),
    };
    let (scan, map) = (scan.0.clone(), map.0.clone());
    let r = py
        .detach(|| registration::register(&scan, &map, initial.map(|p| p.0), &priors, &cfg))
        .map_err(err)?;
    let c = r.cost_breakdown;
    Ok(PyRegistrationResult {
        estimate: PyRigidTransform(r.estimate),
        converged: r.converged,
        iterations: r.iterations,
        point_term: c.point_term,
        gnss_term: c.gnss_term,
        lie_term: c.lie_term,
        total_cost: c.total(),
        trace_costs: r.trace.iter().map(|t| t.cost).collect(),
    })
}

/// Synthetic scene; `kind` is one of the simulator's scene names.
#[pyfunction]
#[pyo3(signature = (kind, density=50.0, extent=20.0, seed=0))]
fn generate_scene(kind: &str, density: f64, extent: f64, seed: u64) -> PyResult<PyPointCloud> {
    let kind: SceneKind = kind.parse().map_err(err)?;
    sim::generate_scene(&SceneSpec {
        kind,
        density,
        extent,
        seed,
    })
    .map(PyPointCloud)
    .map_err(err)
}

/// The scene as seen from `pose`, keeping each point with probability `subsample`.
#[pyfunction]
#[pyo3(signature = (scene, pose, subsample=1.0, seed=0))]
fn sample_scan(scene: &PyPointCloud, pose: &PyRigidTransform, subsample: f64, seed: u64) -> PyResult<PyPointCloud> {
    sim::sample_scan(&scene.0, &pose.0, subsample, seed)
        .map(PyPointCloud)
        .map_err(err)
}

/// KITTI-style drift metrics as a dict.
#[pyfunction]
#[pyo3(signature = (estimate, truth, segment_lengths=None))]
fn kitti_metrics<'py>(
    py: Python<'py>,
    estimate: Vec<PyRigidTransform>,
    truth: Vec<PyRigidTransform>,
    segment_lengths: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let lengths = segment_lengths.unwrap_or_else(|| eval::DEFAULT_SEGMENT_LENGTHS.to_vec());
    let est = Trajectory::from_poses(estimate.into_iter().map(|p| p.0).collect());
    let gt = Trajectory::from_poses(truth.into_iter().map(|p| p.0).collect());
    let mtr = eval::kitti_metrics(&est, &gt, &lengths).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("translation_error_percent", mtr.translation_error_percent)?;
    d.set_item("rotation_error_deg_per_100m", mtr.rotation_error_deg_per_100m)?;
    d.set_item("segments", mtr.per_segment.len())?;
    Ok(d)
}

#[pyfunction]
fn read_poses_kitti(path: &str) -> PyResult<Vec<PyRigidTransform>> {
    core_icp::io::read_poses_kitti(path)
        .map(|t| t.poses.into_iter().map(PyRigidTransform).collect())
        .map_err(err)
}

#[pymodule]
fn penalized_icp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PenalizedIcpError", m.py().get_type::<PenalizedIcpError>())?;
    m.add_class::<PyRigidTransform>()?;
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyTranslationPrior>()?;
    m.add_class::<PyRotationPrior>()?;
    m.add_class::<PyRegistrationConfig>()?;
    m.add_class::<PyRegistrationResult>()?;
    m.add_function(wrap_pyfunction!(hat, m)?)?;
    m.add_function(wrap_pyfunction!(vee, m)?)?;
    m.add_function(wrap_pyfunction!(exp_so3, m)?)?;
    m.add_function(wrap_pyfunction!(log_so3, m)?)?;
    m.add_function(wrap_pyfunction!(left_jacobian, m)?)?;
    m.add_function(wrap_pyfunction!(left_jacobian_inv, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_error, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(sample_scan, m)?)?;
    m.add_function(wrap_pyfunction!(kitti_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(read_poses_kitti, m)?)?;
    Ok(())
}
