//! `picp` command-line front end.
//!
//! Exit codes: 0 success, 1 error, 2 the solver did not converge (outputs are
//! still written).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::eval::{kitti_metrics, TrajectoryMetrics, DEFAULT_SEGMENT_LENGTHS};
use crate::io::{self, CloudFormat, PriorRecord};
use crate::lie::{RigidTransform, Rotation};
use crate::odometry::{run_odometry, OdometryOptions, OdometryResult};
use crate::penalties::Priors;
use crate::registration::{register, IterationRecord, RegistrationConfig, RegistrationResult};
use crate::sim::{
    arc_trajectory, derive_seed, simulate_sequence, NoisySensorSpec, SceneKind, SceneSpec, ScanSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "picp", version, about = "Penalized ICP registration, odometry, simulation and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register one scan onto a map and write the result as key-value text.
    Register(RegisterArgs),
    /// Register a directory of scans sequentially and write a KITTI trajectory.
    Odometry(OdometryArgs),
    /// Generate a synthetic scene, scans, ground truth and noisy priors.
    Simulate(SimulateArgs),
    /// Compute KITTI-style drift metrics of an estimate against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Config file of `key = value` lines named after the solver settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set alpha_theta=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Per-iteration cost and pose CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Cloud to align (ASCII XYZ or binary XYZB).
    #[arg(long)]
    pub scan: PathBuf,
    /// Reference cloud.
    #[arg(long)]
    pub map: PathBuf,
    /// Priors CSV. Seeds the solver and enables the penalty terms.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Row of the priors file to use (matched on its index column). Required
    /// when the file has more than one row.
    #[arg(long)]
    pub prior_index: Option<usize>,
    /// Result file; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct OdometryArgs {
    /// Directory of scans, processed in file-name order (.xyz, .xyzb, .bin).
    #[arg(long)]
    pub scans: PathBuf,
    /// Priors CSV with one row per scan, matched on the index column.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Fail unless a readable priors file is given.
    #[arg(long)]
    pub require_priors: bool,
    /// Number of previous scans merged into the reference map.
    #[arg(long, default_value_t = 1)]
    pub map_window: usize,
    /// KITTI trajectory output.
    #[arg(long)]
    pub output: PathBuf,
    /// Per-step CSV report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output directory; receives scans/, truth.txt, priors.csv and scene.xyz.
    #[arg(long)]
    pub output: PathBuf,
    /// structured_room, flat_plane, rotationally_ambiguous_cylinder,
    /// sparse_corridor or cylinder_corridor.
    #[arg(long, default_value = "structured_room")]
    pub scene: SceneKind,
    /// Surface samples per square meter.
    #[arg(long, default_value_t = 50.0)]
    pub density: f64,
    /// Scene size in meters.
    #[arg(long, default_value_t = 20.0)]
    pub extent: f64,
    /// Master seed; scene, scan and noise streams are derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of poses after the first.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Forward motion per step, meters.
    #[arg(long, default_value_t = 0.5)]
    pub step_length: f64,
    /// Heading change per step, degrees.
    #[arg(long, default_value_t = 0.0)]
    pub yaw_rate_deg: f64,
    /// Start position x, meters.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub start_x: f64,
    /// Start position y, meters.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub start_y: f64,
    /// Start position z, meters.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub start_z: f64,
    /// Start heading, degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub start_yaw_deg: f64,
    /// Fraction of visible points kept per scan.
    #[arg(long, default_value_t = 1.0)]
    pub subsample: f64,
    /// Keep only scene points within this range of the sensor, meters.
    #[arg(long)]
    pub crop_radius: Option<f64>,
    /// Draw a fresh surface sample for every scan.
    #[arg(long)]
    pub resample_surface: bool,
    /// GNSS standard deviation per axis, meters.
    #[arg(long, default_value_t = 0.0)]
    pub gnss_sigma: f64,
    /// IMU orientation standard deviation per axis, radians.
    #[arg(long, default_value_t = 0.0)]
    pub imu_sigma: f64,
    /// Probability that an orientation prior is an outlier.
    #[arg(long, default_value_t = 0.0)]
    pub outlier_prob: f64,
    /// Extra rotation applied to outlier priors, radians.
    #[arg(long, default_value_t = 0.0)]
    pub outlier_magnitude: f64,
    /// Scan file format: ascii or binary.
    #[arg(long, default_value = "ascii")]
    pub format: CloudFormat,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Estimated KITTI trajectory.
    #[arg(long)]
    pub estimate: PathBuf,
    /// Ground-truth KITTI trajectory.
    #[arg(long)]
    pub truth: PathBuf,
    /// Comma-separated segment lengths in meters.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEGMENT_LENGTHS)]
    pub segments: Vec<f64>,
    /// Metrics file; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Per-segment CSV.
    #[arg(long)]
    pub segments_csv: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::Register(a) => cmd_register(&a),
        Command::Odometry(a) => cmd_odometry(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

fn load_config(args: &SolverArgs) -> Result<RegistrationConfig> {
    let mut cfg = RegistrationConfig::default();
    if let Some(path) = &args.config {
        for (k, v) in io::parse_key_values(&fs::read_to_string(path)?)? {
            apply_setting(&mut cfg, &k, &v)?;
        }
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override '{o}' is not KEY=VALUE")))?;
        apply_setting(&mut cfg, k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Sets one config field by name.
pub fn apply_setting(cfg: &mut RegistrationConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("invalid value '{value}' for {key}")))
    }
    match key {
        "alpha_p" => cfg.weights.alpha_p = num(key, value)?,
        "alpha_t" => cfg.weights.alpha_t = num(key, value)?,
        "alpha_theta" => cfg.weights.alpha_theta = num(key, value)?,
        "max_iterations" => cfg.max_iterations = num(key, value)?,
        "translation_epsilon" => cfg.translation_epsilon = num(key, value)?,
        "rotation_epsilon" => cfg.rotation_epsilon = num(key, value)?,
        "trim_ratio" => cfg.trim_ratio = num(key, value)?,
        "max_correspondence_distance" => {
            cfg.max_correspondence_distance = match value {
                "auto" | "none" => None,
                v => Some(num(key, v)?),
            }
        }
        "yaw_only" => cfg.yaw_only = num(key, value)?,
        "covariance_k" => cfg.covariance_k = num(key, value)?,
        "flatten_ratio" => cfg.flatten_ratio = num(key, value)?,
        "covariance_source" => cfg.covariance_source = value.parse()?,
        other => return Err(Error::InvalidArgument(format!("unknown config key '{other}'"))),
    }
    Ok(())
}

fn select_prior(records: &[PriorRecord], index: Option<usize>) -> Result<Priors> {
    match index {
        Some(i) => records
            .iter()
            .find(|r| r.index == i)
            .map(PriorRecord::priors)
            .ok_or_else(|| Error::InvalidArgument(format!("no prior with index {i}"))),
        None => match records {
            [only] => Ok(only.priors()),
            _ => Err(Error::InvalidArgument(format!(
                "priors file has {} rows; pass --prior-index",
                records.len()
            ))),
        },
    }
}

fn cmd_register(a: &RegisterArgs) -> Result<i32> {
    let cfg = load_config(&a.solver)?;
    let scan = io::read_point_cloud(&a.scan)?;
    let map = io::read_point_cloud(&a.map)?;
    let priors = match &a.priors {
        Some(p) => select_prior(&io::read_priors(p)?, a.prior_index)?,
        None => Priors::none(),
    };
    let result = register(&scan, &map, None, &priors, &cfg)?;
    let text = format_result(&result);
    match &a.output {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    if let Some(p) = &a.solver.trace {
        fs::write(p, format_trace(&result.trace, None))?;
    }
    Ok(if result.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

/// Key-value text of a registration result.
pub fn format_result(r: &RegistrationResult) -> String {
    let c = &r.cost_breakdown;
    let mut s = String::new();
    let _ = writeln!(s, "pose = {}", io::format_reals(&r.estimate.to_row_major()));
    let _ = writeln!(s, "converged = {}", r.converged);
    let _ = writeln!(s, "iterations = {}", r.iterations);
    let _ = writeln!(s, "point_term = {:e}", c.point_term);
    let _ = writeln!(s, "gnss_term = {:e}", c.gnss_term);
    let _ = writeln!(s, "lie_term = {:e}", c.lie_term);
    let _ = writeln!(s, "total_cost = {:e}", c.total());
    s
}

/// Reads the pose back out of a result file.
pub fn parse_result_pose(text: &str) -> Result<RigidTransform> {
    let kv = io::parse_key_values(text)?;
    let (_, v) = kv
        .iter()
        .find(|(k, _)| k == "pose")
        .ok_or_else(|| Error::malformed_line(0, "no pose entry"))?;
    let t = io::parse_poses_kitti(v)?;
    t.poses
        .first()
        .copied()
        .ok_or_else(|| Error::malformed_line(0, "empty pose entry"))
}

const TRACE_COLUMNS: &str = "iteration,cost,r00,r01,r02,tx,r10,r11,r12,ty,r20,r21,r22,tz";

fn format_trace(trace: &[IterationRecord], step: Option<usize>) -> String {
    let mut s = String::new();
    if step.is_none() {
        let _ = writeln!(s, "{TRACE_COLUMNS}");
    }
    for (i, rec) in trace.iter().enumerate() {
        let pose: Vec<String> = rec.pose.to_row_major().iter().map(|v| format!("{v:e}")).collect();
        if let Some(k) = step {
            let _ = write!(s, "{k},");
        }
        let _ = writeln!(s, "{},{:e},{}", i + 1, rec.cost, pose.join(","));
    }
    s
}

fn list_scans(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("xyz") | Some("xyzb") | Some("bin")
                )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no scans in {}", dir.display())));
    }
    Ok(files)
}

fn cmd_odometry(a: &OdometryArgs) -> Result<i32> {
    let cfg = load_config(&a.solver)?;
    let records = match &a.priors {
        Some(p) => Some(io::read_priors(p)?),
        None if a.require_priors => {
            return Err(Error::InvalidArgument("--require-priors set but no --priors given".into()))
        }
        None => None,
    };
    let files = list_scans(&a.scans)?;
    let scans = files
        .iter()
        .map(io::read_point_cloud)
        .collect::<Result<Vec<_>>>()?;
    let priors = records
        .map(|recs| {
            (0..scans.len())
                .map(|k| select_prior(&recs, Some(k)))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let opts = OdometryOptions {
        map_window: a.map_window,
    };
    let result = run_odometry(&scans, priors.as_deref(), &cfg, &opts)?;
    io::write_poses_kitti(&result.trajectory, &a.output)?;
    if let Some(p) = &a.report {
        fs::write(p, format_report(&result))?;
    }
    if let Some(p) = &a.solver.trace {
        let mut s = format!("step,{TRACE_COLUMNS}\n");
        for step in &result.steps {
            s.push_str(&format_trace(&step.trace, Some(step.index)));
        }
        fs::write(p, s)?;
    }
    for step in &result.steps {
        if let Some(m) = &step.message {
            eprintln!("step {}: {m}", step.index);
        }
    }
    Ok(if result.all_converged() { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn format_report(r: &OdometryResult) -> String {
    let mut s = String::from("index,status,iterations,total_cost,tx,ty,tz,yaw_deg\n");
    for st in &r.steps {
        let t = st.estimate.translation;
        let _ = writeln!(
            s,
            "{},{},{},{:e},{:e},{:e},{:e},{:e}",
            st.index,
            st.status,
            st.iterations,
            st.total_cost,
            t.x,
            t.y,
            t.z,
            st.estimate.rotation.yaw().to_degrees()
        );
    }
    s
}

impl SimulateArgs {
    fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            kind: self.scene,
            density: self.density,
            extent: self.extent,
            seed: derive_seed(self.seed, 0),
        }
    }

    fn start(&self) -> RigidTransform {
        RigidTransform::new(
            Rotation::from_yaw(self.start_yaw_deg.to_radians()),
            Vector3::new(self.start_x, self.start_y, self.start_z),
        )
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let scene_spec = a.scene_spec();
    let poses = arc_trajectory(&a.start(), a.steps, a.step_length, a.yaw_rate_deg.to_radians());
    let noise = NoisySensorSpec {
        gnss_sigma: Vector3::repeat(a.gnss_sigma),
        imu_rot_sigma: Vector3::repeat(a.imu_sigma),
        outlier_prob: a.outlier_prob,
        outlier_magnitude: a.outlier_magnitude,
        seed: derive_seed(a.seed, 2),
    };
    let scan_spec = ScanSpec {
        subsample: a.subsample,
        crop_radius: a.crop_radius,
        resample_surface: a.resample_surface,
        seed: derive_seed(a.seed, 1),
    };
    let seq = simulate_sequence(&scene_spec, &poses, &scan_spec, &noise)?;
    let scan_dir = a.output.join("scans");
    fs::create_dir_all(&scan_dir)?;
    let ext = match a.format {
        CloudFormat::Ascii => "xyz",
        CloudFormat::Binary => "xyzb",
    };
    for (k, scan) in seq.scans.iter().enumerate() {
        io::write_point_cloud(scan, scan_dir.join(format!("{k:06}.{ext}")), a.format)?;
    }
    io::write_point_cloud(&seq.scene, a.output.join("scene.xyz"), CloudFormat::Ascii)?;
    fs::write(a.output.join("truth.txt"), io::encode_poses_kitti(&seq.truth))?;
    let records: Vec<PriorRecord> = seq
        .priors
        .iter()
        .enumerate()
        .map(|(index, d)| PriorRecord {
            index,
            translation: d.translation,
            rotation: d.rotation,
        })
        .collect();
    io::write_priors(&records, a.output.join("priors.csv"))?;
    Ok(EXIT_OK)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<i32> {
    let est = io::read_poses_kitti(&a.estimate)?;
    let gt = io::read_poses_kitti(&a.truth)?;
    let m = kitti_metrics(&est, &gt, &a.segments)?;
    let text = format_metrics(&m);
    match &a.output {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    if let Some(p) = &a.segments_csv {
        fs::write(p, format_segments(&m))?;
    }
    Ok(EXIT_OK)
}

pub fn format_metrics(m: &TrajectoryMetrics) -> String {
    format!(
        "translation_error_percent = {:e}\nrotation_error_deg_per_100m = {:e}\nsegments = {}\n",
        m.translation_error_percent,
        m.rotation_error_deg_per_100m,
        m.per_segment.len()
    )
}

fn format_segments(m: &TrajectoryMetrics) -> String {
    let mut s = String::from("start,length,t_err_percent,r_err_deg_per_m\n");
    for seg in &m.per_segment {
        let _ = writeln!(s, "{},{:e},{:e},{:e}", seg.start, seg.length, seg.t_err, seg.r_err);
    }
    s
}
