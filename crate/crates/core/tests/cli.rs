use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::Vector3;
use penalized_icp::cli::parse_result_pose;
use penalized_icp::io::{self, CloudFormat};
use penalized_icp::lie::{RigidTransform, Rotation};
use penalized_icp::pointcloud::PointCloud;
use penalized_icp::sim::{generate_scene, SceneKind, SceneSpec};

fn picp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_picp"))
        .args(args)
        .output()
        .expect("run picp")
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn room(density: f64) -> PointCloud {
    generate_scene(&SceneSpec {
        kind: SceneKind::StructuredRoom,
        density,
        extent: 10.0,
        seed: 3,
    })
    .unwrap()
}

fn write_cloud(dir: &Path, name: &str, cloud: &PointCloud) -> PathBuf {
    let p = dir.join(name);
    io::write_point_cloud(cloud, &p, CloudFormat::from_path(&p)).unwrap();
    p
}

#[test]
fn help_documents_every_flag_and_exits_zero() {
    let out = picp(&["register", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--scan", "--map", "--config", "--priors", "--prior-index", "--output", "--set", "--trace"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    let out = picp(&["odometry", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--scans", "--priors", "--require-priors", "--map-window", "--output", "--report", "--trace"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn unknown_flag_exits_one_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sim");
    let out = picp(&["simulate", "--output", &s(&out_dir), "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
}

#[test]
fn identical_clouds_register_to_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = write_cloud(dir.path(), "room.xyzb", &room(20.0));
    let result = dir.path().join("result.txt");
    let trace = dir.path().join("trace.csv");
    let out = picp(&[
        "register", "--scan", &s(&cloud), "--map", &s(&cloud), "--output", &s(&result), "--trace", &s(&trace),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&result).unwrap();
    let pose = parse_result_pose(&text).unwrap();
    assert!(pose.translation.norm() <= 1e-9);
    assert!(pose.rotation.angle() <= 1e-9);
    for key in ["converged = true", "iterations", "point_term", "gnss_term", "lie_term", "total_cost"] {
        assert!(text.contains(key), "{key}");
    }
    assert!(fs::read_to_string(&trace).unwrap().starts_with("iteration,cost,"));
}

#[test]
fn gated_out_clouds_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let map = room(10.0);
    let far = map.transformed(&RigidTransform::from_translation(Vector3::new(100.0, 0.0, 0.0)));
    let a = write_cloud(dir.path(), "map.xyz", &map);
    let b = write_cloud(dir.path(), "scan.xyz", &far);
    let out = picp(&["register", "--scan", &s(&b), "--map", &s(&a)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no correspondences"));
}

#[test]
fn config_file_and_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let map = room(10.0);
    let offset = RigidTransform::new(Rotation::from_yaw(0.05), Vector3::new(0.2, 0.0, 0.0));
    let map_path = write_cloud(dir.path(), "room.xyz", &map);
    let scan_path = write_cloud(dir.path(), "scan.xyz", &map.transformed(&offset));
    let (map_path, scan_path) = (s(&map_path), s(&scan_path));
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "# solver\nmax_iterations = 1\nmax_correspondence_distance = 1.0\n").unwrap();
    let run = |extra: &[&str]| {
        let mut args = vec!["register", "--scan", &scan_path, "--map", &map_path, "--config", cfg.to_str().unwrap()];
        args.extend(extra);
        picp(&args).status.code()
    };
    // One iteration from an offset start cannot meet the step tolerances.
    assert_eq!(run(&[]), Some(2));
    assert_eq!(run(&["--set", "max_iterations=60"]), Some(0));
    assert_eq!(run(&["--set", "max_iterations=0"]), Some(1));
    fs::write(&cfg, "alpha = 3\n").unwrap();
    assert_eq!(run(&[]), Some(1));
}

fn simulate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--output", dir.to_str().unwrap()];
    args.extend(extra);
    picp(&args)
}

#[test]
fn simulated_pair_registers_to_truth() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let out = simulate(&sim, &["--extent", "12", "--density", "30", "--steps", "1", "--step-length", "0.4", "--yaw-rate-deg", "3", "--seed", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let result = dir.path().join("r.txt");
    let out = picp(&[
        "register", "--scan", &s(&sim.join("scans/000001.xyz")), "--map", &s(&sim.join("scans/000000.xyz")),
        "--output", &s(&result), "--set", "max_correspondence_distance=1.0",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let pose = parse_result_pose(&fs::read_to_string(&result).unwrap()).unwrap();
    let truth = io::read_poses_kitti(sim.join("truth.txt")).unwrap().poses[1];
    // Scans are the same surface sample seen from two poses, so recovery is tight.
    assert!((pose.translation - truth.translation).norm() <= 1e-3);
    assert!(pose.rotation.compose(&truth.rotation.inverse()).angle() <= 0.1f64.to_radians());
}

#[test]
fn simulate_is_byte_identical_and_noise_free_priors_match_truth() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--extent", "10", "--density", "10", "--steps", "3", "--seed", "5", "--format", "binary"];
    assert_eq!(simulate(a.path(), &args).status.code(), Some(0));
    assert_eq!(simulate(b.path(), &args).status.code(), Some(0));
    for f in ["truth.txt", "priors.csv", "scene.xyz", "scans/000000.xyzb", "scans/000003.xyzb"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let truth = io::read_poses_kitti(a.path().join("truth.txt")).unwrap();
    let priors = io::read_priors(a.path().join("priors.csv")).unwrap();
    assert_eq!(priors.len(), truth.len());
    for (p, t) in priors.iter().zip(&truth.poses) {
        assert!((p.translation.t_s - t.translation).norm() <= 1e-12);
        assert!((p.rotation.c_s.matrix() - t.rotation.matrix()).norm() <= 1e-12);
    }
}

#[test]
fn emitted_cylinder_passes_radius_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(dir.path(), &["--scene", "rotationally_ambiguous_cylinder", "--extent", "8", "--density", "5", "--steps", "0"]);
    assert_eq!(out.status.code(), Some(0));
    let scene = io::read_point_cloud(dir.path().join("scene.xyz")).unwrap();
    for p in &scene.points {
        // Radius 4; the ASCII writer keeps 9 significant digits.
        assert!(((p.x * p.x + p.y * p.y).sqrt() - 4.0).abs() <= 1e-7);
        assert!(p.z >= -1e-8 && p.z <= 2.4 + 1e-7);
    }
}

#[test]
fn odometry_recovers_straight_line() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let out = simulate(&sim, &["--extent", "12", "--density", "25", "--steps", "4", "--step-length", "0.3", "--seed", "6"]);
    assert_eq!(out.status.code(), Some(0));
    let traj = dir.path().join("odom.txt");
    let report = dir.path().join("report.csv");
    let out = picp(&[
        "odometry", "--scans", &s(&sim.join("scans")), "--output", &s(&traj), "--report", &s(&report),
        "--set", "max_correspondence_distance=1.0",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let est = io::read_poses_kitti(&traj).unwrap();
    let truth = io::read_poses_kitti(sim.join("truth.txt")).unwrap();
    assert_eq!(est.len(), 5);
    for (e, t) in est.poses.iter().zip(&truth.poses) {
        assert!((e.translation - t.translation).norm() <= 1e-3);
        assert!(e.translation.y.abs() <= 1e-3 && e.translation.z.abs() <= 1e-3);
    }
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 5);

    let metrics = dir.path().join("metrics.txt");
    let out = picp(&[
        "evaluate", "--estimate", &s(&traj), "--truth", &s(&sim.join("truth.txt")), "--segments", "0.5,1",
        "--output", &s(&metrics),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(fs::read_to_string(&metrics).unwrap().contains("translation_error_percent"));
}

#[test]
fn single_scan_odometry_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let scans = dir.path().join("scans");
    fs::create_dir(&scans).unwrap();
    write_cloud(&scans, "000000.xyz", &room(5.0));
    let traj = dir.path().join("odom.txt");
    let out = picp(&["odometry", "--scans", &s(&scans), "--output", &s(&traj)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&traj).unwrap().trim(), io::encode_poses_kitti(&[RigidTransform::identity()]).trim());
}

#[test]
fn missing_priors_with_require_priors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let scans = dir.path().join("scans");
    fs::create_dir(&scans).unwrap();
    write_cloud(&scans, "000000.xyz", &room(5.0));
    let traj = dir.path().join("odom.txt");
    let out = picp(&["odometry", "--scans", &s(&scans), "--output", &s(&traj), "--require-priors"]);
    assert_eq!(out.status.code(), Some(1));
    let out = picp(&[
        "odometry", "--scans", &s(&scans), "--output", &s(&traj), "--require-priors", "--priors",
        &s(&dir.path().join("missing.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!traj.exists());
}

#[test]
fn evaluate_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let line = |scale: f64| -> Vec<RigidTransform> {
        (0..1001)
            .map(|i| RigidTransform::from_translation(Vector3::new(scale * i as f64, 0.0, 0.0)))
            .collect()
    };
    let gt = dir.path().join("gt.txt");
    let est = dir.path().join("est.txt");
    fs::write(&gt, io::encode_poses_kitti(&line(1.0))).unwrap();
    fs::write(&est, io::encode_poses_kitti(&line(1.01))).unwrap();
    let read = |args: &[&str]| {
        let out = picp(args);
        assert_eq!(out.status.code(), Some(0));
        let kv = io::parse_key_values(&String::from_utf8_lossy(&out.stdout)).unwrap();
        let get = |k: &str| kv.iter().find(|(a, _)| a == k).unwrap().1.parse::<f64>().unwrap();
        (get("translation_error_percent"), get("rotation_error_deg_per_100m"))
    };
    assert_eq!(read(&["evaluate", "--estimate", &s(&gt), "--truth", &s(&gt)]), (0.0, 0.0));
    let (t, r) = read(&["evaluate", "--estimate", &s(&est), "--truth", &s(&gt), "--segments", "100"]);
    assert!((t - 1.0).abs() <= 1e-9);
    assert!(r.abs() <= 1e-12);

    let csv = dir.path().join("segments.csv");
    let out = picp(&[
        "evaluate", "--estimate", &s(&est), "--truth", &s(&gt), "--segments", "100,200", "--segments-csv", &s(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let rows = fs::read_to_string(&csv).unwrap().lines().count();
    // Starts 0..=900 admit 100 m, starts 0..=800 admit 200 m.
    assert_eq!(rows, 1 + 900 + 800);
}

#[test]
fn evaluate_rejects_short_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    let poses: Vec<_> = (0..5)
        .map(|i| RigidTransform::new(Rotation::identity(), Vector3::new(i as f64, 0.0, 0.0)))
        .collect();
    fs::write(&gt, io::encode_poses_kitti(&poses)).unwrap();
    let out = picp(&["evaluate", "--estimate", &s(&gt), "--truth", &s(&gt)]);
    assert_eq!(out.status.code(), Some(1));
}
