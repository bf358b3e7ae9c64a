//! File formats for clouds, poses, priors, and key-value records.
//!
//! * ASCII XYZ: one `x y z` per line, 9 significant digits on write.
//! * Binary XYZ: 16-byte header (`b"XYZB"`, `u32` LE count, `u64` reserved = 0)
//!   followed by `count` little-endian `f32` triples.
//! * KITTI poses: 12 space-separated reals per line, row-major `[R | t]`.
//! * Priors: CSV with a header row; see [`PRIOR_HEADER`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::lie::{RigidTransform, Rotation};
use crate::penalties::{Priors, RotationPrior, TranslationPrior};
use crate::sim::COVARIANCE_FLOOR;

pub const BINARY_MAGIC: &[u8; 4] = b"XYZB";
pub const BINARY_HEADER_LEN: usize = 16;

/// Rotations read from text are accepted within this tolerance, then re-orthonormalized.
pub const PARSE_ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Ascii,
    Binary,
}

impl CloudFormat {
    /// `.xyzb` and `.bin` are binary, everything else ASCII.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("xyzb") | Some("bin") => Self::Binary,
            _ => Self::Ascii,
        }
    }
}

impl std::str::FromStr for CloudFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascii" | "xyz" => Ok(Self::Ascii),
            "binary" | "xyzb" => Ok(Self::Binary),
            other => Err(Error::InvalidArgument(format!("unknown cloud format '{other}'"))),
        }
    }
}

/// Reads ASCII or binary XYZ, detected by the binary magic.
pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<crate::pointcloud::PointCloud> {
    let bytes = fs::read(path)?;
    parse_point_cloud(&bytes)
}

pub fn parse_point_cloud(bytes: &[u8]) -> Result<crate::pointcloud::PointCloud> {
    let points = if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(bytes)?
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| {
            Error::malformed_byte(e.valid_up_to(), "not valid UTF-8 text")
        })?;
        parse_ascii(text)?
    };
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(crate::pointcloud::PointCloud::new(points))
}

fn parse_ascii(text: &str) -> Result<Vec<Vector3<f64>>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = parse_reals(line, i + 1)?;
        if vals.len() != 3 {
            return Err(Error::malformed_line(
                i + 1,
                format!("expected 3 values, found {}", vals.len()),
            ));
        }
        points.push(Vector3::new(vals[0], vals[1], vals[2]));
    }
    Ok(points)
}

fn parse_binary(bytes: &[u8]) -> Result<Vec<Vector3<f64>>> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(Error::malformed_byte(bytes.len(), "truncated header"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = BINARY_HEADER_LEN + 12 * count;
    if bytes.len() != expected {
        return Err(Error::malformed_byte(
            bytes.len().min(expected),
            format!("header declares {count} points ({expected} bytes), file has {} bytes", bytes.len()),
        ));
    }
    let mut points = Vec::with_capacity(count);
    for (i, chunk) in bytes[BINARY_HEADER_LEN..].chunks_exact(12).enumerate() {
        let f = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        let p = Vector3::new(f(0) as f64, f(1) as f64, f(2) as f64);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::malformed_byte(
                BINARY_HEADER_LEN + 12 * i,
                "non-finite coordinate",
            ));
        }
        points.push(p);
    }
    Ok(points)
}

pub fn write_point_cloud(
    cloud: &crate::pointcloud::PointCloud,
    path: impl AsRef<Path>,
    format: CloudFormat,
) -> Result<()> {
    fs::write(path, encode_point_cloud(cloud, format)?)?;
    Ok(())
}

pub fn encode_point_cloud(cloud: &crate::pointcloud::PointCloud, format: CloudFormat) -> Result<Vec<u8>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    match format {
        CloudFormat::Ascii => {
            let mut s = String::with_capacity(cloud.len() * 48);
            for p in &cloud.points {
                let _ = writeln!(s, "{} {} {}", sig9(p.x), sig9(p.y), sig9(p.z));
            }
            Ok(s.into_bytes())
        }
        CloudFormat::Binary => {
            let count = u32::try_from(cloud.len())
                .map_err(|_| Error::InvalidArgument("cloud too large for binary format".into()))?;
            let mut out = Vec::with_capacity(BINARY_HEADER_LEN + 12 * cloud.len());
            out.extend_from_slice(BINARY_MAGIC);
            out.extend_from_slice(&count.to_le_bytes());
            out.extend_from_slice(&0u64.to_le_bytes());
            for p in &cloud.points {
                for v in p.iter() {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            Ok(out)
        }
    }
}

/// Nine significant digits, scientific notation.
fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

fn parse_reals(line: &str, line_no: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::malformed_line(line_no, format!("invalid number '{tok}'")))
        })
        .collect()
}

pub fn read_poses_kitti(path: impl AsRef<Path>) -> Result<Trajectory> {
    parse_poses_kitti(&fs::read_to_string(path)?)
}

pub fn parse_poses_kitti(text: &str) -> Result<Trajectory> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals = parse_reals(line, i + 1)?;
        let arr: [f64; 12] = vals.as_slice().try_into().map_err(|_| {
            Error::malformed_line(i + 1, format!("expected 12 values, found {}", vals.len()))
        })?;
        let pose = RigidTransform::from_row_major(&arr, PARSE_ROTATION_TOLERANCE)
            .map_err(|e| Error::malformed_line(i + 1, e.to_string()))?;
        poses.push(pose);
    }
    Ok(Trajectory::from_poses(poses))
}

pub fn write_poses_kitti(trajectory: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_poses_kitti(&trajectory.poses))?;
    Ok(())
}

pub fn encode_poses_kitti(poses: &[RigidTransform]) -> String {
    let mut s = String::new();
    for p in poses {
        let _ = writeln!(s, "{}", format_reals(&p.to_row_major()));
    }
    s
}

/// Shortest round-trip decimal representation, space separated.
pub fn format_reals(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

/// Header of the diagonal-covariance prior CSV.
pub const PRIOR_HEADER: &str =
    "index,tx,ty,tz,r00,r01,r02,r10,r11,r12,r20,r21,r22,st_x,st_y,st_z,se_x,se_y,se_z";

/// Header of the full-covariance variant: upper triangles `xx,xy,xz,yy,yz,zz`.
pub const PRIOR_HEADER_FULL: &str = "index,tx,ty,tz,r00,r01,r02,r10,r11,r12,r20,r21,r22,\
st_xx,st_xy,st_xz,st_yy,st_yz,st_zz,se_xx,se_xy,se_xz,se_yy,se_yz,se_zz";

/// One row of the priors file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorRecord {
    pub index: usize,
    pub translation: TranslationPrior,
    pub rotation: RotationPrior,
}

impl PriorRecord {
    pub fn priors(&self) -> Priors {
        Priors {
            translation: Some(self.translation),
            rotation: Some(self.rotation),
        }
    }
}

pub fn read_priors(path: impl AsRef<Path>) -> Result<Vec<PriorRecord>> {
    parse_priors(&fs::read_to_string(path)?)
}

pub fn parse_priors(text: &str) -> Result<Vec<PriorRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::malformed_line(1, "missing header"))?;
    let header: String = header.split(',').map(str::trim).collect::<Vec<_>>().join(",");
    let full = if header == PRIOR_HEADER {
        false
    } else if header == PRIOR_HEADER_FULL {
        true
    } else {
        return Err(Error::malformed_line(1, "unrecognized prior header"));
    };
    let width = if full { 25 } else { 19 };
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width {
            return Err(Error::malformed_line(
                n,
                format!("expected {width} fields, found {}", fields.len()),
            ));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| Error::malformed_line(n, format!("invalid index '{}'", fields[0])))?;
        let vals = fields[1..]
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::malformed_line(n, format!("invalid number '{t}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let t_s = Vector3::new(vals[0], vals[1], vals[2]);
        let r = Matrix3::from_row_slice(&vals[3..12]);
        let c_s = Rotation::from_matrix_with_tolerance(r, PARSE_ROTATION_TOLERANCE)
            .map_err(|e| Error::malformed_line(n, e.to_string()))?;
        let (sigma_t, sigma_eps) = if full {
            (upper_to_matrix(&vals[12..18], n)?, upper_to_matrix(&vals[18..24], n)?)
        } else {
            (diag_to_matrix(&vals[12..15], n)?, diag_to_matrix(&vals[15..18], n)?)
        };
        let invalid = |e: Error| Error::InvalidCovariance {
            line: n,
            reason: e.to_string(),
        };
        out.push(PriorRecord {
            index,
            translation: TranslationPrior::new(t_s, sigma_t).map_err(invalid)?,
            rotation: RotationPrior::new(c_s, sigma_eps).map_err(invalid)?,
        });
    }
    Ok(out)
}

fn diag_to_matrix(v: &[f64], line: usize) -> Result<Matrix3<f64>> {
    if v.iter().any(|x| *x < 0.0) {
        return Err(Error::InvalidCovariance {
            line,
            reason: "negative variance".into(),
        });
    }
    Ok(Matrix3::from_diagonal(&Vector3::new(
        v[0].max(COVARIANCE_FLOOR),
        v[1].max(COVARIANCE_FLOOR),
        v[2].max(COVARIANCE_FLOOR),
    )))
}

fn upper_to_matrix(v: &[f64], line: usize) -> Result<Matrix3<f64>> {
    let mut m = Matrix3::new(v[0], v[1], v[2], v[1], v[3], v[4], v[2], v[4], v[5]);
    if m.diagonal().iter().any(|x| *x < 0.0) {
        return Err(Error::InvalidCovariance {
            line,
            reason: "negative variance".into(),
        });
    }
    for k in 0..3 {
        m[(k, k)] = m[(k, k)].max(COVARIANCE_FLOOR);
    }
    Ok(m)
}

pub fn write_priors(records: &[PriorRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_priors(records))?;
    Ok(())
}

/// Diagonal layout when every covariance is diagonal, full layout otherwise.
pub fn encode_priors(records: &[PriorRecord]) -> String {
    let is_diag = |m: &Matrix3<f64>| (0..3).all(|i| (0..3).all(|j| i == j || m[(i, j)] == 0.0));
    let full = records
        .iter()
        .any(|r| !is_diag(&r.translation.sigma_t) || !is_diag(&r.rotation.sigma_eps));
    let mut s = String::new();
    s.push_str(if full { PRIOR_HEADER_FULL } else { PRIOR_HEADER });
    s.push('\n');
    for r in records {
        let mut vals: Vec<f64> = r.translation.t_s.iter().copied().collect();
        let c = r.rotation.c_s.matrix();
        for i in 0..3 {
            for j in 0..3 {
                vals.push(c[(i, j)]);
            }
        }
        for m in [&r.translation.sigma_t, &r.rotation.sigma_eps] {
            if full {
                vals.extend([m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]);
            } else {
                vals.extend([m[(0, 0)], m[(1, 1)], m[(2, 2)]]);
            }
        }
        let body: Vec<String> = vals.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{},{}", r.index, body.join(","));
    }
    s
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::malformed_line(i + 1, "expected 'key = value'"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
