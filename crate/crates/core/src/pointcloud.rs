//! Point clouds, an exact k-d tree, and neighborhood covariances.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lie::RigidTransform;

/// Defaults for the neighborhood-PCA covariance.
pub const DEFAULT_COVARIANCE_K: usize = 20;
pub const DEFAULT_FLATTEN_RATIO: f64 = 1e-3;

/// Absolute eigenvalue floor so fully coincident neighborhoods stay invertible.
pub const MIN_COVARIANCE_EIGENVALUE: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub covariances: Option<Vec<Matrix3<f64>>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    /// Sensor position in the cloud's own frame, used to orient normals.
    pub sensor_origin: Option<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .points
            .iter()
            .any(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        if let Some(covs) = &self.covariances {
            if covs.len() != self.points.len() {
                return Err(Error::InvalidArgument(
                    "covariance count does not match point count".into(),
                ));
            }
            for c in covs {
                if (c - c.transpose()).norm() > 1e-9 {
                    return Err(Error::SingularCovariance);
                }
                if c.symmetric_eigenvalues().min() < -1e-12 {
                    return Err(Error::SingularCovariance);
                }
            }
        }
        if let Some(n) = &self.normals {
            if n.len() != self.points.len() {
                return Err(Error::InvalidArgument(
                    "normal count does not match point count".into(),
                ));
            }
        }
        Ok(())
    }

    /// Applies `pose` to points, covariances, normals and the sensor origin.
    pub fn transformed(&self, pose: &RigidTransform) -> PointCloud {
        let r = pose.rotation.matrix();
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            covariances: self
                .covariances
                .as_ref()
                .map(|c| c.iter().map(|m| r * m * r.transpose()).collect()),
            normals: self
                .normals
                .as_ref()
                .map(|n| n.iter().map(|v| r * v).collect()),
            sensor_origin: self.sensor_origin.map(|o| pose.transform_point(&o)),
        }
    }

    /// Concatenates point sets. Per-point attributes survive only if every part has them.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a PointCloud>) -> PointCloud {
        let parts: Vec<&PointCloud> = parts.into_iter().collect();
        let points = parts.iter().flat_map(|c| c.points.iter().copied()).collect();
        let covariances = parts
            .iter()
            .map(|c| c.covariances.as_ref())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.into_iter().flatten().copied().collect());
        let normals = parts
            .iter()
            .map(|c| c.normals.as_ref())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.into_iter().flatten().copied().collect());
        PointCloud {
            points,
            covariances,
            normals,
            sensor_origin: None,
        }
    }

    /// Keeps each point independently with probability `keep`.
    pub fn decimate(&self, keep: f64, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<bool> = self
            .points
            .iter()
            .map(|_| keep >= 1.0 || rng.random::<f64>() < keep)
            .collect();
        self.select(|i| mask[i])
    }

    pub fn select(&self, keep: impl Fn(usize) -> bool) -> PointCloud {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            covariances: self
                .covariances
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i]).collect()),
            normals: self
                .normals
                .as_ref()
                .map(|n| idx.iter().map(|&i| n[i]).collect()),
            sensor_origin: self.sensor_origin,
        }
    }
}

/// Exact k-nearest-neighbor index.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

/// Heap entry ordered by (squared distance, id).
#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        Self::from_points(cloud.points.clone())
    }

    pub fn from_points(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        let n = points.len();
        build_node(&points, &mut order, 0, n, &mut nodes);
        Ok(Self {
            points,
            order,
            nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: usize) -> &Vector3<f64> {
        &self.points[id]
    }

    /// The `k` nearest points, ascending by distance, ties broken by lower id.
    pub fn nearest(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let k = k.min(self.points.len());
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                id: c.id,
                distance: c.dist2.sqrt(),
            })
            .collect()
    }

    pub fn nearest_one(&self, query: &Vector3<f64>) -> Neighbor {
        self.nearest(query, 1)[0]
    }

    fn search(
        &self,
        node: usize,
        query: &Vector3<f64>,
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    let cand = Candidate {
                        dist2: (self.points[id] - query).norm_squared(),
                        id,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("non-empty heap") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, query, k, heap);
                // Equal distances must still be visited so id tie-breaks stay exact.
                if heap.len() < k || diff * diff <= heap.peek().expect("non-empty heap").dist2 {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}

fn build_node(
    points: &[Vector3<f64>],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let slot = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return slot;
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in &order[start..end] {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let dim = (hi - lo).imax();
    if hi[dim] - lo[dim] <= 0.0 {
        // All points coincide.
        nodes.push(Node::Leaf { start, end });
        return slot;
    }
    let mid = (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid, |&a, &b| {
        points[a][dim]
            .total_cmp(&points[b][dim])
            .then(a.cmp(&b))
    });
    let value = points[order[start + mid]][dim];
    nodes.push(Node::Leaf { start, end });
    // Left holds coordinates <= value, right holds >= value.
    let left = build_node(points, order, start, start + mid, nodes);
    let right = build_node(points, order, start + mid, end, nodes);
    nodes[slot] = Node::Split {
        dim,
        value,
        left,
        right,
    };
    slot
}

/// Median distance from each point to its nearest other point.
pub fn median_spacing(index: &SpatialIndex) -> f64 {
    if index.len() < 2 {
        return 0.0;
    }
    let mut d: Vec<f64> = (0..index.len())
        .into_par_iter()
        .map(|i| index.nearest(index.point(i), 2)[1].distance)
        .collect();
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Attaches regularized neighborhood covariances and normals to a copy of `cloud`.
///
/// Each covariance is the sample covariance of the point's `k` nearest
/// neighbors (itself included). Every eigenvalue is raised to at least
/// `flatten_ratio` times the largest one, which bounds the condition number by
/// `1 / flatten_ratio`. The normal is the eigenvector of the smallest raw
/// eigenvalue.
pub fn estimate_covariances(cloud: &PointCloud, k: usize, flatten_ratio: f64) -> Result<PointCloud> {
    if k < 4 {
        return Err(Error::InvalidArgument(format!(
            "covariance neighborhood k = {k} must be at least 4"
        )));
    }
    if !(flatten_ratio > 0.0 && flatten_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "flatten_ratio {flatten_ratio} must be in (0, 1]"
        )));
    }
    if cloud.len() <= k {
        return Err(Error::TooFewPoints {
            needed: k,
            got: cloud.len(),
        });
    }
    let index = SpatialIndex::build(cloud)?;
    let (covariances, normals): (Vec<_>, Vec<_>) = cloud
        .points
        .par_iter()
        .map(|p| {
            let nbrs = index.nearest(p, k);
            let mean = nbrs
                .iter()
                .fold(Vector3::zeros(), |acc, n| acc + index.point(n.id))
                / k as f64;
            let mut cov = Matrix3::zeros();
            for n in &nbrs {
                let d = index.point(n.id) - mean;
                cov += d * d.transpose();
            }
            cov /= (k - 1) as f64;
            let (cov, normal) = regularize(&cov, flatten_ratio);
            (cov, orient_normal(normal, p, cloud.sensor_origin.as_ref()))
        })
        .unzip();
    Ok(PointCloud {
        points: cloud.points.clone(),
        covariances: Some(covariances),
        normals: Some(normals),
        sensor_origin: cloud.sensor_origin,
    })
}

fn regularize(cov: &Matrix3<f64>, flatten_ratio: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let eig = SymmetricEigen::new(*cov);
    let imin = eig.eigenvalues.imin();
    let normal = eig.eigenvectors.column(imin).into_owned();
    let largest = eig.eigenvalues.max().max(0.0);
    let floor = (flatten_ratio * largest).max(MIN_COVARIANCE_EIGENVALUE);
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    let out = v * Matrix3::from_diagonal(&clamped) * v.transpose();
    (0.5 * (out + out.transpose()), normal)
}

fn orient_normal(n: Vector3<f64>, p: &Vector3<f64>, origin: Option<&Vector3<f64>>) -> Vector3<f64> {
    let n = n.normalize();
    let flip = match origin {
        Some(o) => n.dot(&(o - p)) < 0.0,
        None => n[n.iamax()] < 0.0,
    };
    if flip {
        -n
    } else {
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                    )
                })
                .collect(),
        )
    }

    fn linear_scan(points: &[Vector3<f64>], q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - q).norm_squared(), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(d, i)| (i, d.sqrt())).collect()
    }

    fn as_pairs(v: &[Neighbor]) -> Vec<(usize, f64)> {
        v.iter().map(|n| (n.id, n.distance)).collect()
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(matches!(
            SpatialIndex::build(&PointCloud::default()),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn single_point_index() {
        let idx = SpatialIndex::build(&PointCloud::new(vec![Vector3::new(1.0, 2.0, 3.0)])).unwrap();
        for q in [Vector3::zeros(), Vector3::new(-9.0, 4.0, 1e6)] {
            let n = idx.nearest(&q, 3);
            assert_eq!(n.len(), 1);
            assert_eq!(n[0].id, 0);
        }
    }

    #[test]
    fn grid_query_hits_grid_point() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..5 {
                    pts.push(Vector3::new(i as f64, j as f64, k as f64));
                }
            }
        }
        let idx = SpatialIndex::build(&PointCloud::new(pts.clone())).unwrap();
        let target = 4 * 50 + 7 * 5 + 2;
        let n = idx.nearest(&pts[target], 1);
        assert_eq!(n[0], Neighbor { id: target, distance: 0.0 });
        // Ties at equal distance resolve to the lower id.
        let q = Vector3::new(4.5, 7.0, 2.0);
        assert_eq!(as_pairs(&idx.nearest(&q, 2)), linear_scan(&pts, &q, 2));
    }

    #[test]
    fn matches_linear_scan_on_random_cloud() {
        let cloud = random_cloud(1000, 7);
        let idx = SpatialIndex::build(&cloud).unwrap();
        let queries = random_cloud(50, 8);
        for q in &queries.points {
            assert_eq!(as_pairs(&idx.nearest(q, 1)), linear_scan(&cloud.points, q, 1));
            assert_eq!(as_pairs(&idx.nearest(q, 5)), linear_scan(&cloud.points, q, 5));
        }
        let all = idx.nearest(&queries.points[0], cloud.len());
        assert_eq!(as_pairs(&all), linear_scan(&cloud.points, &queries.points[0], 1000));
    }

    #[test]
    fn planar_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..2000)
            .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0))
            .collect();
        let out = estimate_covariances(&PointCloud::new(pts), 20, 1e-3).unwrap();
        for (c, n) in out.covariances.unwrap().iter().zip(out.normals.unwrap()) {
            assert!(n.cross(&Vector3::z()).norm() <= 1e-6);
            let eig = SymmetricEigen::new(*c);
            let v = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
            assert!(v.cross(&Vector3::z()).norm() <= 1e-6);
        }
    }

    #[test]
    fn isotropic_blob_is_not_flattened() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<_> = (0..10_000)
            .map(|_| {
                Vector3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                )
            })
            .collect();
        let out = estimate_covariances(&PointCloud::new(pts), 50, 1e-3).unwrap();
        let covs = out.covariances.unwrap();
        let mean_ratio = covs
            .iter()
            .map(|c| {
                let e = c.symmetric_eigenvalues();
                e.min() / e.max()
            })
            .sum::<f64>()
            / covs.len() as f64;
        assert!(mean_ratio >= 0.5, "mean anisotropy ratio {mean_ratio}");
    }

    #[test]
    fn coincident_neighborhood_stays_finite() {
        let mut pts = vec![Vector3::new(1.0, 1.0, 1.0); 30];
        pts.push(Vector3::new(5.0, 5.0, 5.0));
        let out = estimate_covariances(&PointCloud::new(pts), 10, 1e-3).unwrap();
        let c = out.covariances.unwrap()[0];
        assert!(c.iter().all(|v| v.is_finite()));
        assert_eq!(c, Matrix3::identity() * MIN_COVARIANCE_EIGENVALUE);
        assert!(c.cholesky().is_some());
    }

    #[test]
    fn too_few_points() {
        let cloud = random_cloud(10, 1);
        assert!(matches!(
            estimate_covariances(&cloud, 10, 1e-3),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn normals_face_sensor_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cloud = PointCloud::new(
            (0..500)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 2.0))
                .collect(),
        );
        cloud.sensor_origin = Some(Vector3::zeros());
        let out = estimate_covariances(&cloud, 10, 1e-3).unwrap();
        assert!(out.normals.unwrap().iter().all(|n| n.z < -0.999));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn index_is_exact(seed in 0u64..1000, n in 1usize..400, k in 1usize..12) {
            let cloud = random_cloud(n, seed);
            let idx = SpatialIndex::build(&cloud).unwrap();
            let queries = random_cloud(20, seed + 1);
            for q in &queries.points {
                prop_assert_eq!(as_pairs(&idx.nearest(q, k)), linear_scan(&cloud.points, q, k));
            }
        }

        #[test]
        fn covariances_are_spd_and_bounded(seed in 0u64..1000, ratio in 1e-4f64..0.5) {
            let cloud = random_cloud(200, seed);
            let out = estimate_covariances(&cloud, 8, ratio).unwrap();
            for c in out.covariances.unwrap() {
                prop_assert!((c - c.transpose()).norm() <= 1e-12 * c.norm());
                let e = c.symmetric_eigenvalues();
                prop_assert!(e.min() > 0.0);
                prop_assert!(e.max() / e.min() <= (1.0 / ratio) * (1.0 + 1e-9));
            }
        }
    }
}
