//! Geometry kernel: point-cloud representation, normalization, augmentation,
//! spatial indexing, Chamfer distances, rigid registration and mIoU scoring.
//!
//! Everything here is `f64` and immutable after construction; queries and
//! distance evaluations are safe to run concurrently over shared data.

mod augment;
mod chamfer;
mod icp;
mod kdtree;
mod miou;

pub use augment::AugmentationTransform;
pub use chamfer::{chamfer_asym, chamfer_asym_tree, chamfer_sym, chamfer_sym_trees};
pub use icp::{icp_align, IcpResult, RigidTransform, ICP_DEFAULT_MAX_ITERS, ICP_DEFAULT_TOL};
pub use kdtree::{nearest_brute_force, KdTree};
pub use miou::miou;

use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum GeomError {
    #[error("point cloud must contain at least one point")]
    EmptyCloud,
    #[error("degenerate cloud: {0}")]
    DegenerateCloud(&'static str),
    #[error("non-finite coordinate")]
    NonFinitePoint,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for part count {part_count}")]
    LabelOutOfRange { label: u32, part_count: u32 },
    #[error("invalid augmentation parameter: {0}")]
    InvalidAugmentation(&'static str),
}

/// A 3D point in bounding-box-normalized model units.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dist_sq(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn dist(&self, other: &Point3) -> f64 {
        self.dist_sq(other).sqrt()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

/// An ordered, non-empty set of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeomError> {
        if points.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(GeomError::NonFinitePoint);
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3> {
        self.points.iter()
    }

    pub fn to_arrays(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.to_array()).collect()
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bbox(&self) -> (Point3, Point3) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            lo.z = lo.z.min(p.z);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
            hi.z = hi.z.max(p.z);
        }
        (lo, hi)
    }

    /// Recenters the bounding box at the origin and uniformly rescales so its
    /// longest edge has length 2. Aspect ratios are preserved.
    pub fn normalize_bbox(&self) -> Result<PointCloud, GeomError> {
        let (lo, hi) = self.bbox();
        let extent = [hi.x - lo.x, hi.y - lo.y, hi.z - lo.z];
        let longest = extent[0].max(extent[1]).max(extent[2]);
        if longest <= 0.0 {
            return Err(GeomError::DegenerateCloud("all points coincide"));
        }
        let center = Point3::new(
            (lo.x + hi.x) * 0.5,
            (lo.y + hi.y) * 0.5,
            (lo.z + hi.z) * 0.5,
        );
        let s = 2.0 / longest;
        let points = self
            .points
            .iter()
            .map(|p| Point3::new((p.x - center.x) * s, (p.y - center.y) * s, (p.z - center.z) * s))
            .collect();
        Ok(PointCloud { points })
    }

    /// Draws `n` points uniformly with replacement; returns the sampled cloud
    /// and the chosen indices so labels can ride along.
    pub fn resample<R: Rng>(&self, n: usize, rng: &mut R) -> (PointCloud, Vec<usize>) {
        let mut points = Vec::with_capacity(n);
        let mut indices = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.random_range(0..self.points.len());
            indices.push(i);
            points.push(self.points[i]);
        }
        (PointCloud { points }, indices)
    }
}

/// A point cloud with per-point part labels in `[0, part_count)`.
#[derive(Clone, Debug)]
pub struct LabeledPointCloud {
    pub cloud: PointCloud,
    labels: Vec<u32>,
    part_count: u32,
}

impl LabeledPointCloud {
    pub fn new(cloud: PointCloud, labels: Vec<u32>, part_count: u32) -> Result<Self, GeomError> {
        if labels.len() != cloud.len() {
            return Err(GeomError::LengthMismatch {
                expected: cloud.len(),
                got: labels.len(),
            });
        }
        if part_count == 0 {
            return Err(GeomError::LabelOutOfRange { label: 0, part_count });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= part_count) {
            return Err(GeomError::LabelOutOfRange {
                label: bad,
                part_count,
            });
        }
        Ok(LabeledPointCloud {
            cloud,
            labels,
            part_count,
        })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn part_count(&self) -> u32 {
        self.part_count
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// Bounding-box normalization; labels are untouched.
    pub fn normalize_bbox(&self) -> Result<LabeledPointCloud, GeomError> {
        Ok(LabeledPointCloud {
            cloud: self.cloud.normalize_bbox()?,
            labels: self.labels.clone(),
            part_count: self.part_count,
        })
    }

    pub fn resample<R: Rng>(&self, n: usize, rng: &mut R) -> LabeledPointCloud {
        let (cloud, indices) = self.cloud.resample(n, rng);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledPointCloud {
            cloud,
            labels,
            part_count: self.part_count,
        }
    }
}

/// Nearest point of `tree`'s cloud to `q`: `(index, point)`. Ties resolve to
/// the smallest index.
pub fn project(q: Point3, tree: &KdTree) -> (usize, Point3) {
    let (idx, _) = tree.nearest(q);
    (idx, tree.point(idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn cube_corners() -> Vec<Point3> {
        let mut pts = Vec::new();
        for &x in &[-1.0, 1.0] {
            for &y in &[-1.0, 1.0] {
                for &z in &[-1.0, 1.0] {
                    pts.push(Point3::new(x, y, z));
                }
            }
        }
        pts
    }

    #[test]
    fn empty_cloud_rejected() {
        assert!(matches!(PointCloud::new(vec![]), Err(GeomError::EmptyCloud)));
    }

    #[test]
    fn non_finite_rejected() {
        let pts = vec![Point3::new(f64::NAN, 0.0, 0.0)];
        assert!(matches!(PointCloud::new(pts), Err(GeomError::NonFinitePoint)));
    }

    #[test]
    fn normalize_keeps_normalized_cube() {
        let cloud = PointCloud::new(cube_corners()).unwrap();
        let norm = cloud.normalize_bbox().unwrap();
        for (a, b) in cloud.iter().zip(norm.iter()) {
            assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-12);
            assert_abs_diff_eq!(a.y, b.y, epsilon = 1e-12);
            assert_abs_diff_eq!(a.z, b.z, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalize_two_point_segment() {
        let cloud =
            PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(4.0, 0.0, 0.0)]).unwrap();
        let norm = cloud.normalize_bbox().unwrap();
        assert_abs_diff_eq!(norm.points()[0].x, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(norm.points()[1].x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(norm.points()[0].y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn normalize_degenerate_errors() {
        let cloud = PointCloud::new(vec![Point3::new(1.0, 2.0, 3.0); 5]).unwrap();
        assert!(matches!(
            cloud.normalize_bbox(),
            Err(GeomError::DegenerateCloud(_))
        ));
    }

    #[test]
    fn normalize_random_cloud_verified_by_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point3> = (0..100)
            .map(|_| {
                Point3::new(
                    rng.random_range(-3.0..5.0),
                    rng.random_range(0.0..2.0),
                    rng.random_range(-1.0..9.0),
                )
            })
            .collect();
        let norm = PointCloud::new(pts).unwrap().normalize_bbox().unwrap();
        // Independent min/max scan of the output.
        let (lo, hi) = norm.bbox();
        let extents = [hi.x - lo.x, hi.y - lo.y, hi.z - lo.z];
        let longest = extents.iter().cloned().fold(f64::MIN, f64::max);
        assert_abs_diff_eq!(longest, 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!((lo.x + hi.x) * 0.5, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!((lo.y + hi.y) * 0.5, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!((lo.z + hi.z) * 0.5, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn labeled_cloud_validation() {
        let cloud = PointCloud::new(cube_corners()).unwrap();
        assert!(LabeledPointCloud::new(cloud.clone(), vec![0; 8], 1).is_ok());
        assert!(matches!(
            LabeledPointCloud::new(cloud.clone(), vec![0; 7], 1),
            Err(GeomError::LengthMismatch { .. })
        ));
        assert!(matches!(
            LabeledPointCloud::new(cloud, vec![1; 8], 1),
            Err(GeomError::LabelOutOfRange { .. })
        ));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point3> = (0..40)
                .map(|_| Point3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                ))
                .collect();
            let cloud = PointCloud::new(pts).unwrap();
            if let Ok(once) = cloud.normalize_bbox() {
                let twice = once.normalize_bbox().unwrap();
                for (a, b) in once.iter().zip(twice.iter()) {
                    prop_assert!((a.x - b.x).abs() < 1e-9);
                    prop_assert!((a.y - b.y).abs() < 1e-9);
                    prop_assert!((a.z - b.z).abs() < 1e-9);
                }
            }
        }
    }
}
