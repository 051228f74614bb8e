//! Point-to-point iterative closest point with an SVD rigid fit.

use super::{GeomError, KdTree, Point3, PointCloud};
use nalgebra::{Matrix3, Vector3};

pub const ICP_DEFAULT_MAX_ITERS: usize = 50;
pub const ICP_DEFAULT_TOL: f64 = 1e-6;

/// A proper rigid motion: `p ↦ R p + t` with `R` orthonormal, `det R = +1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: Point3::ORIGIN,
        }
    }

    /// Rotation of `theta` about the Z axis followed by a translation.
    pub fn rot_z(theta: f64, translation: Point3) -> Self {
        let (c, s) = (theta.cos(), theta.sin());
        RigidTransform {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        Point3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z + self.translation.x,
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z + self.translation.y,
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z + self.translation.z,
        )
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::new(cloud.iter().map(|p| self.apply(*p)).collect())
            .expect("rigid transform of a valid cloud is valid")
    }

    /// `other` then `self`, as a single transform.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let a = Matrix3::from_row_slice(&flatten(&self.rotation));
        let b = Matrix3::from_row_slice(&flatten(&other.rotation));
        let r = a * b;
        let t = self.apply(other.translation);
        RigidTransform {
            rotation: to_rows(&r),
            translation: t,
        }
    }

    /// Orthonormality and determinant check within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = Matrix3::from_row_slice(&flatten(&self.rotation));
        let eye = r * r.transpose();
        let mut ok = true;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                ok &= (eye[(i, j)] - expect).abs() <= tol;
            }
        }
        ok && (r.determinant() - 1.0).abs() <= tol && self.translation.is_finite()
    }

    /// Frobenius distance between rotation matrices plus translation distance.
    pub fn error_to(&self, other: &RigidTransform) -> f64 {
        let mut frob = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d = self.rotation[i][j] - other.rotation[i][j];
                frob += d * d;
            }
        }
        frob.sqrt() + self.translation.dist(&other.translation)
    }
}

fn flatten(r: &[[f64; 3]; 3]) -> [f64; 9] {
    [
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    ]
}

fn to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

pub struct IcpResult {
    pub transform: RigidTransform,
    pub aligned: PointCloud,
    /// RMS nearest-neighbor residual after each iteration.
    pub rms_history: Vec<f64>,
    pub iterations: usize,
}

/// Best-fit proper rigid transform mapping `src` onto `dst` (paired by index)
/// via the cross-covariance SVD.
fn fit_rigid(src: &[Point3], dst: &[Point3]) -> Result<RigidTransform, GeomError> {
    let n = src.len() as f64;
    let mut sc = Vector3::zeros();
    let mut dc = Vector3::zeros();
    for (s, d) in src.iter().zip(dst) {
        sc += Vector3::new(s.x, s.y, s.z);
        dc += Vector3::new(d.x, d.y, d.z);
    }
    sc /= n;
    dc /= n;

    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let sv = Vector3::new(s.x, s.y, s.z) - sc;
        let dv = Vector3::new(d.x, d.y, d.z) - dc;
        h += sv * dv.transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeomError::DegenerateCloud("rigid fit: SVD failed")),
    };
    // Rank check: a collinear correspondence set cannot pin down a rotation.
    if svd.singular_values[1] <= 1e-12 * svd.singular_values[0].max(1e-300) {
        return Err(GeomError::DegenerateCloud("rigid fit is rank-deficient"));
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let r = v * correction * u.transpose();
    let t = dc - r * sc;
    Ok(RigidTransform {
        rotation: to_rows(&r),
        translation: Point3::new(t[0], t[1], t[2]),
    })
}

/// Point-to-point ICP: iterate nearest-neighbor correspondence over `target`
/// and best-fit rigid alignment, stopping when the RMS residual changes by
/// less than `tol` or after `max_iters` iterations. No trimming or outlier
/// rejection.
pub fn icp_align(
    source: &PointCloud,
    target: &PointCloud,
    max_iters: usize,
    tol: f64,
) -> Result<IcpResult, GeomError> {
    if source.len() < 3 || target.len() < 3 {
        return Err(GeomError::DegenerateCloud("icp needs at least 3 points"));
    }
    let target_tree = KdTree::build(target);
    let mut current: Vec<Point3> = source.points().to_vec();
    let mut cumulative = RigidTransform::identity();
    let mut rms_history = Vec::new();
    let mut prev_rms = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..max_iters {
        let matched: Vec<Point3> = current
            .iter()
            .map(|p| {
                let (i, _) = target_tree.nearest(*p);
                target_tree.point(i)
            })
            .collect();
        let step = fit_rigid(&current, &matched)?;
        for p in current.iter_mut() {
            *p = step.apply(*p);
        }
        cumulative = step.compose(&cumulative);
        iterations += 1;

        let mut sq = 0.0;
        for p in &current {
            let (_, d) = target_tree.nearest(*p);
            sq += d * d;
        }
        let rms = (sq / current.len() as f64).sqrt();
        rms_history.push(rms);
        if (prev_rms - rms).abs() < tol {
            break;
        }
        prev_rms = rms;
    }

    Ok(IcpResult {
        transform: cumulative,
        aligned: PointCloud::new(current)?,
        rms_history,
        iterations,
    })
}
