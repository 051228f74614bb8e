//! Data augmentation: rotation about Z, anisotropic scaling, bounding-box
//! normalization and a small translation, applied in that fixed order.

use super::{GeomError, Point3, PointCloud};
use rand::Rng;

pub const MAX_ROTATION_RAD: f64 = 40.0 * std::f64::consts::PI / 180.0;
pub const SCALE_RANGE: (f64, f64) = (0.75, 1.25);
pub const MAX_TRANSLATION: f64 = 0.03;

/// A sampled augmentation. Application order is fixed:
/// rotate → anisotropic scale → bbox normalize (when enabled) → translate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationTransform {
    theta_z: f64,
    scale: [f64; 3],
    translation: Point3,
    apply_bbox_norm: bool,
}

impl AugmentationTransform {
    pub fn new(
        theta_z: f64,
        scale: [f64; 3],
        translation: Point3,
        apply_bbox_norm: bool,
    ) -> Result<Self, GeomError> {
        if !theta_z.is_finite() || theta_z.abs() > MAX_ROTATION_RAD + 1e-12 {
            return Err(GeomError::InvalidAugmentation("rotation outside ±40°"));
        }
        for s in scale {
            if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&s) {
                return Err(GeomError::InvalidAugmentation("scale outside [0.75, 1.25]"));
            }
        }
        if !translation.is_finite()
            || translation.x.abs() >= MAX_TRANSLATION
            || translation.y.abs() >= MAX_TRANSLATION
            || translation.z.abs() >= MAX_TRANSLATION
        {
            return Err(GeomError::InvalidAugmentation(
                "translation component magnitude must be below 0.03",
            ));
        }
        Ok(AugmentationTransform {
            theta_z,
            scale,
            translation,
            apply_bbox_norm,
        })
    }

    /// No-op transform (useful as a stub in tests).
    pub fn identity() -> Self {
        AugmentationTransform {
            theta_z: 0.0,
            scale: [1.0; 3],
            translation: Point3::ORIGIN,
            apply_bbox_norm: false,
        }
    }

    /// Full augmentation draw: rotation, per-axis scale, bbox normalization
    /// and a small translation.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let theta_z = rng.random_range(-MAX_ROTATION_RAD..=MAX_ROTATION_RAD);
        let scale = [
            rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        ];
        let translation = Point3::new(
            rng.random_range(-MAX_TRANSLATION..MAX_TRANSLATION),
            rng.random_range(-MAX_TRANSLATION..MAX_TRANSLATION),
            rng.random_range(-MAX_TRANSLATION..MAX_TRANSLATION),
        );
        AugmentationTransform {
            theta_z,
            scale,
            translation,
            apply_bbox_norm: true,
        }
    }

    /// Draw used for the self-reconstruction targets: rotation, scaling and
    /// bbox rescaling only, no translation.
    pub fn sample_self_reconstruction<R: Rng>(rng: &mut R) -> Self {
        let mut t = Self::sample(rng);
        t.translation = Point3::ORIGIN;
        t
    }

    pub fn theta_z(&self) -> f64 {
        self.theta_z
    }

    pub fn scale(&self) -> [f64; 3] {
        self.scale
    }

    pub fn translation(&self) -> Point3 {
        self.translation
    }

    pub fn applies_bbox_norm(&self) -> bool {
        self.apply_bbox_norm
    }

    /// Applies the transform to every point; index-wise correspondence with
    /// the input is preserved.
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud, GeomError> {
        let (c, s) = (self.theta_z.cos(), self.theta_z.sin());
        let rotated_scaled: Vec<Point3> = cloud
            .iter()
            .map(|p| {
                let rx = c * p.x - s * p.y;
                let ry = s * p.x + c * p.y;
                Point3::new(rx * self.scale[0], ry * self.scale[1], p.z * self.scale[2])
            })
            .collect();
        let mid = PointCloud::new(rotated_scaled)?;
        let normed = if self.apply_bbox_norm {
            mid.normalize_bbox()?
        } else {
            mid
        };
        let t = self.translation;
        PointCloud::new(
            normed
                .iter()
                .map(|p| Point3::new(p.x + t.x, p.y + t.y, p.z + t.z))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_cube() -> PointCloud {
        let mut pts = Vec::new();
        for &x in &[-1.0, 1.0] {
            for &y in &[-1.0, 1.0] {
                for &z in &[-1.0, 1.0] {
                    pts.push(Point3::new(x, y, z));
                }
            }
        }
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn neutral_transform_on_normalized_input_is_identity() {
        let psi =
            AugmentationTransform::new(0.0, [1.0; 3], Point3::ORIGIN, true).unwrap();
        let cloud = unit_cube();
        let out = psi.apply(&cloud).unwrap();
        for (a, b) in cloud.iter().zip(out.iter()) {
            assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-12);
            assert_abs_diff_eq!(a.y, b.y, epsilon = 1e-12);
            assert_abs_diff_eq!(a.z, b.z, epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_range_rotation_rejected_at_construction() {
        let err = AugmentationTransform::new(
            90.0_f64.to_radians(),
            [1.0; 3],
            Point3::ORIGIN,
            false,
        );
        assert!(matches!(err, Err(GeomError::InvalidAugmentation(_))));
    }

    #[test]
    fn out_of_range_scale_and_translation_rejected() {
        assert!(AugmentationTransform::new(0.0, [0.5, 1.0, 1.0], Point3::ORIGIN, false).is_err());
        assert!(
            AugmentationTransform::new(0.0, [1.0; 3], Point3::new(0.03, 0.0, 0.0), false).is_err()
        );
    }

    /// 4x4 homogeneous matrix product oracle: translate · scale · rotate.
    fn mat4_oracle(theta: f64, scale: [f64; 3], t: Point3, p: Point3) -> Point3 {
        let (c, s) = (theta.cos(), theta.sin());
        let rot = [
            [c, -s, 0.0, 0.0],
            [s, c, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let sc = [
            [scale[0], 0.0, 0.0, 0.0],
            [0.0, scale[1], 0.0, 0.0],
            [0.0, 0.0, scale[2], 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let tr = [
            [1.0, 0.0, 0.0, t.x],
            [0.0, 1.0, 0.0, t.y],
            [0.0, 0.0, 1.0, t.z],
            [0.0, 0.0, 0.0, 1.0],
        ];
        fn matmul(a: [[f64; 4]; 4], b: [[f64; 4]; 4]) -> [[f64; 4]; 4] {
            let mut out = [[0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    for (k, bk) in b.iter().enumerate() {
                        out[i][j] += a[i][k] * bk[j];
                    }
                }
            }
            out
        }
        let m = matmul(tr, matmul(sc, rot));
        let v = [p.x, p.y, p.z, 1.0];
        let mut out = [0.0; 4];
        for i in 0..4 {
            for k in 0..4 {
                out[i] += m[i][k] * v[k];
            }
        }
        Point3::new(out[0], out[1], out[2])
    }

    #[test]
    fn matches_hand_composed_matrix_product() {
        let theta = 30.0_f64.to_radians();
        let scale = [0.8, 1.2, 1.0];
        let t = Point3::new(0.01, 0.0, 0.0);
        let psi = AugmentationTransform::new(theta, scale, t, false).unwrap();
        let cloud = unit_cube();
        let out = psi.apply(&cloud).unwrap();
        for (p, q) in cloud.iter().zip(out.iter()) {
            let expect = mat4_oracle(theta, scale, t, *p);
            assert_abs_diff_eq!(q.x, expect.x, epsilon = 1e-12);
            assert_abs_diff_eq!(q.y, expect.y, epsilon = 1e-12);
            assert_abs_diff_eq!(q.z, expect.z, epsilon = 1e-12);
        }
    }

    #[test]
    fn sampled_transforms_are_in_range() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = AugmentationTransform::sample(&mut rng);
            assert!(t.theta_z().abs() <= MAX_ROTATION_RAD);
            assert!(t.scale().iter().all(|s| (0.75..=1.25).contains(s)));
            assert!(t.translation().x.abs() < MAX_TRANSLATION);
            assert!(t.applies_bbox_norm());
            let sr = AugmentationTransform::sample_self_reconstruction(&mut rng);
            assert_eq!(sr.translation(), Point3::ORIGIN);
        }
    }

    #[test]
    fn application_preserves_length_and_order() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let cloud = unit_cube();
        let psi = AugmentationTransform::sample(&mut rng);
        let out = psi.apply(&cloud).unwrap();
        assert_eq!(out.len(), cloud.len());
    }
}
