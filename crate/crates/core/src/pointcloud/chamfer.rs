//! Chamfer distances between point clouds.

use super::{KdTree, PointCloud};

/// Asymmetric Chamfer distance: the mean, over points of `target`, of the
/// Euclidean distance to the nearest point of `source`. Normalized by the
/// summed set (`|target|`), so it is an average regardless of `|source|`.
pub fn chamfer_asym(source: &PointCloud, target: &PointCloud) -> f64 {
    let tree = KdTree::build(source);
    chamfer_asym_tree(&tree, target)
}

/// As [`chamfer_asym`] with a prebuilt tree over the source cloud.
pub fn chamfer_asym_tree(source_tree: &KdTree, target: &PointCloud) -> f64 {
    let mut acc = 0.0;
    for q in target.iter() {
        let (_, d) = source_tree.nearest(*q);
        acc += d;
    }
    acc / target.len() as f64
}

/// Symmetric Chamfer distance: `chamfer_asym(a, b) + chamfer_asym(b, a)`.
pub fn chamfer_sym(a: &PointCloud, b: &PointCloud) -> f64 {
    chamfer_asym(a, b) + chamfer_asym(b, a)
}

/// As [`chamfer_sym`] with prebuilt trees for both clouds.
pub fn chamfer_sym_trees(a: &PointCloud, a_tree: &KdTree, b: &PointCloud, b_tree: &KdTree) -> f64 {
    chamfer_asym_tree(a_tree, b) + chamfer_asym_tree(b_tree, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Point3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    /// O(n^2) double-loop oracle.
    fn chamfer_asym_brute(source: &PointCloud, target: &PointCloud) -> f64 {
        let mut acc = 0.0;
        for q in target.iter() {
            let mut best = f64::INFINITY;
            for p in source.iter() {
                best = best.min(p.dist(q));
            }
            acc += best;
        }
        acc / target.len() as f64
    }

    #[test]
    fn identical_clouds_are_zero() {
        let x = random_cloud(1, 32);
        assert_eq!(chamfer_asym(&x, &x), 0.0);
        assert_eq!(chamfer_sym(&x, &x), 0.0);
    }

    #[test]
    fn singleton_pair() {
        let x = PointCloud::new(vec![Point3::ORIGIN]).unwrap();
        let y = PointCloud::new(vec![Point3::new(1.0, 0.0, 0.0)]).unwrap();
        assert!((chamfer_asym(&x, &y) - 1.0).abs() < 1e-15);
        assert!((chamfer_sym(&x, &y) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn asym_matches_brute_force_to_1e12() {
        let a = random_cloud(10, 64);
        let b = random_cloud(11, 64);
        assert!((chamfer_asym(&a, &b) - chamfer_asym_brute(&a, &b)).abs() < 1e-12);
        assert!((chamfer_asym(&b, &a) - chamfer_asym_brute(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn asym_zero_iff_target_subset_of_source() {
        let a = random_cloud(3, 20);
        // Target made of source points only.
        let subset = PointCloud::new(a.points()[..7].to_vec()).unwrap();
        assert_eq!(chamfer_asym(&a, &subset), 0.0);
        // Any off-cloud target point makes it positive.
        let mut pts = subset.points().to_vec();
        pts.push(Point3::new(5.0, 5.0, 5.0));
        let off = PointCloud::new(pts).unwrap();
        assert!(chamfer_asym(&a, &off) > 0.0);
    }

    proptest! {
        #[test]
        fn sym_is_symmetric_and_permutation_invariant(seed in 0u64..200) {
            let a = random_cloud(seed, 24);
            let b = random_cloud(seed + 1000, 24);
            let d_ab = chamfer_sym(&a, &b);
            let d_ba = chamfer_sym(&b, &a);
            prop_assert!((d_ab - d_ba).abs() < 1e-12);

            let mut rng = ChaCha8Rng::seed_from_u64(seed + 5000);
            let mut shuffled = a.points().to_vec();
            for i in (1..shuffled.len()).rev() {
                let j = rng.random_range(0..=i);
                shuffled.swap(i, j);
            }
            let a_perm = PointCloud::new(shuffled).unwrap();
            prop_assert!((chamfer_sym(&a_perm, &b) - d_ab).abs() < 1e-12);
        }
    }
}
