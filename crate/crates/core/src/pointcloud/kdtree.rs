//! Static 3D kd-tree with exhaustive-search-equivalent nearest queries.
//!
//! Queries compare `(squared distance, index)` lexicographically and prune a
//! subtree only when its slab is strictly farther than the current best, so
//! results match a brute-force scan exactly, including the smallest-index
//! tie-break.

use super::{Point3, PointCloud};

const LEAF_SIZE: usize = 12;

struct KdNode {
    /// Split axis (0..3) or usize::MAX for leaves.
    axis: usize,
    split: f64,
    /// Children as node indices; unused for leaves.
    left: usize,
    right: usize,
    /// Range into `order` covered by this node (leaves only).
    start: usize,
    end: usize,
}

pub struct KdTree {
    pts: Vec<[f64; 3]>,
    /// Original indices, permuted by the build.
    order: Vec<u32>,
    nodes: Vec<KdNode>,
    root: usize,
}

impl KdTree {
    pub fn build(cloud: &PointCloud) -> KdTree {
        Self::from_coords(&cloud.to_arrays())
    }

    /// Builds over raw coordinate triples (used by the training losses on
    /// deformed network outputs).
    pub fn from_coords(pts: &[[f64; 3]]) -> KdTree {
        assert!(!pts.is_empty(), "kd-tree over empty point set");
        let mut tree = KdTree {
            pts: pts.to_vec(),
            order: (0..pts.len() as u32).collect(),
            nodes: Vec::new(),
            root: 0,
        };
        let n = pts.len();
        tree.root = tree.build_node(0, n);
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(KdNode {
            axis: usize::MAX,
            split: 0.0,
            left: 0,
            right: 0,
            start,
            end,
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        // Split on the axis with the largest extent over this range.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            let p = self.pts[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut axis = 0;
        for a in 1..3 {
            if hi[a] - lo[a] > hi[axis] - lo[axis] {
                axis = a;
            }
        }
        if hi[axis] - lo[axis] == 0.0 {
            // All points coincide on every axis; keep as a leaf.
            return id;
        }
        let mid = (start + end) / 2;
        let pts = &self.pts;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a as usize][axis]
                .partial_cmp(&pts[b as usize][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let split = self.pts[self.order[mid] as usize][axis];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        let node = &mut self.nodes[id];
        node.axis = axis;
        node.split = split;
        node.left = left;
        node.right = right;
        id
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    pub fn point(&self, index: usize) -> Point3 {
        Point3::from_array(self.pts[index])
    }

    /// Index of the nearest stored point and its Euclidean distance.
    pub fn nearest(&self, q: Point3) -> (usize, f64) {
        self.nearest_coord(q.to_array())
    }

    pub fn nearest_coord(&self, q: [f64; 3]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root, q, &mut best);
        (best.0, best.1.sqrt())
    }

    fn search(&self, node_id: usize, q: [f64; 3], best: &mut (usize, f64)) {
        let node = &self.nodes[node_id];
        if node.axis == usize::MAX {
            for &i in &self.order[node.start..node.end] {
                let p = self.pts[i as usize];
                let dx = p[0] - q[0];
                let dy = p[1] - q[1];
                let dz = p[2] - q[2];
                let d2 = dx * dx + dy * dy + dz * dz;
                if d2 < best.1 || (d2 == best.1 && (i as usize) < best.0) {
                    *best = (i as usize, d2);
                }
            }
            return;
        }
        let delta = q[node.axis] - node.split;
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.search(near, q, best);
        // Visit the far side unless strictly farther than the current best:
        // equal-distance points with smaller indices may live there.
        if delta * delta <= best.1 {
            self.search(far, q, best);
        }
    }
}

/// Brute-force nearest neighbor with the same tie-break; the oracle the tree
/// is tested against.
pub fn nearest_brute_force(pts: &[[f64; 3]], q: [f64; 3]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in pts.iter().enumerate() {
        let dx = p[0] - q[0];
        let dy = p[1] - q[1];
        let dz = p[2] - q[2];
        let d2 = dx * dx + dy * dy + dz * dz;
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    (best.0, best.1.sqrt())
}
