//! Minimal kd-tree over 3D points for nearest-neighbor queries.
//!
//! Built once per ICP call; deterministic for a fixed input order.

use nalgebra::Vector3;

pub(crate) struct KdTree {
    nodes: Vec<Node>,
    points: Vec<Vector3<f64>>,
    root: Option<usize>,
}

struct Node {
    point_index: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut indices: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree {
            nodes: Vec::with_capacity(points.len()),
            points: points.to_vec(),
            root: None,
        };
        tree.root = tree.build_rec(&mut indices, 0);
        tree
    }

    fn build_rec(&mut self, indices: &mut [usize], depth: usize) -> Option<usize> {
        if indices.is_empty() {
            return None;
        }
        let axis = depth % 3;
        // Median split; ties broken by point index for determinism.
        indices.sort_unstable_by(|&a, &b| {
            self.points[a][axis]
                .partial_cmp(&self.points[b][axis])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mid = indices.len() / 2;
        let point_index = indices[mid];
        let node_index = self.nodes.len();
        self.nodes.push(Node {
            point_index,
            axis,
            left: None,
            right: None,
        });
        let (lo, rest) = indices.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(hi, depth + 1);
        self.nodes[node_index].left = left;
        self.nodes[node_index].right = right;
        Some(node_index)
    }

    /// Index and squared distance of the nearest stored point.
    pub fn nearest(&self, query: &Vector3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        if let Some(root) = self.root {
            self.nearest_rec(root, query, &mut best);
        }
        best
    }

    fn nearest_rec(&self, node_index: usize, query: &Vector3<f64>, best: &mut (usize, f64)) {
        let node = &self.nodes[node_index];
        let p = &self.points[node.point_index];
        let d2 = (p - query).norm_squared();
        if d2 < best.1 || (d2 == best.1 && node.point_index < best.0) {
            *best = (node.point_index, d2);
        }
        let delta = query[node.axis] - p[node.axis];
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.nearest_rec(n, query, best);
        }
        if let Some(f) = far {
            if delta * delta <= best.1 {
                self.nearest_rec(f, query, best);
            }
        }
    }
}
