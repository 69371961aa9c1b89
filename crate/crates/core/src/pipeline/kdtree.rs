//! Exact nearest-neighbor search over 3D points.
//!
//! Ties in distance are broken by the lower point index, so results are
//! fully deterministic and equal to a brute-force scan.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::geometry::Point3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable kd-tree; safe to share across threads for concurrent queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point3>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

/// A neighbor returned by a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(PartialEq)]
struct HeapItem {
    d2: f64,
    index: usize,
}

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            perm: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
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

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let value = self.points[self.perm[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.perm[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    /// The `k` nearest points in ascending distance, ties by lower index.
    pub fn query(&self, q: &Point3, k: usize) -> Result<Vec<Neighbor>> {
        if k > self.len() {
            return Err(Error::invalid(format!(
                "k = {k} exceeds tree size {}",
                self.len()
            )));
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_recurse(0, q, k, &mut heap);
        let mut out: Vec<HeapItem> = heap.into_vec();
        out.sort();
        Ok(out
            .into_iter()
            .map(|h| Neighbor {
                index: h.index,
                distance: h.d2.sqrt(),
            })
            .collect())
    }

    pub fn nearest(&self, q: &Point3) -> Option<Neighbor> {
        if self.is_empty() {
            return None;
        }
        self.query(q, 1).ok().and_then(|v| v.into_iter().next())
    }

    fn knn_recurse(&self, node: usize, q: &Point3, k: usize, heap: &mut BinaryHeap<HeapItem>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    let item = HeapItem {
                        d2: (self.points[i] - q).norm_squared(),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(item);
                    } else if item < *heap.peek().expect("non-empty heap") {
                        heap.pop();
                        heap.push(item);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_recurse(near, q, k, heap);
                // Equal-distance candidates may still win on index, so only
                // prune when the slab is strictly farther than the worst kept.
                let full = heap.len() == k;
                if !full || diff * diff <= heap.peek().map_or(f64::INFINITY, |h| h.d2) {
                    self.knn_recurse(far, q, k, heap);
                }
            }
        }
    }

    /// All points with distance `<= radius`, sorted by index.
    pub fn within_radius(&self, q: &Point3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.is_empty() {
            self.radius_recurse(0, q, radius * radius, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn radius_recurse(&self, node: usize, q: &Point3, r2: f64, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                out.extend(
                    self.perm[start..end]
                        .iter()
                        .copied()
                        .filter(|&i| (self.points[i] - q).norm_squared() <= r2),
                );
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.radius_recurse(near, q, r2, out);
                if diff * diff <= r2 {
                    self.radius_recurse(far, q, r2, out);
                }
            }
        }
    }
}
