//! Static kd-tree over 3D positions.
//!
//! Results are exact. Among equidistant points the lower index wins, so every
//! query is deterministic and identical to a sorted brute-force scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::Vec3;

const LEAF_SIZE: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Query {
    /// The `k` nearest points, ascending by (distance, index).
    Knn(usize),
    /// Every point with distance `<= r`, ascending by index.
    Radius(f64),
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Scratch buffer of `(index, squared distance)` pairs.
pub type Neighbors = Vec<(usize, f64)>;

#[derive(PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl SpatialIndex {
    pub fn build(points: &[Vec3]) -> Self {
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build_node(0, points.len());
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let slice = &self.order[start..end];
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in slice {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] - lo[axis] <= 0.0 {
            return id;
        }
        let mid = (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[start + mid]][axis];
        let left = self.build_node(start, start + mid);
        let right = self.build_node(start + mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Runs `query` around `center`. `points` must be the slice the index
    /// was built from; it is accepted for API symmetry with callers that
    /// hold the cloud.
    pub fn query(&self, points: &[Vec3], center: &Vec3, query: Query) -> Vec<usize> {
        debug_assert_eq!(points.len(), self.points.len());
        let mut out = Neighbors::new();
        match query {
            Query::Knn(k) => self.knn_into(center, k, &mut out),
            Query::Radius(r) => self.radius_into(center, r, &mut out),
        }
        out.into_iter().map(|(i, _)| i).collect()
    }

    /// `k` nearest neighbours (all points when `k >= len`).
    pub fn knn_into(&self, center: &Vec3, k: usize, out: &mut Neighbors) {
        out.clear();
        if k == 0 || self.nodes.is_empty() {
            return;
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.knn_recurse(0, center, k, &mut heap);
        out.extend(heap.into_sorted_vec().into_iter().map(|c| (c.index, c.d2)));
    }

    fn knn_recurse(&self, node: usize, center: &Vec3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Candidate {
                        d2: (self.points[i] - center).norm_squared(),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap holds k items") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = center[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_recurse(near, center, k, heap);
                let worst = heap.peek().map_or(f64::INFINITY, |c| c.d2);
                if heap.len() < k || diff * diff <= worst {
                    self.knn_recurse(far, center, k, heap);
                }
            }
        }
    }

    /// All points within `radius` (inclusive), ascending by index.
    pub fn radius_into(&self, center: &Vec3, radius: f64, out: &mut Neighbors) {
        out.clear();
        if self.nodes.is_empty() || radius < 0.0 {
            return;
        }
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            match self.nodes[node] {
                Node::Leaf { start, end } => {
                    for &i in &self.order[start..end] {
                        let d2 = (self.points[i] - center).norm_squared();
                        if d2 <= r2 {
                            out.push((i, d2));
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let diff = center[axis] - value;
                    if diff - radius <= 0.0 {
                        stack.push(left);
                    }
                    if diff + radius >= 0.0 {
                        stack.push(right);
                    }
                }
            }
        }
        out.sort_unstable_by_key(|&(i, _)| i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(points: &[Vec3], c: &Vec3, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - c).norm_squared(), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    fn brute_radius(points: &[Vec3], c: &Vec3, r: f64) -> Vec<usize> {
        (0..points.len())
            .filter(|&i| (points[i] - c).norm_squared() <= r * r)
            .collect()
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let n = rng.random_range(1..=500);
            // Quantized coordinates produce plenty of exact distance ties.
            let pts: Vec<Vec3> = (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(0..20) as f64 * 0.05,
                        rng.random_range(0..20) as f64 * 0.05,
                        rng.random_range(0..4) as f64 * 0.05,
                    )
                })
                .collect();
            let index = SpatialIndex::build(&pts);
            for _ in 0..5 {
                let c = Vec3::new(rng.random(), rng.random(), rng.random_range(-0.1..0.3));
                let k = rng.random_range(1..=n + 2);
                assert_eq!(index.query(&pts, &c, Query::Knn(k)), brute_knn(&pts, &c, k), "trial {trial}");
                let r = rng.random_range(0.0..0.4);
                assert_eq!(index.query(&pts, &c, Query::Radius(r)), brute_radius(&pts, &c, r));
            }
        }
    }

    #[test]
    fn edge_cases() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0)];
        let index = SpatialIndex::build(&pts);
        assert_eq!(index.query(&pts, &pts[1], Query::Radius(0.0)), vec![1]);
        assert_eq!(index.query(&pts, &pts[0], Query::Knn(3)), vec![0, 1, 2]);
        assert_eq!(index.query(&pts, &pts[0], Query::Knn(10)), vec![0, 1, 2]);
        let empty = SpatialIndex::build(&[]);
        assert!(empty.query(&[], &pts[0], Query::Knn(2)).is_empty());
    }

    proptest! {
        #[test]
        fn knn_prefix_is_consistent(seed in 0u64..1000, k in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = (0..60).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
            let index = SpatialIndex::build(&pts);
            let c = Vec3::new(0.5, 0.5, 0.5);
            let small = index.query(&pts, &c, Query::Knn(k));
            let big = index.query(&pts, &c, Query::Knn(k + 5));
            prop_assert_eq!(&big[..k], &small[..]);
        }
    }
}
