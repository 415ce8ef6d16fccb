//! Static 2-D KD-tree over point indices.
//!
//! Distances are compared as `(squared distance, index)` so every query has
//! a unique answer and agrees exactly with a brute-force scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 2]>,
    /// Point indices laid out as an implicit balanced tree over `[lo, hi)`.
    order: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn build(points: &[[f64; 2]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build_range(points, &mut order, 0);
        Self {
            points: points.to_vec(),
            order,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest point other than `exclude`, if any.
    pub fn nearest(&self, query: [f64; 2], exclude: Option<usize>) -> Option<usize> {
        self.k_nearest(query, 1, exclude).first().map(|&(i, _)| i)
    }

    /// Up to `k` nearest points as `(index, squared distance)`, closest first.
    pub fn k_nearest(&self, query: [f64; 2], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(query, k, exclude, 0, self.order.len(), 0, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2)).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn search(
        &self,
        q: [f64; 2],
        k: usize,
        exclude: Option<usize>,
        lo: usize,
        hi: usize,
        depth: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let index = self.order[mid];
        let p = self.points[index];
        if Some(index) != exclude {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            let cand = Candidate { dist2: dx * dx + dy * dy, index };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().unwrap() {
                heap.pop();
                heap.push(cand);
            }
        }
        let axis = depth % 2;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, k, exclude, near.0, near.1, depth + 1, heap);
        // `<=` keeps equal-distance points with smaller indices reachable.
        if heap.len() < k || diff * diff <= heap.peek().unwrap().dist2 {
            self.search(q, k, exclude, far.0, far.1, depth + 1, heap);
        }
    }
}

fn build_range(points: &[[f64; 2]], order: &mut [usize], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 2;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let (left, right) = order.split_at_mut(mid);
    build_range(points, left, depth + 1);
    build_range(points, &mut right[1..], depth + 1);
}
