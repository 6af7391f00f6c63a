//! Static k-d tree over `D`-dimensional points.
//!
//! Built once by median splits on the widest axis; leaves hold small buckets.
//! Query results are returned in a deterministic order (distance, then
//! insertion index).

use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::Ordering;

const LEAF: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        lo: usize,
        hi: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance_squared: f64,
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance_squared
            .total_cmp(&other.distance_squared)
            .then(self.index.cmp(&other.index))
    }
}

fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for i in 0..D {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

impl<const D: usize> KdTree<D> {
    /// Non-finite points are kept in the index space but never returned.
    pub fn new(points: Vec<[f64; D]>) -> Self {
        let mut order: Vec<usize> = (0..points.len())
            .filter(|&i| points[i].iter().all(|v| v.is_finite()))
            .collect();
        let mut nodes = Vec::new();
        if !order.is_empty() {
            let n = order.len();
            build(&points, &mut order, 0, n, &mut nodes);
        }
        Self { points, order, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64; D] {
        &self.points[index]
    }

    /// All points within `radius` (inclusive), sorted by distance then index.
    pub fn within(&self, query: &[f64; D], radius: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if self.nodes.is_empty() || !(radius >= 0.0) {
            return out;
        }
        let r2 = radius * radius;
        let mut stack = alloc::vec![0usize];
        while let Some(id) = stack.pop() {
            match self.nodes[id] {
                Node::Leaf { lo, hi } => {
                    for &i in &self.order[lo..hi] {
                        let d = dist2(&self.points[i], query);
                        if d <= r2 {
                            out.push(Neighbor {
                                index: i,
                                distance_squared: d,
                            });
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
                    if diff <= radius {
                        stack.push(left);
                    }
                    if diff >= -radius {
                        stack.push(right);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// The `k` nearest points, sorted by distance then index.
    pub fn nearest(&self, query: &[f64; D], k: usize) -> Vec<Neighbor> {
        if self.nodes.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(k + 1);
        self.knn(0, query, k, &mut heap);
        let mut v = heap.into_vec();
        v.sort_unstable();
        v
    }

    fn knn(&self, id: usize, query: &[f64; D], k: usize, heap: &mut BinaryHeap<Neighbor>) {
        match self.nodes[id] {
            Node::Leaf { lo, hi } => {
                for &i in &self.order[lo..hi] {
                    let cand = Neighbor {
                        index: i,
                        distance_squared: dist2(&self.points[i], query),
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
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
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.knn(near, query, k, heap);
                // `<=` keeps equal-distance ties on the far side reachable.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().distance_squared {
                    self.knn(far, query, k, heap);
                }
            }
        }
    }
}

fn build<const D: usize>(
    points: &[[f64; D]],
    order: &mut [usize],
    lo: usize,
    hi: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    if hi - lo <= LEAF {
        nodes.push(Node::Leaf { lo, hi });
        return id;
    }
    let mut dim = 0;
    let mut best = -1.0;
    for d in 0..D {
        let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in &order[lo..hi] {
            mn = mn.min(points[i][d]);
            mx = mx.max(points[i][d]);
        }
        if mx - mn > best {
            best = mx - mn;
            dim = d;
        }
    }
    if best <= 0.0 {
        // All points coincide.
        nodes.push(Node::Leaf { lo, hi });
        return id;
    }
    let mid = lo + (hi - lo) / 2;
    order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
        points[a][dim].total_cmp(&points[b][dim]).then(a.cmp(&b))
    });
    let value = points[order[mid]][dim];
    nodes.push(Node::Leaf { lo: 0, hi: 0 });
    // Points equal to the split value may sit on either side; queries visit
    // both children whenever the split plane is within reach, so that is fine.
    let left = build(points, order, lo, mid, nodes);
    let right = build(points, order, mid, hi, nodes);
    nodes[id] = Node::Split {
        dim,
        value,
        left,
        right,
    };
    id
}
