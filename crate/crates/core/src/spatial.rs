//! Static 3-D kd-tree for exact nearest-neighbor queries.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::math::Vec3;

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3<f64>>,
    /// Permutation of point indices; node `[lo, hi)` splits at its midpoint.
    order: Vec<u32>,
    axes: Vec<u8>,
}

const LEAF: usize = 8;

impl KdTree {
    pub fn new(points: &[Vec3<f64>]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axes = vec![0u8; points.len()];
        build(points, &mut order, &mut axes);
        Self {
            points: points.to_vec(),
            order,
            axes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec3<f64> {
        self.points[i]
    }

    /// Index and squared distance of the closest point, ties to the lowest
    /// index. `None` on an empty tree.
    pub fn nearest(&self, q: Vec3<f64>) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_in(0, self.order.len(), q, &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    fn nearest_in(&self, lo: usize, hi: usize, q: Vec3<f64>, best: &mut (usize, f64)) {
        if hi - lo <= LEAF {
            for &i in &self.order[lo..hi] {
                let d = (self.points[i as usize] - q).norm_sq();
                if d < best.1 || (d == best.1 && (i as usize) < best.0) {
                    *best = (i as usize, d);
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = self.axes[mid] as usize;
        let pivot = self.order[mid] as usize;
        let diff = q[axis] - self.points[pivot][axis];
        let (first, second) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        let d = (self.points[pivot] - q).norm_sq();
        if d < best.1 || (d == best.1 && pivot < best.0) {
            *best = (pivot, d);
        }
        self.nearest_in(first.0, first.1, q, best);
        if diff * diff <= best.1 {
            self.nearest_in(second.0, second.1, q, best);
        }
    }

    /// The `k` nearest points other than `exclude`, closest first, as
    /// `(index, squared distance)`.
    pub fn knn(&self, q: Vec3<f64>, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_in(0, self.order.len(), q, k, exclude, &mut heap);
        let mut v: Vec<(usize, f64)> = heap.into_iter().map(|c: Cand| (c.1, c.0)).collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        v
    }

    fn knn_in(&self, lo: usize, hi: usize, q: Vec3<f64>, k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Cand>) {
        let offer = |i: usize, heap: &mut BinaryHeap<Cand>| {
            if Some(i) == exclude {
                return;
            }
            let d = (self.points[i] - q).norm_sq();
            if heap.len() < k {
                heap.push(Cand(d, i));
            } else if Cand(d, i) < *heap.peek().unwrap() {
                heap.pop();
                heap.push(Cand(d, i));
            }
        };
        if hi - lo <= LEAF {
            for &i in &self.order[lo..hi] {
                offer(i as usize, heap);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = self.axes[mid] as usize;
        let pivot = self.order[mid] as usize;
        let diff = q[axis] - self.points[pivot][axis];
        let (first, second) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        offer(pivot, heap);
        self.knn_in(first.0, first.1, q, k, exclude, heap);
        let worst = if heap.len() < k { f64::INFINITY } else { heap.peek().unwrap().0 };
        if diff * diff <= worst {
            self.knn_in(second.0, second.1, q, k, exclude, heap);
        }
    }
}

#[derive(PartialEq)]
struct Cand(f64, usize);

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Cand {
    fn cmp(&self, o: &Self) -> Ordering {
        self.0.total_cmp(&o.0).then(self.1.cmp(&o.1))
    }
}

fn build(points: &[Vec3<f64>], order: &mut [u32], axes: &mut [u8]) {
    if order.len() <= LEAF {
        return;
    }
    // Split on the widest axis of this node's bounding box.
    let (mut lo, mut hi) = (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY));
    for &i in order.iter() {
        lo = lo.min_elem(points[i as usize]);
        hi = hi.max_elem(points[i as usize]);
    }
    let ext = hi - lo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis].total_cmp(&points[b as usize][axis]).then(a.cmp(&b))
    });
    axes[mid] = axis as u8;
    let (left, right) = order.split_at_mut(mid);
    let (laxes, raxes) = axes.split_at_mut(mid);
    build(points, left, laxes);
    build(points, &mut right[1..], &mut raxes[1..]);
}
