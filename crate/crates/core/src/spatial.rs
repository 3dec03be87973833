//! Thin wrappers over an immutable k-d tree for exact nearest-neighbor and
//! radius queries.

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use std::num::NonZero;

use crate::pcio::Point3;

pub struct Index3 {
    tree: ImmutableKdTree<f64, u64, 3, 32>,
}

impl Index3 {
    pub fn new(points: &[Point3]) -> Self {
        let coords: Vec<[f64; 3]> = points.iter().map(|p| p.to_array()).collect();
        Index3 {
            tree: ImmutableKdTree::new_from_slice(&coords),
        }
    }

    /// `(index, distance)` of the closest point. The index must not be empty.
    pub fn nearest(&self, q: &Point3) -> (usize, f64) {
        let n = self.tree.nearest_one::<SquaredEuclidean>(&q.to_array());
        (n.item as usize, n.distance.sqrt())
    }

    /// Up to `k` closest points ordered by distance.
    pub fn k_nearest(&self, q: &Point3, k: usize) -> Vec<(usize, f64)> {
        let Some(k) = NonZero::new(k) else {
            return Vec::new();
        };
        self.tree
            .nearest_n::<SquaredEuclidean>(&q.to_array(), k)
            .into_iter()
            .map(|n| (n.item as usize, n.distance.sqrt()))
            .collect()
    }

    /// Indices within `radius` (inclusive), in ascending index order.
    pub fn within(&self, q: &Point3, radius: f64) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .tree
            .within_unsorted::<SquaredEuclidean>(&q.to_array(), radius * radius)
            .into_iter()
            .map(|n| n.item as usize)
            .collect();
        v.sort_unstable();
        v
    }
}

pub struct Index2 {
    tree: ImmutableKdTree<f64, u64, 2, 32>,
}

impl Index2 {
    pub fn new(points: &[[f64; 2]]) -> Self {
        Index2 {
            tree: ImmutableKdTree::new_from_slice(points),
        }
    }

    pub fn nearest(&self, q: [f64; 2]) -> (usize, f64) {
        let n = self.tree.nearest_one::<SquaredEuclidean>(&q);
        (n.item as usize, n.distance.sqrt())
    }

    pub fn within(&self, q: [f64; 2], radius: f64) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .tree
            .within_unsorted::<SquaredEuclidean>(&q, radius * radius)
            .into_iter()
            .map(|n| n.item as usize)
            .collect();
        v.sort_unstable();
        v
    }
}
