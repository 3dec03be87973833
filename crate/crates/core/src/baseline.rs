//! Unsupervised midpoint-interpolation upsampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pcio::{Point3, PointCloud};
use crate::spatial::Index3;

/// Upsamples to exactly `ratio * n` points: the input followed by
/// `ratio - 1` rounds of one midpoint per input point, each towards a random
/// member of that point's `k` nearest neighbors.
pub fn midpoint_interpolate(cloud: &PointCloud, ratio: usize, k: usize, seed: u64) -> Result<PointCloud> {
    if ratio < 2 {
        return Err(Error::InvalidArgument(format!("upsampling ratio must be at least 2, got {ratio}")));
    }
    if k == 0 || cloud.len() < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "midpoint interpolation with k={k} needs at least {} points, got {}",
            k + 1,
            cloud.len()
        )));
    }
    let pts = &cloud.points;
    let index = Index3::new(pts);
    let extra: Vec<Vec<Point3>> = pts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let nbrs: Vec<usize> = index
                .k_nearest(p, k + 1)
                .into_iter()
                .map(|(j, _)| j)
                .filter(|&j| j != i)
                .take(k)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            (1..ratio)
                .map(|_| {
                    let q = pts[nbrs[rng.random_range(0..nbrs.len())]];
                    (*p + q) * 0.5
                })
                .collect()
        })
        .collect();
    let mut out = pts.clone();
    out.reserve(pts.len() * (ratio - 1));
    for round in 0..ratio - 1 {
        out.extend(extra.iter().map(|e| e[round]));
    }
    Ok(PointCloud { points: out, label: cloud.label.clone() })
}
