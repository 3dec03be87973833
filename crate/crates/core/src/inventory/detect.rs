use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::pcio::PointCloud;
use crate::spatial::Index2;

use super::circle::{ransac_circle, RansacConfig};
use super::ground::{ground_model, height_normalize};

/// Planimetric points of a height-normalized cloud with
/// `|z - center| <= thickness / 2`.
pub fn slice(cloud_hn: &PointCloud, center: f64, thickness: f64) -> Vec<[f64; 2]> {
    let half = thickness / 2.0 + 1e-9;
    cloud_hn
        .points
        .iter()
        .filter(|p| (p.z - center).abs() <= half)
        .map(|p| [p.x, p.y])
        .collect()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connected components of the `eps`-neighborhood graph; components with
/// fewer than `min_pts` points are dropped. Each cluster lists point indices
/// ascending; clusters are ordered by their first index.
pub fn cluster_slice(points: &[[f64; 2]], eps: f64, min_pts: usize) -> Vec<Vec<usize>> {
    if points.is_empty() {
        return Vec::new();
    }
    let idx = Index2::new(points);
    let mut parent: Vec<usize> = (0..points.len()).collect();
    for (i, p) in points.iter().enumerate() {
        for j in idx.within(*p, eps) {
            if j > i {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..points.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() >= min_pts).collect();
    out.sort_unstable_by_key(|g| g[0]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StemDetection {
    pub location: [f64; 2],
    pub radius: f64,
    pub inlier_count: usize,
    pub rms_residual: f64,
}

impl StemDetection {
    pub fn dbh_cm(&self) -> f64 {
        estimate_dbh(self)
    }
}

/// Diameter in centimeters from the fitted radius in meters.
pub fn estimate_dbh(d: &StemDetection) -> f64 {
    200.0 * d.radius
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircleDetectConfig {
    pub breast_height: f64,
    pub thickness: f64,
    pub ground_cell: f64,
    pub eps: f64,
    pub min_pts: usize,
    pub ransac: RansacConfig,
    pub max_residual: f64,
    /// Detections closer than this are merged, keeping the best supported.
    pub nms_radius: f64,
}

impl Default for CircleDetectConfig {
    fn default() -> Self {
        CircleDetectConfig {
            breast_height: 1.3,
            thickness: 0.2,
            ground_cell: 1.0,
            eps: 0.2,
            min_pts: 5,
            ransac: RansacConfig {
                r_min: 0.05,
                r_max: 1.0,
                min_sectors: 5,
                ..RansacConfig::default()
            },
            max_residual: 0.03,
            nms_radius: 0.5,
        }
    }
}

fn sort_by_location<T>(v: &mut [T], loc: impl Fn(&T) -> [f64; 2]) {
    v.sort_by(|a, b| {
        let (a, b) = (loc(a), loc(b));
        a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]))
    });
}

/// Circle detection on an already height-normalized cloud.
pub fn detect_stems_circle_hn(cloud_hn: &PointCloud, cfg: &CircleDetectConfig) -> Vec<StemDetection> {
    let pts = slice(cloud_hn, cfg.breast_height, cfg.thickness);
    let mut dets = Vec::new();
    for (ci, cluster) in cluster_slice(&pts, cfg.eps, cfg.min_pts).into_iter().enumerate() {
        let sub: Vec<[f64; 2]> = cluster.iter().map(|&i| pts[i]).collect();
        let rc = RansacConfig {
            seed: cfg.ransac.seed.wrapping_add(ci as u64),
            ..cfg.ransac
        };
        let Ok(r) = ransac_circle(&sub, &rc) else { continue };
        let f = r.fit;
        if f.radius < cfg.ransac.r_min
            || f.radius > cfg.ransac.r_max
            || r.inliers.len() < cfg.ransac.min_inliers
            || f.rms_residual > cfg.max_residual
        {
            continue;
        }
        dets.push(StemDetection {
            location: f.center,
            radius: f.radius,
            inlier_count: r.inliers.len(),
            rms_residual: f.rms_residual,
        });
    }
    // strongest first, then suppress neighbors
    dets.sort_by(|a, b| b.inlier_count.cmp(&a.inlier_count).then(a.rms_residual.total_cmp(&b.rms_residual)));
    let mut kept: Vec<StemDetection> = Vec::new();
    for d in dets {
        let near = kept.iter().any(|k| {
            (k.location[0] - d.location[0]).hypot(k.location[1] - d.location[1]) < cfg.nms_radius
        });
        if !near {
            kept.push(d);
        }
    }
    sort_by_location(&mut kept, |d| d.location);
    kept
}

/// Ground model, height normalization, breast-height slice, clustering and
/// a RANSAC circle per cluster.
pub fn detect_stems_circle(cloud: &PointCloud, cfg: &CircleDetectConfig) -> Result<Vec<StemDetection>> {
    let g = ground_model(cloud, cfg.ground_cell)?;
    Ok(detect_stems_circle_hn(&height_normalize(cloud, &g), cfg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityDetectConfig {
    pub z_min: f64,
    pub z_max: f64,
    pub cell: f64,
    /// A peak must exceed `k` times the median count of its 5x5 surroundings
    /// (cells inside the plot only).
    pub k: f64,
    pub min_count: usize,
    /// Peaks must also stand this many Poisson standard deviations above the
    /// median, which keeps the false-alarm rate flat across point densities.
    pub significance: f64,
    pub ground_cell: f64,
}

impl Default for DensityDetectConfig {
    fn default() -> Self {
        DensityDetectConfig {
            z_min: 0.5,
            z_max: 4.0,
            cell: 0.5,
            k: 3.0,
            min_count: 10,
            significance: 7.0,
            ground_cell: 1.0,
        }
    }
}

/// Density-peak detection on an already height-normalized cloud.
pub fn detect_stems_density_hn(cloud_hn: &PointCloud, cfg: &DensityDetectConfig) -> Vec<[f64; 2]> {
    let Some((lo, hi)) = cloud_hn.bounds() else {
        return Vec::new();
    };
    let nx = ((hi.x - lo.x) / cfg.cell).floor() as usize + 1;
    let ny = ((hi.y - lo.y) / cfg.cell).floor() as usize + 1;
    let mut count = vec![0usize; nx * ny];
    let mut sum = vec![[0.0f64; 2]; nx * ny];
    for p in &cloud_hn.points {
        if p.z > cfg.z_min && p.z < cfg.z_max {
            let i = (((p.x - lo.x) / cfg.cell).floor() as usize).min(nx - 1);
            let j = (((p.y - lo.y) / cfg.cell).floor() as usize).min(ny - 1);
            count[j * nx + i] += 1;
            sum[j * nx + i][0] += p.x;
            sum[j * nx + i][1] += p.y;
        }
    }
    let at = |i: i64, j: i64| -> Option<usize> {
        (i >= 0 && j >= 0 && (i as usize) < nx && (j as usize) < ny).then(|| count[j as usize * nx + i as usize])
    };
    let mut out = Vec::new();
    let mut ring = Vec::with_capacity(24);
    for j in 0..ny as i64 {
        for i in 0..nx as i64 {
            let c = count[j as usize * nx + i as usize];
            if c < cfg.min_count.max(1) {
                continue;
            }
            // strict maximum against earlier cells, non-strict against later ones
            let mut is_max = true;
            for dj in -1..=1 {
                for di in -1..=1 {
                    if (di, dj) == (0, 0) {
                        continue;
                    }
                    if let Some(n) = at(i + di, j + dj) {
                        let earlier = (dj, di) < (0, 0);
                        if n > c || (earlier && n == c) {
                            is_max = false;
                        }
                    }
                }
            }
            if !is_max {
                continue;
            }
            ring.clear();
            for dj in -2..=2 {
                for di in -2..=2 {
                    if (di, dj) != (0, 0) {
                        if let Some(n) = at(i + di, j + dj) {
                            ring.push(n);
                        }
                    }
                }
            }
            // cells outside the plot are unknown, not empty
            ring.sort_unstable();
            let m = ring.len();
            let med = if m == 0 { 0.0 } else { 0.5 * (ring[(m - 1) / 2] + ring[m / 2]) as f64 };
            let floor = med.max(1.0);
            if c as f64 > cfg.k * floor && c as f64 >= med + cfg.significance * floor.sqrt() {
                let s = sum[j as usize * nx + i as usize];
                out.push([s[0] / c as f64, s[1] / c as f64]);
            }
        }
    }
    sort_by_location(&mut out, |p| *p);
    out
}

pub fn detect_stems_density(cloud: &PointCloud, cfg: &DensityDetectConfig) -> Result<Vec<[f64; 2]>> {
    let g = ground_model(cloud, cfg.ground_cell)?;
    Ok(detect_stems_density_hn(&height_normalize(cloud, &g), cfg))
}

/// Highest normalized z within `radius` of a stem location.
pub fn tree_height(cloud_hn: &PointCloud, location: [f64; 2], radius: f64) -> Result<f64> {
    let r2 = radius * radius;
    cloud_hn
        .points
        .iter()
        .filter(|p| (p.x - location[0]).powi(2) + (p.y - location[1]).powi(2) <= r2)
        .map(|p| p.z)
        .fold(None, |m: Option<f64>, z| Some(m.map_or(z, |m| m.max(z))))
        .ok_or_else(|| Error::NoPoints(format!("no points within {radius} m of ({}, {})", location[0], location[1])))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Share of a uniform marginal covered by its 5th–95th percentile span.
const CENTRAL_SPAN: f64 = 0.9;

/// Crown diameters of all stems at once: points above half of their
/// nearest stem's height are assigned to that stem; the diameter averages
/// the x and y 5th–95th percentile spans, rescaled to the full extent of a
/// uniform marginal. `height_radius` bounds the tree-height search.
pub fn crown_diameters(cloud_hn: &PointCloud, stems: &[[f64; 2]], height_radius: f64) -> Vec<Result<f64>> {
    if stems.is_empty() {
        return Vec::new();
    }
    let heights: Vec<Option<f64>> = stems
        .iter()
        .map(|s| tree_height(cloud_hn, *s, height_radius).ok())
        .collect();
    let idx = Index2::new(stems);
    let mut xs: Vec<Vec<f64>> = vec![Vec::new(); stems.len()];
    let mut ys: Vec<Vec<f64>> = vec![Vec::new(); stems.len()];
    for p in &cloud_hn.points {
        let (k, _) = idx.nearest([p.x, p.y]);
        if let Some(h) = heights[k] {
            if p.z > 0.5 * h {
                xs[k].push(p.x);
                ys[k].push(p.y);
            }
        }
    }
    (0..stems.len())
        .map(|k| {
            if xs[k].len() < 2 {
                return Err(Error::NoPoints(format!("no crown points assigned to stem {k}")));
            }
            let span = |v: &mut Vec<f64>| {
                v.sort_unstable_by(f64::total_cmp);
                (percentile(v, 0.95) - percentile(v, 0.05)) / CENTRAL_SPAN
            };
            let (a, b) = (span(&mut xs[k]), span(&mut ys[k]));
            let d = 0.5 * (a + b);
            if d > 0.0 {
                Ok(d)
            } else {
                Err(Error::NoPoints(format!("crown of stem {k} has no horizontal extent")))
            }
        })
        .collect()
}

pub fn crown_diameter(cloud_hn: &PointCloud, stems: &[[f64; 2]], which: usize, height_radius: f64) -> Result<f64> {
    crown_diameters(cloud_hn, stems, height_radius)
        .into_iter()
        .nth(which)
        .ok_or_else(|| Error::InvalidArgument(format!("no stem {which}")))?
}
