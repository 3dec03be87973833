use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleFit {
    pub center: [f64; 2],
    pub radius: f64,
    /// RMS of `| |p - c| - r |` over the fitted points.
    pub rms_residual: f64,
}

impl CircleFit {
    pub fn distance(&self, p: &[f64; 2]) -> f64 {
        ((p[0] - self.center[0]).hypot(p[1] - self.center[1]) - self.radius).abs()
    }
}

/// Algebraic (Kåsa) least-squares circle, solved on centered coordinates.
pub fn fit_circle(points: &[[f64; 2]]) -> Result<CircleFit> {
    let n = points.len();
    if n < 3 {
        return Err(Error::DegenerateFit(format!("{n} points cannot define a circle")));
    }
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let (mx, my) = (mx / n as f64, my / n as f64);
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for p in points {
        let (u, v) = (p[0] - mx, p[1] - my);
        let row = Vector3::new(u, v, 1.0);
        ata += row * row.transpose();
        atb += row * -(u * u + v * v);
    }
    let eig = SymmetricEigen::new(ata);
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
    if !(hi > 0.0) || lo <= hi * 1e-14 {
        return Err(Error::DegenerateFit("points are collinear or coincident".into()));
    }
    let sol = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| Error::DegenerateFit("singular normal equations".into()))?;
    let (cu, cv) = (-sol[0] / 2.0, -sol[1] / 2.0);
    let r2 = cu * cu + cv * cv - sol[2];
    if !(r2 > 0.0) || !r2.is_finite() {
        return Err(Error::DegenerateFit("non-positive squared radius".into()));
    }
    let mut fit = CircleFit {
        center: [cu + mx, cv + my],
        radius: r2.sqrt(),
        rms_residual: 0.0,
    };
    fit.rms_residual = (points.iter().map(|p| fit.distance(p).powi(2)).sum::<f64>() / n as f64).sqrt();
    Ok(fit)
}

/// Circumcircle of three points; `None` when (nearly) collinear.
pub fn circle_through(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<CircleFit> {
    let (bx, by) = (b[0] - a[0], b[1] - a[1]);
    let (cx, cy) = (c[0] - a[0], c[1] - a[1]);
    let d = 2.0 * (bx * cy - by * cx);
    let scale = (bx * bx + by * by).max(cx * cx + cy * cy);
    if d.abs() <= 1e-12 * scale || scale == 0.0 {
        return None;
    }
    let (b2, c2) = (bx * bx + by * by, cx * cx + cy * cy);
    let ux = (cy * b2 - by * c2) / d;
    let uy = (bx * c2 - cx * b2) / d;
    Some(CircleFit {
        center: [a[0] + ux, a[1] + uy],
        radius: ux.hypot(uy),
        rms_residual: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_tol: f64,
    pub min_inliers: usize,
    /// Hypotheses outside these radius bounds are not scored.
    pub r_min: f64,
    pub r_max: f64,
    /// Minimum number of occupied 45° sectors (of 8) among a hypothesis'
    /// inliers; rejects wide arcs grazing a blob. 0 disables.
    pub min_sectors: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 200,
            inlier_tol: 0.02,
            min_inliers: 12,
            r_min: 0.0,
            r_max: f64::INFINITY,
            min_sectors: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit {
    pub fit: CircleFit,
    /// Indices of points within tolerance of the refined circle.
    pub inliers: Vec<usize>,
}

/// How many of the 8 angular sectors around `c` hold at least one point.
fn arc_sectors(points: &[[f64; 2]], idx: &[usize], c: &CircleFit) -> usize {
    let mut seen = [false; 8];
    for &i in idx {
        let a = (points[i][1] - c.center[1]).atan2(points[i][0] - c.center[0]);
        let s = ((a + std::f64::consts::PI) / std::f64::consts::FRAC_PI_4) as usize;
        seen[s.min(7)] = true;
    }
    seen.iter().filter(|&&b| b).count()
}

fn inliers_of(points: &[[f64; 2]], c: &CircleFit, tol: f64) -> Vec<usize> {
    (0..points.len()).filter(|&i| c.distance(&points[i]) <= tol).collect()
}

/// Best three-point hypothesis by inlier count, refined with [`fit_circle`]
/// on its inliers.
pub fn ransac_circle(points: &[[f64; 2]], cfg: &RansacConfig) -> Result<RansacFit> {
    let n = points.len();
    if n < 3 || n < cfg.min_inliers {
        return Err(Error::NoCircle(format!("{n} points, need {}", cfg.min_inliers.max(3))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, CircleFit)> = None;
    for _ in 0..cfg.iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        for m in [i.min(j), i.max(j)] {
            if k >= m {
                k += 1;
            }
        }
        let Some(c) = circle_through(points[i], points[j], points[k]) else { continue };
        if c.radius < cfg.r_min || c.radius > cfg.r_max {
            continue;
        }
        let count = points.iter().filter(|p| c.distance(p) <= cfg.inlier_tol).count();
        if best.is_none_or(|(b, _)| count > b)
            && (cfg.min_sectors == 0 || arc_sectors(points, &inliers_of(points, &c, cfg.inlier_tol), &c) >= cfg.min_sectors)
        {
            best = Some((count, c));
        }
    }
    let Some((count, hyp)) = best else {
        return Err(Error::NoCircle("no admissible hypothesis".into()));
    };
    if count < cfg.min_inliers {
        return Err(Error::NoCircle(format!("best hypothesis has {count} inliers, need {}", cfg.min_inliers)));
    }
    let hyp_in = inliers_of(points, &hyp, cfg.inlier_tol);
    let subset: Vec<[f64; 2]> = hyp_in.iter().map(|&i| points[i]).collect();
    let refined = fit_circle(&subset)?;
    let ref_in = inliers_of(points, &refined, cfg.inlier_tol);
    let covered = cfg.min_sectors == 0 || arc_sectors(points, &ref_in, &refined) >= cfg.min_sectors;
    if ref_in.len() >= hyp_in.len() && covered {
        let subset: Vec<[f64; 2]> = ref_in.iter().map(|&i| points[i]).collect();
        let fit = fit_circle(&subset).unwrap_or(refined);
        Ok(RansacFit { fit, inliers: ref_in })
    } else {
        Ok(RansacFit {
            fit: refined,
            inliers: hyp_in,
        })
    }
}
