use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pcio::{Point3, PointCloud};

use super::circle::fit_circle;
use super::detect::StemDetection;

#[derive(Debug, Clone, PartialEq)]
pub struct SmpConfig {
    pub bin: f64,
    pub sectors: usize,
    pub breast_height: f64,
    /// Lowest bin edge walked down to; keeps ground returns out of the rings.
    pub start_height: f64,
    /// Upper stop, normally the crown base when known.
    pub max_height: Option<f64>,
    /// Search radius as a multiple of the previous ring radius.
    pub search_factor: f64,
    /// Consecutive bins without a valid ring the walk may step over.
    pub max_gap: usize,
}

impl Default for SmpConfig {
    fn default() -> Self {
        SmpConfig {
            bin: 0.25,
            sectors: 36,
            breast_height: 1.3,
            start_height: 0.3,
            max_height: None,
            search_factor: 1.5,
            max_gap: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ring {
    pub height: f64,
    pub center: [f64; 2],
    pub radius: f64,
    pub medians: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemModel {
    pub rings: Vec<Ring>,
    pub sectors: usize,
}

impl StemModel {
    /// `# forestsr stem v1` then one `height,center_x,center_y,radius,medians` row per ring.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("# forestsr stem v1\nheight,center_x,center_y,radius,medians\n");
        for r in &self.rings {
            let _ = writeln!(s, "{},{},{},{},{}", r.height, r.center[0], r.center[1], r.radius, r.medians.len());
        }
        s
    }
}

fn sector_medians(points: &[Point3], center: [f64; 2], sectors: usize) -> Vec<[f64; 3]> {
    let mut bins: Vec<Vec<(f64, [f64; 3])>> = vec![Vec::new(); sectors];
    for p in points {
        let (dx, dy) = (p.x - center[0], p.y - center[1]);
        let a = dy.atan2(dx) + PI;
        let s = ((a / (2.0 * PI) * sectors as f64) as usize).min(sectors - 1);
        bins[s].push((dx.hypot(dy), p.to_array()));
    }
    bins.into_iter()
        .filter(|b| !b.is_empty())
        .map(|mut b| {
            b.sort_unstable_by(|a, c| {
                a.0.total_cmp(&c.0)
                    .then(a.1[0].total_cmp(&c.1[0]))
                    .then(a.1[1].total_cmp(&c.1[1]))
                    .then(a.1[2].total_cmp(&c.1[2]))
            });
            b[(b.len() - 1) / 2].1
        })
        .collect()
}

struct Walker<'a> {
    cfg: &'a SmpConfig,
    by_bin: std::collections::HashMap<i64, Vec<Point3>>,
}

impl Walker<'_> {
    fn ring(&self, k: i64, center: [f64; 2], radius: f64) -> Option<Ring> {
        let reach = self.cfg.search_factor * radius;
        let pts: Vec<Point3> = self
            .by_bin
            .get(&k)?
            .iter()
            .filter(|p| (p.x - center[0]).hypot(p.y - center[1]) <= reach)
            .copied()
            .collect();
        let medians = sector_medians(&pts, center, self.cfg.sectors);
        if medians.len() * 3 < self.cfg.sectors || medians.len() < 3 {
            return None;
        }
        let xy: Vec<[f64; 2]> = medians.iter().map(|m| [m[0], m[1]]).collect();
        let fit = fit_circle(&xy).ok()?;
        if fit.radius > reach {
            return None;
        }
        let ring = Ring {
            height: (k as f64 + 0.5) * self.cfg.bin,
            center: fit.center,
            radius: fit.radius,
            medians,
        };
        let ok = ring
            .medians
            .iter()
            .all(|m| (m[0] - ring.center[0]).hypot(m[1] - ring.center[1]) <= 3.0 * ring.radius);
        ok.then_some(ring)
    }
}

/// Sector-median-point reconstruction of one stem from a height-normalized
/// cloud, walking bin by bin up from breast height and then down from it.
pub fn reconstruct_stem_smp(cloud_hn: &PointCloud, det: &StemDetection, cfg: &SmpConfig) -> Result<StemModel> {
    if !(cfg.bin > 0.0) || cfg.sectors < 3 || !(cfg.search_factor > 1.0) {
        return Err(Error::InvalidArgument(format!("bad stem reconstruction config {cfg:?}")));
    }
    let top = cfg.max_height.unwrap_or(f64::INFINITY);
    let mut by_bin: std::collections::HashMap<i64, Vec<Point3>> = Default::default();
    for p in &cloud_hn.points {
        if p.z >= cfg.start_height && p.z < top {
            by_bin.entry((p.z / cfg.bin).floor() as i64).or_default().push(*p);
        }
    }
    let w = Walker { cfg, by_bin };
    let k0 = (cfg.breast_height / cfg.bin).floor() as i64;
    let first = w
        .ring(k0, det.location, det.radius)
        .ok_or_else(|| Error::Reconstruction(format!("no ring at breast height for stem at {:?}", det.location)))?;

    let mut up = vec![first.clone()];
    let (mut k, mut missed) = (k0 + 1, 0);
    while ((k + 1) as f64) * cfg.bin <= top && missed <= cfg.max_gap {
        let prev = up.last().unwrap();
        match w.ring(k, prev.center, prev.radius) {
            Some(r) => {
                up.push(r);
                missed = 0;
            }
            None => missed += 1,
        }
        k += 1;
    }
    let mut down = Vec::new();
    let (mut k, mut missed) = (k0 - 1, 0);
    let mut prev = first;
    while k as f64 * cfg.bin >= cfg.start_height - 1e-12 && missed <= cfg.max_gap {
        match w.ring(k, prev.center, prev.radius) {
            Some(r) => {
                prev = r.clone();
                down.push(r);
                missed = 0;
            }
            None => missed += 1,
        }
        k -= 1;
    }
    down.reverse();
    down.extend(up);
    if down.len() < 2 {
        return Err(Error::Reconstruction(format!(
            "only {} ring(s) for stem at {:?}",
            down.len(),
            det.location
        )));
    }
    Ok(StemModel { rings: down, sectors: cfg.sectors })
}

/// Reconstructs every detection in parallel; results follow detection order.
pub fn reconstruct_stems(cloud_hn: &PointCloud, dets: &[StemDetection], cfg: &SmpConfig) -> Vec<Result<StemModel>> {
    dets.par_iter().map(|d| reconstruct_stem_smp(cloud_hn, d, cfg)).collect()
}

/// Sum of conic frusta between consecutive rings.
pub fn stem_volume(model: &StemModel) -> Result<f64> {
    if model.rings.len() < 2 {
        return Err(Error::Reconstruction(format!("{} ring(s); need at least 2", model.rings.len())));
    }
    Ok(model
        .rings
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0].radius, w[1].radius);
            PI * (w[1].height - w[0].height) / 3.0 * (a * a + a * b + b * b)
        })
        .sum())
}

/// `per_ring` evenly spaced points on each ring circle, ring by ring.
pub fn stem_surface_points(model: &StemModel, per_ring: usize) -> Vec<Point3> {
    model
        .rings
        .iter()
        .flat_map(|r| {
            (0..per_ring).map(move |i| {
                let a = 2.0 * PI * i as f64 / per_ring as f64;
                Point3::new(r.center[0] + r.radius * a.cos(), r.center[1] + r.radius * a.sin(), r.height)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::sample_stem;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(x: f64, y: f64, r: f64) -> StemDetection {
        StemDetection { location: [x, y], radius: r, inlier_count: 20, rms_residual: 0.0 }
    }

    fn stem(r: f64, len: f64, taper: f64, lean: f64) -> (PointCloud, crate::synthgen::TreeTruth) {
        let (p, t) = sample_stem(r, len, taper, lean, 4000.0, 11);
        (p.into_iter().collect(), t)
    }

    #[test]
    fn cylinder_rings_match_radius() {
        let (c, _) = stem(0.2, 10.0, 0.0, 0.0);
        let m = reconstruct_stem_smp(&c, &det(0.0, 0.0, 0.2), &SmpConfig::default()).unwrap();
        assert!(m.rings.len() >= 35, "{}", m.rings.len());
        for r in &m.rings {
            assert!((r.radius - 0.2).abs() < 1e-3, "{}", r.radius);
        }
        for w in m.rings.windows(2) {
            assert!(w[1].height > w[0].height);
        }
    }

    #[test]
    fn tapered_radii_do_not_grow() {
        let (c, t) = stem(0.2, 10.0, 0.5, 0.0);
        let m = reconstruct_stem_smp(&c, &det(0.0, 0.0, 0.2), &SmpConfig::default()).unwrap();
        for w in m.rings.windows(2) {
            assert!(w[1].radius <= w[0].radius + 2e-3);
        }
        for r in &m.rings {
            assert!((r.radius - t.radius_at(r.height, 0.5)).abs() < 3e-3);
        }
    }

    #[test]
    fn leaning_stem_tracks_axis() {
        let (c, t) = stem(0.2, 10.0, 0.0, 5.0);
        let m = reconstruct_stem_smp(&c, &det(0.0, 0.0, 0.2), &SmpConfig::default()).unwrap();
        assert!(m.rings.len() >= 30);
        for r in &m.rings {
            let a = t.axis_at(r.height);
            assert!((r.center[0] - a[0]).hypot(r.center[1] - a[1]) < 0.125);
        }
    }

    #[test]
    fn volume_of_cylinder_is_exact() {
        let rings = (0..5)
            .map(|i| Ring { height: i as f64 * 0.5, center: [0.0, 0.0], radius: 0.3, medians: Vec::new() })
            .collect();
        let m = StemModel { rings, sectors: 36 };
        let v = stem_volume(&m).unwrap();
        let want = PI * 0.09 * 2.0;
        assert!((v - want).abs() <= 1e-12 * want);
        let one = StemModel { rings: m.rings[..1].to_vec(), sectors: 36 };
        assert!(stem_volume(&one).is_err());
    }

    #[test]
    fn noiseless_volume_near_truth() {
        let (c, t) = stem(0.25, 12.0, 0.4, 0.0);
        let cfg = SmpConfig { start_height: 0.0, ..SmpConfig::default() };
        let v = stem_volume(&reconstruct_stem_smp(&c, &det(0.0, 0.0, 0.25), &cfg).unwrap()).unwrap();
        assert!((v - t.volume_m3).abs() / t.volume_m3 < 0.05, "{v} vs {}", t.volume_m3);
    }

    #[test]
    fn short_gaps_are_bridged() {
        let (c, _) = stem(0.2, 10.0, 0.0, 0.0);
        // an occluded half-meter band: two empty bins above breast height
        let holed: PointCloud = c.points.iter().filter(|p| !(3.0..3.5).contains(&p.z)).copied().collect();
        let top = |gap| {
            let cfg = SmpConfig { max_gap: gap, ..SmpConfig::default() };
            reconstruct_stem_smp(&holed, &det(0.0, 0.0, 0.2), &cfg).unwrap().rings.last().unwrap().height
        };
        assert!(top(0) < 3.0);
        assert!(top(2) > 9.0);
        assert!(top(1) < 3.0);
    }

    #[test]
    fn missing_stem_fails() {
        let c: PointCloud = (0..100).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            reconstruct_stem_smp(&c, &det(50.0, 50.0, 0.2), &SmpConfig::default()),
            Err(Error::Reconstruction(_))
        ));
    }

    #[test]
    fn surface_points() {
        let m = StemModel {
            rings: vec![Ring { height: 1.0, center: [1.0, 2.0], radius: 0.5, medians: Vec::new() }],
            sectors: 36,
        };
        let p = stem_surface_points(&m, 4);
        assert_eq!(p.len(), 4);
        assert!((p[1].x - 1.0).abs() < 1e-12 && (p[1].y - 2.5).abs() < 1e-12);
        for q in &p {
            assert!(((q.x - 1.0).hypot(q.y - 2.0) - 0.5).abs() < 1e-12);
        }
        let (c, _) = stem(0.2, 5.0, 0.0, 0.0);
        let m = reconstruct_stem_smp(&c, &det(0.0, 0.0, 0.2), &SmpConfig::default()).unwrap();
        let s: PointCloud = stem_surface_points(&m, 16).into_iter().collect();
        assert_eq!(crate::metrics::chamfer(&s, &s).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn medians_ignore_point_order(seed in 0u64..1000) {
            let (mut p, _) = sample_stem(0.2, 4.0, 0.3, 0.0, 1500.0, seed);
            let a = reconstruct_stem_smp(&p.iter().copied().collect(), &det(0.0, 0.0, 0.2), &SmpConfig::default()).unwrap();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = reconstruct_stem_smp(&p.into_iter().collect(), &det(0.0, 0.0, 0.2), &SmpConfig::default()).unwrap();
            prop_assert_eq!(a.rings.len(), b.rings.len());
            for (x, y) in a.rings.iter().zip(&b.rings) {
                prop_assert_eq!(&x.medians, &y.medians);
            }
        }
    }
}
