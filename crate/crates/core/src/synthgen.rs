//! Deterministic synthetic forest plots: sloped ground, tapered stems and
//! ellipsoidal crown shells, with exact per-tree ground truth.
//!
//! Height and crown diameter follow power laws of DBH that map the DBH range
//! onto the height and crown ranges, with multiplicative lognormal scatter,
//! so `ln DBH = a + b ln(H * CD)` holds up to that scatter.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pcio::{density_downsample, Point3, PointCloud};

pub const BREAST_HEIGHT: f64 = 1.3;

#[derive(Debug, Clone, PartialEq)]
pub struct ForestSpec {
    /// Plot size along x and y (m); the plot starts at the origin.
    pub extent: [f64; 2],
    pub trees: usize,
    pub dbh_cm: (f64, f64),
    pub height_m: (f64, f64),
    /// Fraction of the breast-height radius lost between breast height and the tree top.
    pub taper: f64,
    pub crown_m: (f64, f64),
    /// Vertical crown length as a fraction of tree height.
    pub crown_ratio: f64,
    /// Standard deviation of the log-scale scatter applied to height and crown size.
    pub allometric_scatter: f64,
    pub max_lean_deg: f64,
    pub slope_deg: f64,
    /// HR points per m² of plot footprint.
    pub hr_density: f64,
    /// LR points per m² of plot footprint.
    pub lr_density: f64,
    pub lr_noise: f64,
    pub seed: u64,
}

impl Default for ForestSpec {
    fn default() -> Self {
        ForestSpec {
            extent: [40.0, 40.0],
            trees: 16,
            dbh_cm: (25.0, 60.0),
            height_m: (14.0, 24.0),
            taper: 0.5,
            crown_m: (3.0, 7.0),
            crown_ratio: 0.4,
            allometric_scatter: 0.08,
            max_lean_deg: 0.0,
            slope_deg: 5.0,
            hr_density: 2000.0,
            lr_density: 100.0,
            lr_noise: 0.05,
            seed: 0,
        }
    }
}

impl ForestSpec {
    pub fn validate(&self) -> Result<()> {
        let pos_range = |(a, b): (f64, f64)| a > 0.0 && b >= a && b.is_finite();
        let ok = self.extent.iter().all(|&e| e > 0.0 && e.is_finite())
            && pos_range(self.dbh_cm)
            && pos_range(self.height_m)
            && pos_range(self.crown_m)
            && self.height_m.0 > BREAST_HEIGHT + 0.5
            && (0.0..1.0).contains(&self.taper)
            && self.crown_ratio > 0.0
            && self.crown_ratio < 0.9
            && self.allometric_scatter >= 0.0
            && (0.0..30.0).contains(&self.max_lean_deg)
            && (0.0..45.0).contains(&self.slope_deg.abs())
            && self.hr_density > 0.0
            && self.lr_density > 0.0
            && self.lr_density <= self.hr_density
            && self.lr_noise >= 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("degenerate forest spec: {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.extent[0] * self.extent[1]
    }

    /// Coefficients `(a, b)` of `ln DBH_cm = a + b ln(H_m * CD_m)` implied
    /// by the generator's power laws (no scatter).
    pub fn allometry(&self) -> (f64, f64) {
        let (he, hs) = power_law(self.dbh_cm, self.height_m);
        let (ce, cs) = power_law(self.dbh_cm, self.crown_m);
        let b = 1.0 / (he + ce);
        (-(hs * cs).ln() * b, b)
    }

    pub fn ground_z(&self, x: f64, _y: f64) -> f64 {
        self.slope_deg.to_radians().tan() * x
    }
}

/// `(exponent, scale)` of `y = scale * x^exponent` through both range ends.
fn power_law(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    let e = if x.1 > x.0 { (y.1 / y.0).ln() / (x.1 / x.0).ln() } else { 0.0 };
    (e, y.0 / x.0.powf(e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeTruth {
    pub id: usize,
    /// Stem axis position at breast height.
    pub x: f64,
    pub y: f64,
    pub dbh_cm: f64,
    pub height_m: f64,
    pub crown_m: f64,
    /// Stem volume from the ground to the crown base.
    pub volume_m3: f64,
    pub crown_base_m: f64,
    pub ground_z: f64,
    /// Horizontal axis drift per meter of height.
    pub lean: [f64; 2],
}

impl TreeTruth {
    pub fn radius_at(&self, h: f64, taper: f64) -> f64 {
        self.dbh_cm / 200.0 * (1.0 - taper * (h - BREAST_HEIGHT) / (self.height_m - BREAST_HEIGHT))
    }

    /// Stem axis position at height `h` above ground.
    pub fn axis_at(&self, h: f64) -> [f64; 2] {
        let dh = h - BREAST_HEIGHT;
        [self.x + self.lean[0] * dh, self.y + self.lean[1] * dh]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForestTruth {
    pub trees: Vec<TreeTruth>,
}

impl ForestTruth {
    pub fn locations(&self) -> Vec<[f64; 2]> {
        self.trees.iter().map(|t| [t.x, t.y]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# forestsr truth v1\nid,x,y,dbh_cm,height_m,crown_m,volume_m3\n");
        for t in &self.trees {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                t.id, t.x, t.y, t.dbh_cm, t.height_m, t.crown_m, t.volume_m3
            );
        }
        s
    }
}

/// Frustum volume of a linearly tapering stem between two heights.
fn frustum(r0: f64, r1: f64, h: f64) -> f64 {
    PI * h / 3.0 * (r0 * r0 + r0 * r1 + r1 * r1)
}

/// Surface area of an ellipsoid (Thomsen's approximation).
fn ellipsoid_area(a: f64, b: f64, c: f64) -> f64 {
    let p = 1.6075;
    4.0 * PI * (((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0).powf(1.0 / p)
}

/// Fraction of a spheroid's lower cap kept by the shell (z >= -keep_below * c).
const CROWN_OPEN_BOTTOM: f64 = 0.6;

fn crown_geometry(t: &TreeTruth, crown_ratio: f64) -> (f64, f64, f64) {
    let c = 0.5 * crown_ratio * t.height_m;
    let a = 0.5 * t.crown_m;
    let center = t.ground_z + t.height_m - c;
    (a, c, center)
}

/// Uniform surface sample of a tapered, optionally leaning stem between
/// heights `h0` and `h1` above a ground at `ground_z`.
fn sample_stem_surface(t: &TreeTruth, taper: f64, h0: f64, h1: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let rmax = t.radius_at(h0, taper).max(t.radius_at(h1, taper));
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let h = rng.random_range(h0..=h1);
        let r = t.radius_at(h, taper);
        if rng.random::<f64>() * rmax > r {
            continue;
        }
        let th = rng.random_range(0.0..2.0 * PI);
        let [ax, ay] = t.axis_at(h);
        out.push(Point3::new(ax + r * th.cos(), ay + r * th.sin(), t.ground_z + h));
    }
    out
}

fn sample_crown(t: &TreeTruth, crown_ratio: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let (a, c, cz) = crown_geometry(t, crown_ratio);
    let [cx, cy] = t.axis_at(t.height_m - c);
    let gmax = (a * c).max(a * a);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: [f64; 3] = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len == 0.0 {
            continue;
        }
        let u = [v[0] / len, v[1] / len, v[2] / len];
        if u[2] < -CROWN_OPEN_BOTTOM {
            continue;
        }
        let g = ((a * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * a * u[2]).powi(2)).sqrt();
        if rng.random::<f64>() * gmax > g {
            continue;
        }
        out.push(Point3::new(cx + a * u[0], cy + a * u[1], cz + c * u[2]));
    }
    out
}

/// Stem sample used by reconstruction tests: flat ground at z = 0, surface
/// from the ground to `length`, `points_per_m2` on the bark.
pub fn sample_stem(
    radius_bh: f64,
    length: f64,
    taper: f64,
    lean_deg: f64,
    points_per_m2: f64,
    seed: u64,
) -> (Vec<Point3>, TreeTruth) {
    let lean = lean_deg.to_radians().tan();
    let t = TreeTruth {
        id: 0,
        x: 0.0,
        y: 0.0,
        dbh_cm: radius_bh * 200.0,
        height_m: length,
        crown_m: 0.0,
        volume_m3: 0.0,
        crown_base_m: length,
        ground_z: 0.0,
        lean: [lean, 0.0],
    };
    let r_mean = 0.5 * (t.radius_at(0.0, taper) + t.radius_at(length, taper));
    let n = (2.0 * PI * r_mean * length * points_per_m2).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = sample_stem_surface(&t, taper, 0.0, length, n, &mut rng);
    let volume = frustum(t.radius_at(0.0, taper), t.radius_at(length, taper), length);
    (pts, TreeTruth { volume_m3: volume, ..t })
}

/// Low-resolution view of a dense cloud: density-matched subsampling plus
/// isotropic Gaussian jitter of standard deviation `noise`.
pub fn degrade(hr: &PointCloud, density: f64, noise: f64, seed: u64) -> Result<PointCloud> {
    let mut lr = density_downsample(hr, density, seed ^ 0x6c72)?;
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut nrng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
        for p in &mut lr.points {
            p.x += normal.sample(&mut nrng);
            p.y += normal.sample(&mut nrng);
            p.z += normal.sample(&mut nrng);
        }
    }
    lr.label = Some("lr".into());
    Ok(lr)
}

/// A generated plot.
#[derive(Debug, Clone)]
pub struct Forest {
    pub hr: PointCloud,
    pub lr: PointCloud,
    pub truth: ForestTruth,
}

fn place_trees(spec: &ForestSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let n = spec.trees;
    if n == 0 {
        return Vec::new();
    }
    let aspect = spec.extent[0] / spec.extent[1];
    let nx = ((n as f64 * aspect).sqrt().ceil() as usize).max(1);
    let ny = n.div_ceil(nx);
    let (cx, cy) = (spec.extent[0] / nx as f64, spec.extent[1] / ny as f64);
    let mut cells: Vec<(usize, usize)> = (0..ny).flat_map(|j| (0..nx).map(move |i| (i, j))).collect();
    // drop surplus cells deterministically from a shuffled order
    use rand::seq::SliceRandom;
    cells.shuffle(rng);
    cells.truncate(n);
    cells.sort_unstable_by_key(|&(i, j)| (j, i));
    cells
        .into_iter()
        .map(|(i, j)| {
            let jx = rng.random_range(-0.2..0.2) * cx;
            let jy = rng.random_range(-0.2..0.2) * cy;
            [(i as f64 + 0.5) * cx + jx, (j as f64 + 0.5) * cy + jy]
        })
        .collect()
}

fn make_trees(spec: &ForestSpec, rng: &mut ChaCha8Rng) -> Result<Vec<TreeTruth>> {
    let (he, hs) = power_law(spec.dbh_cm, spec.height_m);
    let (ce, cs) = power_law(spec.dbh_cm, spec.crown_m);
    let scatter = Normal::new(0.0, spec.allometric_scatter.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("allometric scatter: {e}")))?;
    let locations = place_trees(spec, rng);
    locations
        .into_iter()
        .enumerate()
        .map(|(id, [x, y])| {
            let dbh = rng.random_range(spec.dbh_cm.0..=spec.dbh_cm.1);
            let mut eps = || if spec.allometric_scatter > 0.0 { scatter.sample(rng) } else { 0.0 };
            let height = (hs * dbh.powf(he) * eps().exp()).max(BREAST_HEIGHT + 1.0);
            let crown = cs * dbh.powf(ce) * eps().exp();
            let tilt = rng.random_range(0.0..=spec.max_lean_deg).to_radians().tan();
            let az = rng.random_range(0.0..2.0 * PI);
            let crown_len = spec.crown_ratio * height;
            // the stem reaches into the open crown bottom
            let crown_base = height - crown_len * (0.5 + 0.5 * CROWN_OPEN_BOTTOM);
            let mut t = TreeTruth {
                id,
                x,
                y,
                dbh_cm: dbh,
                height_m: height,
                crown_m: crown,
                volume_m3: 0.0,
                crown_base_m: crown_base,
                ground_z: spec.ground_z(x, y),
                lean: [tilt * az.cos(), tilt * az.sin()],
            };
            t.volume_m3 = frustum(t.radius_at(0.0, spec.taper), t.radius_at(crown_base, spec.taper), crown_base);
            Ok(t)
        })
        .collect()
}

fn stem_area(t: &TreeTruth, taper: f64) -> f64 {
    let (r0, r1) = (t.radius_at(0.0, taper), t.radius_at(t.crown_base_m, taper));
    PI * (r0 + r1) * t.crown_base_m
}

fn crown_area(t: &TreeTruth, crown_ratio: f64) -> f64 {
    let (a, c, _) = crown_geometry(t, crown_ratio);
    // the removed bottom cap of a sphere-like shell is proportional to its height
    ellipsoid_area(a, a, c) * (1.0 + CROWN_OPEN_BOTTOM) / 2.0
}

/// Minimum HR points every stem must carry in the breast-height band.
pub const MIN_BAND_POINTS: usize = 12;

pub fn generate(spec: &ForestSpec) -> Result<Forest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let trees = make_trees(spec, &mut rng)?;

    let cos = spec.slope_deg.to_radians().cos();
    let ground_area = spec.area() / cos;
    let stems: Vec<f64> = trees.iter().map(|t| stem_area(t, spec.taper)).collect();
    let crowns: Vec<f64> = trees.iter().map(|t| crown_area(t, spec.crown_ratio)).collect();
    let total_area = ground_area + stems.iter().sum::<f64>() + crowns.iter().sum::<f64>();
    let n_total = spec.hr_density * spec.area();
    let per_area = n_total / total_area;

    // ground, excluding stem footprints
    let n_ground = (ground_area * per_area).round() as usize;
    let mut grng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6772_6f75_6e64);
    let mut hr = Vec::with_capacity(n_total as usize + 8);
    for (x, y) in [(0.0, 0.0), (spec.extent[0], 0.0), (0.0, spec.extent[1]), (spec.extent[0], spec.extent[1])] {
        hr.push(Point3::new(x, y, spec.ground_z(x, y)));
    }
    while hr.len() < n_ground.max(4) {
        let x = grng.random_range(0.0..=spec.extent[0]);
        let y = grng.random_range(0.0..=spec.extent[1]);
        let inside = trees.iter().any(|t| {
            let [ax, ay] = t.axis_at(0.0);
            (x - ax).powi(2) + (y - ay).powi(2) < t.radius_at(0.0, spec.taper).powi(2)
        });
        if !inside {
            hr.push(Point3::new(x, y, spec.ground_z(x, y)));
        }
    }

    let tree_points: Vec<Vec<Point3>> = trees
        .par_iter()
        .map(|t| {
            let mut trng = ChaCha8Rng::seed_from_u64(spec.seed ^ (t.id as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let ns = (stems[t.id] * per_area).round() as usize;
            let nc = (crowns[t.id] * per_area).round() as usize;
            let mut pts = sample_stem_surface(t, spec.taper, 0.0, t.crown_base_m, ns, &mut trng);
            pts.extend(sample_crown(t, spec.crown_ratio, nc, &mut trng));
            pts
        })
        .collect();
    for (t, pts) in trees.iter().zip(&tree_points) {
        let band = pts
            .iter()
            .filter(|p| ((p.z - t.ground_z) - BREAST_HEIGHT).abs() <= 0.1)
            .count();
        if band < MIN_BAND_POINTS {
            return Err(Error::InvalidArgument(format!(
                "HR density too low: tree {} has {band} points at breast height",
                t.id
            )));
        }
        // the scan covers the plot footprint only; crowns overhanging the edge are cut
        hr.extend(
            pts.iter()
                .filter(|p| (0.0..=spec.extent[0]).contains(&p.x) && (0.0..=spec.extent[1]).contains(&p.y)),
        );
    }
    let hr = PointCloud::new(hr).with_label("hr");

    let lr = degrade(&hr, spec.lr_density, spec.lr_noise, spec.seed)?;
    Ok(Forest {
        hr,
        lr,
        truth: ForestTruth { trees },
    })
}

/// Writes `hr.xyz`, `lr.xyz` and `truth.csv` into `dir`.
pub fn write_forest(forest: &Forest, dir: &Path) -> Result<()> {
    use crate::pcio::{write_points, Format};
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_points(&forest.hr, &dir.join("hr.xyz"), Format::XyzAscii)?;
    write_points(&forest.lr, &dir.join("lr.xyz"), Format::XyzAscii)?;
    let p = dir.join("truth.csv");
    std::fs::write(&p, forest.truth.to_csv()).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inventory::fit_circle;

    fn small() -> ForestSpec {
        ForestSpec {
            extent: [10.0, 10.0],
            trees: 1,
            dbh_cm: (40.0, 40.0),
            hr_density: 400.0,
            lr_density: 20.0,
            seed: 5,
            ..ForestSpec::default()
        }
    }

    #[test]
    fn single_tree_truth_and_breast_height_circle() {
        let f = generate(&small()).unwrap();
        let t = &f.truth.trees[0];
        assert_eq!(t.dbh_cm, 40.0);
        let band: Vec<[f64; 2]> = f
            .hr
            .points
            .iter()
            .filter(|p| (p.z - t.ground_z - BREAST_HEIGHT).abs() <= 0.05 && (p.x - t.x).hypot(p.y - t.y) < 1.0)
            .map(|p| [p.x, p.y])
            .collect();
        let fit = fit_circle(&band).unwrap();
        assert!((fit.radius - 0.2).abs() < 0.005, "{}", fit.radius);
    }

    #[test]
    fn reproducible_and_counts() {
        let s = small();
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a.hr, b.hr);
        assert_eq!(a.lr, b.lr);
        let expect = s.lr_density * s.area();
        assert!((a.lr.len() as f64 - expect).abs() <= 1.0);
        let expect = s.hr_density * s.area();
        assert!((a.hr.len() as f64 - expect).abs() / expect < 0.01);
        assert!(a.hr.points.iter().all(|p| (0.0..=s.extent[0]).contains(&p.x) && (0.0..=s.extent[1]).contains(&p.y)));
    }

    #[test]
    fn allometry_is_exact_without_scatter() {
        let s = ForestSpec {
            allometric_scatter: 0.0,
            ..ForestSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = s.allometry();
        for t in make_trees(&s, &mut rng).unwrap() {
            let pred = (a + b * (t.height_m * t.crown_m).ln()).exp();
            assert!((pred - t.dbh_cm).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(generate(&ForestSpec { lr_density: 5000.0, ..small() }).is_err());
        assert!(generate(&ForestSpec { extent: [0.0, 1.0], ..small() }).is_err());
    }
}
