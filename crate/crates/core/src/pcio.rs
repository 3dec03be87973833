//! Point clouds, ASCII file I/O, block tiling, block normalization and
//! downsampling.
//!
//! Tiling uses a lattice anchored at the cloud's minimum corner. Cells are
//! half-open `[origin, origin + edge)` per axis, except that the global
//! maximum is folded into the last cell so that no point is dropped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::{Add, Mul, Sub};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dist(&self, other: &Point3) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn dist2(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn axis(&self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn min(self, o: Point3) -> Point3 {
        Point3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Point3) -> Point3 {
        Point3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub label: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud {
            points,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounds `(min, max)`, or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(
            self.points
                .iter()
                .fold((first, first), |(lo, hi), p| (lo.min(*p), hi.max(*p))),
        )
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let n = self.points.len() as f64;
        let s = self
            .points
            .iter()
            .fold(Point3::ZERO, |acc, p| acc + *p);
        Some(s * (1.0 / n))
    }

    /// Area of the planimetric bounding rectangle.
    pub fn footprint_area(&self) -> f64 {
        match self.bounds() {
            Some((lo, hi)) => (hi.x - lo.x) * (hi.y - lo.y),
            None => 0.0,
        }
    }
}

impl FromIterator<Point3> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point3>>(iter: I) -> Self {
        PointCloud::new(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    XyzAscii,
    PlyAscii,
}

impl Format {
    /// Picks a format from the file extension; anything but `.ply` is XYZ.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ply") => Format::PlyAscii,
            _ => Format::XyzAscii,
        }
    }
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz" | "xyz-ascii" => Ok(Format::XyzAscii),
            "ply" | "ply-ascii" => Ok(Format::PlyAscii),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::XyzAscii => "xyz-ascii",
            Format::PlyAscii => "ply-ascii",
        })
    }
}

pub fn read_points(path: &Path, format: Format) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let points = match format {
        Format::XyzAscii => read_xyz(path, reader)?,
        Format::PlyAscii => read_ply(path, reader)?,
    };
    if points.is_empty() {
        return Err(Error::EmptyCloud(path.display().to_string()));
    }
    let label = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    Ok(PointCloud { points, label })
}

fn parse_point(path: &Path, lineno: usize, fields: &[&str]) -> Result<Point3> {
    let parse = |s: &str| -> Result<f64> {
        let v: f64 = s.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: format!("not a number: {s:?}"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("non-finite coordinate {s:?}"),
            });
        }
        Ok(v)
    };
    Ok(Point3::new(parse(fields[0])?, parse(fields[1])?, parse(fields[2])?))
}

fn read_xyz(path: &Path, reader: impl BufRead) -> Result<Vec<Point3>> {
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        points.push(parse_point(path, i + 1, &fields)?);
    }
    Ok(points)
}

fn read_ply(path: &Path, reader: impl BufRead) -> Result<Vec<Point3>> {
    let perr = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut lines = reader.lines().enumerate();
    let mut next_line = || -> Result<Option<(usize, String)>> {
        match lines.next() {
            Some((i, l)) => Ok(Some((i + 1, l.map_err(|e| Error::io(path, e))?))),
            None => Ok(None),
        }
    };

    match next_line()? {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(perr(1, "missing 'ply' magic")),
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut vertex_props: Vec<String> = Vec::new();
    // element blocks declared before the vertex element, as (count, props)
    let mut skip_before: usize = 0;
    let mut seen_vertex = false;
    loop {
        let (ln, l) = next_line()?.ok_or_else(|| perr(0, "unterminated header"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(perr(ln, "only ascii PLY is supported"));
                }
            }
            ["element", name, count] => {
                let count: usize = count.parse().map_err(|_| perr(ln, "bad element count"))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(count);
                    seen_vertex = true;
                } else if !seen_vertex {
                    skip_before += count;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(perr(ln, "list properties on vertex are not supported"));
            }
            ["property", _ty, name] if in_vertex => vertex_props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = vertex_count.ok_or_else(|| perr(0, "no vertex element"))?;
    let idx = |n: &str| vertex_props.iter().position(|p| p == n);
    let (ix, iy, iz) = match (idx("x"), idx("y"), idx("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(perr(0, "vertex element lacks x/y/z")),
    };
    for _ in 0..skip_before {
        next_line()?.ok_or_else(|| perr(0, "truncated element data"))?;
    }
    let mut points = Vec::with_capacity(count);
    while points.len() < count {
        let (ln, l) = next_line()?.ok_or_else(|| perr(0, "fewer vertices than declared"))?;
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields.len() < vertex_props.len() {
            return Err(perr(ln, "too few vertex fields"));
        }
        points.push(parse_point(path, ln, &[fields[ix], fields[iy], fields[iz]])?);
    }
    Ok(points)
}

/// Writes with shortest round-trip float formatting, so a read recovers the
/// exact same `f64` values.
pub fn write_points(cloud: &PointCloud, path: &Path, format: Format) -> Result<()> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("refusing to write an empty cloud".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if format == Format::PlyAscii {
        write!(
            w,
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
            cloud.len()
        )
        .map_err(io)?;
    }
    for p in &cloud.points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub origin: Point3,
    pub edge: f64,
    pub points: PointCloud,
}

impl Block {
    pub fn center(&self) -> Point3 {
        self.origin + Point3::new(1.0, 1.0, 1.0) * (self.edge * 0.5)
    }
}

/// Integer lattice used by [`tile`] and [`pair_blocks`].
#[derive(Debug, Clone, Copy)]
struct Lattice {
    anchor: Point3,
    edge: f64,
    cells: [i64; 3],
}

impl Lattice {
    fn new(lo: Point3, hi: Point3, edge: f64) -> Self {
        // half-open cells everywhere; the last cell always holds the max corner
        let n = |ext: f64| (ext / edge).floor() as i64 + 1;
        Lattice {
            anchor: lo,
            edge,
            cells: [n(hi.x - lo.x), n(hi.y - lo.y), n(hi.z - lo.z)],
        }
    }

    fn cell(&self, p: &Point3) -> (i64, i64, i64) {
        let c = |v: f64, a: f64, n: i64| (((v - a) / self.edge).floor() as i64).clamp(0, n - 1);
        (
            c(p.x, self.anchor.x, self.cells[0]),
            c(p.y, self.anchor.y, self.cells[1]),
            c(p.z, self.anchor.z, self.cells[2]),
        )
    }

    fn origin(&self, c: (i64, i64, i64)) -> Point3 {
        self.anchor + Point3::new(c.0 as f64, c.1 as f64, c.2 as f64) * self.edge
    }

    fn bin(&self, cloud: &PointCloud) -> BTreeMap<(i64, i64, i64), Vec<Point3>> {
        let mut cells: BTreeMap<_, Vec<Point3>> = BTreeMap::new();
        for p in &cloud.points {
            cells.entry(self.cell(p)).or_default().push(*p);
        }
        cells
    }
}

fn check_edge(edge: f64) -> Result<()> {
    if !(edge > 0.0 && edge.is_finite()) {
        return Err(Error::InvalidArgument(format!("block edge must be > 0, got {edge}")));
    }
    Ok(())
}

/// Splits a cloud into cubic blocks; empty cells are omitted and blocks are
/// ordered by lattice index.
pub fn tile(cloud: &PointCloud, edge: f64) -> Result<Vec<Block>> {
    check_edge(edge)?;
    let Some((lo, hi)) = cloud.bounds() else {
        return Ok(Vec::new());
    };
    let lattice = Lattice::new(lo, hi, edge);
    Ok(lattice
        .bin(cloud)
        .into_iter()
        .map(|(c, pts)| Block {
            origin: lattice.origin(c),
            edge,
            points: PointCloud::new(pts),
        })
        .collect())
}

/// LR/HR blocks sharing one lattice cell.
#[derive(Debug, Clone)]
pub struct PairedBlocks {
    pub pairs: Vec<(Block, Block)>,
    /// Cells populated on only one side.
    pub dropped: usize,
}

pub fn pair_blocks(lr: &PointCloud, hr: &PointCloud, edge: f64) -> Result<PairedBlocks> {
    check_edge(edge)?;
    let (Some((llo, lhi)), Some((hlo, hhi))) = (lr.bounds(), hr.bounds()) else {
        return Err(Error::Dataset("cannot pair an empty cloud".into()));
    };
    let lattice = Lattice::new(llo.min(hlo), lhi.max(hhi), edge);
    let lcells = lattice.bin(lr);
    let mut hcells = lattice.bin(hr);
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (c, lpts) in lcells {
        match hcells.remove(&c) {
            Some(hpts) => {
                let origin = lattice.origin(c);
                pairs.push((
                    Block {
                        origin,
                        edge,
                        points: PointCloud::new(lpts),
                    },
                    Block {
                        origin,
                        edge,
                        points: PointCloud::new(hpts),
                    },
                ));
            }
            None => dropped += 1,
        }
    }
    dropped += hcells.len();
    if pairs.is_empty() {
        return Err(Error::Dataset("no cell holds both LR and HR points".into()));
    }
    Ok(PairedBlocks { pairs, dropped })
}

/// Block points mapped into `[-1, 1]^3` by `(p - center) / half_extent`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedBlock {
    pub points: Vec<Point3>,
    /// Translation that was subtracted: the block centroid for
    /// [`normalize_block`], the cell center for [`normalize_to_cell`].
    pub center: Point3,
    pub half_extent: f64,
}

impl NormalizedBlock {
    pub fn frame(&self) -> Frame {
        Frame {
            center: self.center,
            half_extent: self.half_extent,
        }
    }
}

/// An affine normalization frame shared by blocks of one lattice cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub center: Point3,
    pub half_extent: f64,
}

impl Frame {
    pub fn of_cell(block: &Block) -> Frame {
        Frame {
            center: block.center(),
            half_extent: block.edge * 0.5,
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        (*p - self.center) * (1.0 / self.half_extent)
    }

    pub fn invert(&self, q: &Point3) -> Point3 {
        *q * self.half_extent + self.center
    }

    /// Maps every point into the frame, failing when any coordinate leaves
    /// `[-1, 1]`.
    pub fn normalize(&self, points: &[Point3]) -> Result<NormalizedBlock> {
        let mut out = Vec::with_capacity(points.len());
        for p in points {
            let q = self.apply(p);
            if q.x.abs() > 1.0 || q.y.abs() > 1.0 || q.z.abs() > 1.0 {
                return Err(Error::OutOfRange(format!(
                    "point ({}, {}, {}) is more than {} m from ({}, {}, {})",
                    p.x, p.y, p.z, self.half_extent, self.center.x, self.center.y, self.center.z
                )));
            }
            out.push(q);
        }
        Ok(NormalizedBlock {
            points: out,
            center: self.center,
            half_extent: self.half_extent,
        })
    }
}

/// Centroid-subtracting normalization with the fixed half block edge as
/// divisor.
pub fn normalize_block(block: &Block) -> Result<NormalizedBlock> {
    let center = block
        .points
        .centroid()
        .ok_or_else(|| Error::EmptyCloud("cannot normalize an empty block".into()))?;
    Frame {
        center,
        half_extent: block.edge * 0.5,
    }
    .normalize(&block.points.points)
}

/// Normalization about the lattice cell center. Every point of a block fits,
/// and LR and HR blocks of the same cell share the frame.
pub fn normalize_to_cell(block: &Block) -> Result<NormalizedBlock> {
    if block.points.is_empty() {
        return Err(Error::EmptyCloud("cannot normalize an empty block".into()));
    }
    Frame::of_cell(block).normalize(&block.points.points)
}

pub fn denormalize(nblock: &NormalizedBlock) -> PointCloud {
    let f = nblock.frame();
    nblock.points.iter().map(|q| f.invert(q)).collect()
}

/// Uniform sample without replacement; original order is preserved.
pub fn random_downsample(cloud: &PointCloud, target_count: usize, seed: u64) -> Result<PointCloud> {
    if target_count == 0 || target_count > cloud.len() {
        return Err(Error::InvalidArgument(format!(
            "target count {target_count} must be in 1..={}",
            cloud.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, cloud.len(), target_count).into_vec();
    idx.sort_unstable();
    Ok(PointCloud {
        points: idx.into_iter().map(|i| cloud.points[i]).collect(),
        label: cloud.label.clone(),
    })
}

/// Points per square meter over the planimetric bounding rectangle.
pub fn point_density(cloud: &PointCloud) -> f64 {
    let area = cloud.footprint_area();
    if area > 0.0 {
        cloud.len() as f64 / area
    } else {
        f64::INFINITY
    }
}

pub fn density_downsample(cloud: &PointCloud, target_density: f64, seed: u64) -> Result<PointCloud> {
    let area = cloud.footprint_area();
    if area <= 0.0 {
        return Err(Error::InvalidArgument("cloud has a degenerate footprint".into()));
    }
    if !(target_density > 0.0) {
        return Err(Error::InvalidArgument("target density must be > 0".into()));
    }
    let current = cloud.len() as f64 / area;
    if target_density > current * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "target density {target_density} pts/m² exceeds current density {current:.3} pts/m²"
        )));
    }
    let n = ((target_density * area).round() as usize).clamp(1, cloud.len());
    random_downsample(cloud, n, seed)
}
