//! Linear (pointerless) octree over the normalized cube `[-1, 1]^3`.
//!
//! Nodes are stored as sorted Morton codes per level. A key at level `l`
//! addresses an integer cell `(ix, iy, iz)` in `[0, 2^l)^3`; bit 0 of each
//! octant triple is x, bit 1 is y, bit 2 is z. Only non-empty octants are
//! subdivided, so every non-root key has its parent present one level up.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pcio::{NormalizedBlock, Point3};

pub const MAX_DEPTH: u8 = 16;
/// Slot of the key itself in a 27-neighborhood.
pub const CENTER_SLOT: usize = 13;

fn spread3(v: u32) -> u64 {
    let mut x = (v as u64) & 0x1f_ffff;
    x = (x | x << 32) & 0x1f_0000_0000_ffff;
    x = (x | x << 16) & 0x1f_0000_ff00_00ff;
    x = (x | x << 8) & 0x100f_00f0_0f00_f00f;
    x = (x | x << 4) & 0x10c3_0c30_c30c_30c3;
    x = (x | x << 2) & 0x1249_2492_4924_9249;
    x
}

fn compact3(v: u64) -> u32 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x ^ (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x ^ (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x ^ (x >> 8)) & 0x1f_0000_ff00_00ff;
    x = (x ^ (x >> 16)) & 0x1f_0000_0000_ffff;
    x = (x ^ (x >> 32)) & 0x1f_ffff;
    x as u32
}

pub fn morton_encode(x: u32, y: u32, z: u32) -> u64 {
    spread3(x) | spread3(y) << 1 | spread3(z) << 2
}

pub fn morton_decode(code: u64) -> [u32; 3] {
    [compact3(code), compact3(code >> 1), compact3(code >> 2)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OctreeKey {
    pub level: u8,
    pub code: u64,
}

impl OctreeKey {
    pub const ROOT: OctreeKey = OctreeKey { level: 0, code: 0 };

    pub fn new(level: u8, code: u64) -> Self {
        debug_assert!(level <= MAX_DEPTH && (level == 0 || code >> (3 * level as u32) == 0));
        OctreeKey { level, code }
    }

    pub fn from_coords(level: u8, c: [u32; 3]) -> Self {
        OctreeKey::new(level, morton_encode(c[0], c[1], c[2]))
    }

    pub fn coords(&self) -> [u32; 3] {
        morton_decode(self.code)
    }

    pub fn octant(&self) -> usize {
        (self.code & 7) as usize
    }

    pub fn parent(&self) -> Result<OctreeKey> {
        if self.level == 0 {
            return Err(Error::InvalidArgument("the root has no parent".into()));
        }
        Ok(OctreeKey::new(self.level - 1, self.code >> 3))
    }

    pub fn children(&self) -> [OctreeKey; 8] {
        std::array::from_fn(|i| OctreeKey::new(self.level + 1, self.code << 3 | i as u64))
    }

    /// Edge length of the voxel in normalized units.
    pub fn edge(&self) -> f64 {
        voxel_edge(self.level)
    }

    pub fn center(&self) -> Point3 {
        let e = self.edge();
        let [x, y, z] = self.coords();
        Point3::new(
            -1.0 + (x as f64 + 0.5) * e,
            -1.0 + (y as f64 + 0.5) * e,
            -1.0 + (z as f64 + 0.5) * e,
        )
    }

    /// Closed-cube containment test.
    pub fn contains(&self, p: &Point3) -> bool {
        let c = self.center();
        let h = self.edge() * 0.5;
        (p.x - c.x).abs() <= h && (p.y - c.y).abs() <= h && (p.z - c.z).abs() <= h
    }
}

pub fn voxel_edge(level: u8) -> f64 {
    2.0 / (1u64 << level) as f64
}

pub fn voxel_center(key: OctreeKey) -> Point3 {
    key.center()
}

pub fn child_keys(key: OctreeKey) -> [OctreeKey; 8] {
    key.children()
}

pub fn parent_key(key: OctreeKey) -> Result<OctreeKey> {
    key.parent()
}

/// Integer cell of a normalized point at `level`; boundaries go to the
/// higher cell and `+1` folds into the last one.
pub fn quantize(p: &Point3, level: u8) -> [u32; 3] {
    let n = (1u64 << level) as f64;
    let q = |v: f64| (((v + 1.0) * 0.5 * n).floor()).clamp(0.0, n - 1.0) as u32;
    [q(p.x), q(p.y), q(p.z)]
}

/// Raw input feature of a populated leaf.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeFeature {
    /// Mean point position relative to the voxel center, in half voxel edges.
    pub offset: [f64; 3],
    pub occupancy: f64,
}

impl NodeFeature {
    pub const CHANNELS: usize = 4;

    pub fn to_array(&self) -> [f64; 4] {
        [self.offset[0], self.offset[1], self.offset[2], self.occupancy]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Octree {
    depth: u8,
    levels: Vec<Vec<u64>>,
    features: Vec<NodeFeature>,
    leaf_start: Vec<u32>,
    leaf_points: Vec<u32>,
}

pub fn build_octree(nblock: &NormalizedBlock, depth: u8) -> Result<Octree> {
    Octree::build(&nblock.points, depth)
}

impl Octree {
    pub fn build(points: &[Point3], depth: u8) -> Result<Octree> {
        if points.is_empty() {
            return Err(Error::EmptyCloud("cannot build an octree over no points".into()));
        }
        if !(1..=MAX_DEPTH).contains(&depth) {
            return Err(Error::InvalidArgument(format!("octree depth {depth} outside 1..={MAX_DEPTH}")));
        }
        let mut tagged: Vec<(u64, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let [x, y, z] = quantize(p, depth);
                (morton_encode(x, y, z), i as u32)
            })
            .collect();
        tagged.sort_unstable();

        let mut leaves = Vec::new();
        let mut leaf_start = Vec::new();
        let mut leaf_points = Vec::with_capacity(tagged.len());
        for (k, (code, idx)) in tagged.iter().enumerate() {
            if k == 0 || tagged[k - 1].0 != *code {
                leaves.push(*code);
                leaf_start.push(leaf_points.len() as u32);
            }
            leaf_points.push(*idx);
        }
        leaf_start.push(leaf_points.len() as u32);

        let features = leaves
            .iter()
            .enumerate()
            .map(|(i, &code)| {
                let key = OctreeKey::new(depth, code);
                let c = key.center();
                let half = key.edge() * 0.5;
                let members = &leaf_points[leaf_start[i] as usize..leaf_start[i + 1] as usize];
                let mut s = [0.0f64; 3];
                for &pi in members {
                    let p = points[pi as usize];
                    s[0] += p.x - c.x;
                    s[1] += p.y - c.y;
                    s[2] += p.z - c.z;
                }
                let n = members.len() as f64 * half;
                NodeFeature {
                    offset: s.map(|v| (v / n).clamp(-1.0, 1.0)),
                    occupancy: 1.0,
                }
            })
            .collect();

        let mut levels = vec![Vec::new(); depth as usize + 1];
        levels[depth as usize] = leaves;
        for l in (0..depth as usize).rev() {
            let mut up: Vec<u64> = levels[l + 1].iter().map(|c| c >> 3).collect();
            up.dedup();
            levels[l] = up;
        }
        Ok(Octree {
            depth,
            levels,
            features,
            leaf_start,
            leaf_points,
        })
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    /// Sorted Morton codes of the non-empty nodes at `level`.
    pub fn codes(&self, level: u8) -> &[u64] {
        &self.levels[level as usize]
    }

    pub fn keys(&self, level: u8) -> impl Iterator<Item = OctreeKey> + '_ {
        self.codes(level).iter().map(move |&c| OctreeKey::new(level, c))
    }

    pub fn node_count(&self, level: u8) -> usize {
        self.levels[level as usize].len()
    }

    pub fn total_nodes(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn index_of(&self, key: OctreeKey) -> Option<usize> {
        if key.level > self.depth {
            return None;
        }
        self.codes(key.level).binary_search(&key.code).ok()
    }

    pub fn contains(&self, key: OctreeKey) -> bool {
        self.index_of(key).is_some()
    }

    /// Input features of the finest-level nodes, aligned with `codes(depth)`.
    pub fn features(&self) -> &[NodeFeature] {
        &self.features
    }

    /// Indices (into the source point slice) of the points in leaf `i`.
    pub fn leaf_points(&self, i: usize) -> &[u32] {
        &self.leaf_points[self.leaf_start[i] as usize..self.leaf_start[i + 1] as usize]
    }

    pub fn neighbors27(&self, key: OctreeKey) -> [Option<OctreeKey>; 27] {
        let codes = self.codes(key.level);
        let mut out = [None; 27];
        for (s, slot) in neighbor_slots(key).into_iter().enumerate() {
            if let Some(k) = slot {
                if codes.binary_search(&k.code).is_ok() {
                    out[s] = Some(k);
                }
            }
        }
        out
    }

    /// Text dump, one node per line: `level code cx cy cz [features]`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for l in 0..=self.depth {
            for (i, key) in self.keys(l).enumerate() {
                let c = key.center();
                let _ = write!(s, "{} {} {:.9} {:.9} {:.9}", l, key.code, c.x, c.y, c.z);
                if l == self.depth {
                    let f = self.features[i].to_array();
                    let _ = write!(s, " {:.9} {:.9} {:.9} {:.1}", f[0], f[1], f[2], f[3]);
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Same-level keys at offsets in `{-1, 0, 1}^3`, slot `9*(dz+1) + 3*(dy+1) + (dx+1)`;
/// `None` where the offset leaves the cube.
pub fn neighbor_slots(key: OctreeKey) -> [Option<OctreeKey>; 27] {
    let n = 1i64 << key.level;
    let [x, y, z] = key.coords().map(|v| v as i64);
    let mut out = [None; 27];
    for dz in -1..=1i64 {
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let (a, b, c) = (x + dx, y + dy, z + dz);
                if (0..n).contains(&a) && (0..n).contains(&b) && (0..n).contains(&c) {
                    let s = (9 * (dz + 1) + 3 * (dy + 1) + dx + 1) as usize;
                    out[s] = Some(OctreeKey::from_coords(key.level, [a as u32, b as u32, c as u32]));
                }
            }
        }
    }
    out
}

pub fn neighbors27(key: OctreeKey, tree: &Octree) -> [Option<OctreeKey>; 27] {
    tree.neighbors27(key)
}

/// Row-index neighbor table over a sorted code list: entry `[n][s]` is the
/// row of the slot-`s` neighbor of row `n`, or `-1`.
pub fn neighbor_table(codes: &[u64], level: u8) -> Vec<[i32; 27]> {
    codes
        .iter()
        .map(|&c| {
            let mut row = [-1i32; 27];
            for (s, slot) in neighbor_slots(OctreeKey::new(level, c)).into_iter().enumerate() {
                if let Some(k) = slot {
                    if let Ok(i) = codes.binary_search(&k.code) {
                        row[s] = i as i32;
                    }
                }
            }
            row
        })
        .collect()
}

/// Occupancy labels: 1 where the candidate is non-empty in `hr`.
pub fn gt_labels(candidates: &[OctreeKey], hr: &Octree) -> Result<Vec<u8>> {
    candidates
        .iter()
        .map(|k| {
            if k.level > hr.depth() {
                return Err(Error::InvalidArgument(format!(
                    "candidate level {} exceeds reference depth {}",
                    k.level,
                    hr.depth()
                )));
            }
            Ok(hr.contains(*k) as u8)
        })
        .collect()
}

/// One point per finest node: center plus displacement in half voxel edges.
pub fn decode_points(tree: &Octree, displacements: &[[f64; 3]]) -> Result<Vec<Point3>> {
    let d = tree.depth();
    if displacements.len() != tree.node_count(d) {
        return Err(Error::InvalidArgument(format!(
            "{} displacements for {} finest nodes",
            displacements.len(),
            tree.node_count(d)
        )));
    }
    Ok(decode_codes(tree.codes(d), d, displacements))
}

pub(crate) fn decode_codes(codes: &[u64], level: u8, displacements: &[[f64; 3]]) -> Vec<Point3> {
    let half = voxel_edge(level) * 0.5;
    codes
        .iter()
        .zip(displacements)
        .map(|(&c, disp)| {
            let ctr = OctreeKey::new(level, c).center();
            ctr + Point3::new(disp[0], disp[1], disp[2]) * half
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                )
            })
            .collect()
    }

    #[test]
    fn morton_round_trip() {
        for &(x, y, z) in &[(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (65535, 3, 40000), (0x1f_ffff, 0, 0x1f_ffff)] {
            assert_eq!(morton_decode(morton_encode(x, y, z)), [x, y, z]);
        }
        assert_eq!(morton_encode(1, 0, 0), 1);
        assert_eq!(morton_encode(0, 1, 0), 2);
        assert_eq!(morton_encode(0, 0, 1), 4);
    }

    #[test]
    fn single_point_gives_one_path() {
        let t = Octree::build(&[Point3::ZERO], 5).unwrap();
        for l in 0..=5 {
            assert_eq!(t.node_count(l), 1);
        }
        assert_eq!(t.total_nodes(), 6);
    }

    #[test]
    fn octant_centers_fill_level_one() {
        let pts: Vec<Point3> = OctreeKey::ROOT.children().iter().map(|k| k.center()).collect();
        let t = Octree::build(&pts, 1).unwrap();
        assert_eq!(t.node_count(0), 1);
        assert_eq!(t.node_count(1), 8);
    }

    #[test]
    fn voxel_center_examples() {
        assert_eq!(OctreeKey::ROOT.center(), Point3::ZERO);
        assert_eq!(OctreeKey::new(1, 0).center(), Point3::new(-0.5, -0.5, -0.5));
        assert_eq!(voxel_edge(8), 0.0078125);
        assert_eq!(10.0 / 2.0 * voxel_edge(8), 0.0390625);
    }

    #[test]
    fn root_children_and_parent() {
        let kids = OctreeKey::ROOT.children();
        assert_eq!(kids.map(|k| k.code), [0, 1, 2, 3, 4, 5, 6, 7]);
        assert!(OctreeKey::ROOT.parent().is_err());
    }

    #[test]
    fn children_inside_parent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let level = rng.random_range(0..10u8);
            let n = 1u32 << level;
            let k = OctreeKey::from_coords(level, [rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n)]);
            for c in k.children() {
                assert_eq!(c.parent().unwrap(), k);
                let ctr = c.center();
                let h = c.edge() * 0.5;
                for corner in [-1.0, 1.0] {
                    assert!(k.contains(&(ctr + Point3::new(corner, corner, corner) * h)));
                }
                assert_eq!(c.edge() * 2.0, k.edge());
            }
        }
    }

    #[test]
    fn neighbors_of_isolated_and_full_trees() {
        let t = Octree::build(&[Point3::new(0.1, 0.1, 0.1)], 4).unwrap();
        let key = t.keys(4).next().unwrap();
        let nb = t.neighbors27(key);
        assert_eq!(nb.iter().filter(|s| s.is_some()).count(), 1);
        assert_eq!(nb[CENTER_SLOT], Some(key));

        let pts: Vec<Point3> = OctreeKey::ROOT.children().iter().map(|k| k.center()).collect();
        let t = Octree::build(&pts, 1).unwrap();
        // brute force: same-level voxels whose integer coords differ by at most 1
        for key in t.keys(1) {
            let nb = t.neighbors27(key);
            let expected = t
                .keys(1)
                .filter(|o| {
                    let (a, b) = (key.coords(), o.coords());
                    (0..3).all(|i| (a[i] as i64 - b[i] as i64).abs() <= 1)
                })
                .count();
            assert_eq!(expected, 8);
            assert_eq!(nb.iter().filter(|s| s.is_some()).count(), expected);
        }
    }

    #[test]
    fn face_voxel_has_empty_exterior_slots() {
        let t = Octree::build(&[Point3::new(-1.0, 0.0, 0.0)], 3).unwrap();
        let key = t.keys(3).next().unwrap();
        let slots = neighbor_slots(key);
        for dz in 0..3 {
            for dy in 0..3 {
                assert!(slots[9 * dz + 3 * dy].is_none());
            }
        }
    }

    #[test]
    fn labels_match_membership() {
        let hr = Octree::build(&random_points(300, 1), 4).unwrap();
        let all: Vec<OctreeKey> = hr.keys(3).collect();
        assert!(gt_labels(&all, &hr).unwrap().iter().all(|&l| l == 1));

        let mut cands = Vec::new();
        for k in hr.keys(2) {
            cands.extend(k.children());
        }
        let labels = gt_labels(&cands, &hr).unwrap();
        let set: std::collections::HashSet<u64> = hr.codes(3).iter().copied().collect();
        for (k, l) in cands.iter().zip(&labels) {
            assert_eq!(*l == 1, set.contains(&k.code));
        }
        assert!(labels.contains(&0));
        assert!(gt_labels(&[OctreeKey::new(5, 0)], &hr).is_err());

        let empty_region = Octree::build(&[Point3::new(0.9, 0.9, 0.9)], 4).unwrap();
        let far: Vec<OctreeKey> = Octree::build(&[Point3::new(-0.9, -0.9, -0.9)], 4).unwrap().keys(4).collect();
        assert_eq!(gt_labels(&far, &empty_region).unwrap(), vec![0]);
    }

    #[test]
    fn decode_examples() {
        let t = Octree::build(&random_points(50, 2), 3).unwrap();
        let n = t.node_count(3);
        let zero = decode_points(&t, &vec![[0.0; 3]; n]).unwrap();
        for (p, k) in zero.iter().zip(t.keys(3)) {
            assert_eq!(*p, k.center());
        }
        let ones = decode_points(&t, &vec![[1.0; 3]; n]).unwrap();
        for (p, k) in ones.iter().zip(t.keys(3)) {
            let c = k.center();
            let h = k.edge() / 2.0;
            assert!((p.x - (c.x + h)).abs() < 1e-15);
        }
        assert!(decode_points(&t, &[[0.0; 3]]).is_err());
    }

    #[test]
    fn mean_offsets_decode_to_leaf_centroids() {
        let pts = random_points(2000, 4);
        let t = Octree::build(&pts, 4).unwrap();
        let disp: Vec<[f64; 3]> = t.features().iter().map(|f| f.offset).collect();
        let dec = decode_points(&t, &disp).unwrap();
        for (i, p) in dec.iter().enumerate() {
            let m = t.leaf_points(i);
            let c = m.iter().fold(Point3::ZERO, |a, &j| a + pts[j as usize]) * (1.0 / m.len() as f64);
            assert!(p.dist(&c) < 1e-7);
        }
    }

    #[test]
    fn dump_lists_every_node() {
        let t = Octree::build(&random_points(20, 6), 3).unwrap();
        assert_eq!(t.dump().lines().count(), t.total_nodes());
    }

    /// Brute-force voxel binning oracle.
    fn binned(points: &[Point3], depth: u8) -> BTreeMap<u64, Vec<usize>> {
        let n = (1u64 << depth) as f64;
        let edge = 2.0 / n;
        let mut m: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            let mut c = [0u32; 3];
            for a in 0..3 {
                let v = p.axis(a);
                let mut k = 0u32;
                while (k as f64 + 1.0) < n && -1.0 + (k as f64 + 1.0) * edge <= v {
                    k += 1;
                }
                c[a] = k;
            }
            m.entry(morton_encode(c[0], c[1], c[2])).or_default().push(i);
        }
        m
    }

    proptest! {
        #[test]
        fn structure_and_binning(seed in 0u64..10_000, n in 1usize..600, depth in 1u8..7) {
            let pts = random_points(n, seed);
            let t = Octree::build(&pts, depth).unwrap();
            let oracle = binned(&pts, depth);
            let want: Vec<u64> = oracle.keys().copied().collect();
            prop_assert_eq!(t.codes(depth), want.as_slice());
            for (i, members) in oracle.values().enumerate() {
                let mut got: Vec<usize> = t.leaf_points(i).iter().map(|&j| j as usize).collect();
                got.sort_unstable();
                prop_assert_eq!(&got, members);
            }
            for l in 1..=depth {
                prop_assert!(t.codes(l).windows(2).all(|w| w[0] < w[1]));
                for k in t.keys(l) {
                    prop_assert!(t.contains(k.parent().unwrap()));
                }
            }
            prop_assert_eq!(t.node_count(0), 1);
        }
    }
}
