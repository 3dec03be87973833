//! The octree U-Net: encoder, growing decoder, prediction heads, training
//! loss and block-level inference.
//!
//! Channel widths are listed from the finest level (`depth`) up to the
//! coarsest supervised level (`full_depth`). The decoder starts from every
//! cell of the `full_depth` grid and subdivides nodes it deems occupied.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{FeatureMatrix, ParamStore, Real, Tape, Var};
use crate::octree::{decode_codes, neighbor_table, NodeFeature, Octree, OctreeKey};
use crate::pcio::{tile, Frame, NormalizedBlock, Point3, PointCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depth: u8,
    pub full_depth: u8,
    /// Widths from level `depth` down to `full_depth`.
    pub channels: Vec<usize>,
    pub groups: usize,
    pub res_blocks: usize,
    /// Occupancy probability threshold used when growing at inference.
    pub tau: f64,
    pub structure_weight: f64,
    pub regression_weight: f64,
    /// Initial gamma of the last normalization in each residual path.
    pub residual_gamma: f64,
    /// Inference keeps only points within this many finest voxels of an
    /// input point; 0 keeps everything.
    pub support_voxels: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_widths(8, 2, 32, 256)
    }
}

impl ModelConfig {
    /// `base` channels at the finest level, doubling per coarser level up to `cap`.
    pub fn with_widths(depth: u8, full_depth: u8, base: usize, cap: usize) -> Self {
        let n = depth.saturating_sub(full_depth) as usize + 1;
        let channels = (0..n).map(|i| (base << i.min(16)).min(cap)).collect();
        ModelConfig {
            depth,
            full_depth,
            channels,
            groups: 8.min(base),
            res_blocks: 2,
            tau: 0.5,
            structure_weight: 1.0,
            regression_weight: 1.0,
            residual_gamma: 0.1,
            support_voxels: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.full_depth >= 1 && self.depth > self.full_depth && self.depth <= crate::octree::MAX_DEPTH) {
            return bad(format!(
                "need 1 <= full_depth < depth <= 16, got {} and {}",
                self.full_depth, self.depth
            ));
        }
        if self.channels.len() != (self.depth - self.full_depth) as usize + 1 {
            return bad(format!(
                "{} channel widths for levels {}..={}",
                self.channels.len(),
                self.full_depth,
                self.depth
            ));
        }
        if self.groups == 0 || self.channels.iter().any(|&c| c == 0 || c % self.groups != 0) {
            return bad(format!("channel widths {:?} not divisible by {} groups", self.channels, self.groups));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.structure_weight >= 0.0 && self.regression_weight >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.support_voxels >= 0.0 && self.support_voxels.is_finite()) {
            return bad(format!("support_voxels must be finite and >= 0, got {}", self.support_voxels));
        }
        Ok(())
    }

    /// Width at octree level `l`.
    pub fn width(&self, level: u8) -> usize {
        self.channels[(self.depth - level) as usize]
    }

    /// Logit threshold equivalent to `probability > tau`.
    pub fn logit_threshold(&self) -> f64 {
        (self.tau / (1.0 - self.tau)).ln()
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "depth={}", self.depth);
        let _ = writeln!(s, "full_depth={}", self.full_depth);
        let _ = writeln!(s, "channels={}", ch.join(","));
        let _ = writeln!(s, "groups={}", self.groups);
        let _ = writeln!(s, "res_blocks={}", self.res_blocks);
        let _ = writeln!(s, "tau={}", self.tau);
        let _ = writeln!(s, "structure_weight={}", self.structure_weight);
        let _ = writeln!(s, "regression_weight={}", self.regression_weight);
        let _ = writeln!(s, "residual_gamma={}", self.residual_gamma);
        let _ = writeln!(s, "support_voxels={}", self.support_voxels);
        s
    }

    /// Parses `key=value` lines; unknown keys are ignored so the header can
    /// carry other sections.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        let bad = |k: &str, v: &str| Error::CorruptArchive(format!("bad model config value {k}={v}"));
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "depth" => c.depth = v.parse().map_err(|_| bad(k, v))?,
                "full_depth" => c.full_depth = v.parse().map_err(|_| bad(k, v))?,
                "channels" => {
                    c.channels = v
                        .split(',')
                        .map(|x| x.trim().parse().map_err(|_| bad(k, v)))
                        .collect::<Result<_>>()?
                }
                "groups" => c.groups = v.parse().map_err(|_| bad(k, v))?,
                "res_blocks" => c.res_blocks = v.parse().map_err(|_| bad(k, v))?,
                "tau" => c.tau = v.parse().map_err(|_| bad(k, v))?,
                "structure_weight" => c.structure_weight = v.parse().map_err(|_| bad(k, v))?,
                "regression_weight" => c.regression_weight = v.parse().map_err(|_| bad(k, v))?,
                "residual_gamma" => c.residual_gamma = v.parse().map_err(|_| bad(k, v))?,
                "support_voxels" => c.support_voxels = v.parse().map_err(|_| bad(k, v))?,
                _ => {}
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Configuration plus the named parameter set it determines.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn add_conv<T: Real>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, taps: usize, cin: usize, cout: usize) {
    let shape = if taps == 1 { vec![cin, cout] } else { vec![taps, cin, cout] };
    s.fan_in_uniform(&format!("{name}.w"), shape, taps * cin, rng);
    s.zeros(&format!("{name}.b"), vec![cout]);
}

fn add_res_block<T: Real>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c: usize, last_gamma: f64) {
    for j in 0..3 {
        // no conv bias: the normalization right after it would cancel most of it
        s.fan_in_uniform(&format!("{name}.conv{j}.w"), vec![27, c, c], 27 * c, rng);
        let g = if j == 2 { last_gamma } else { 1.0 };
        s.filled(&format!("{name}.norm{j}.g"), vec![c], g);
        s.zeros(&format!("{name}.norm{j}.b"), vec![c]);
    }
}

impl<T: Real> ModelState<T> {
    /// Fresh parameters; names and shapes depend on the config only.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = &config;
        let (d, d0) = (c.depth, c.full_depth);
        add_conv(&mut s, &mut rng, "enc.input", 1, NodeFeature::CHANNELS, c.width(d));
        for l in (d0..=d).rev() {
            if l < d {
                add_conv(&mut s, &mut rng, &format!("enc.{l}.down"), 8, c.width(l + 1), c.width(l));
            }
            for k in 0..c.res_blocks {
                add_res_block(&mut s, &mut rng, &format!("enc.{l}.res{k}"), c.width(l), c.residual_gamma);
            }
        }
        for l in d0..=d {
            if l > d0 {
                add_conv(&mut s, &mut rng, &format!("dec.{l}.up"), 8, c.width(l - 1), c.width(l));
            }
            for k in 0..c.res_blocks {
                add_res_block(&mut s, &mut rng, &format!("dec.{l}.res{k}"), c.width(l), c.residual_gamma);
            }
            add_conv(&mut s, &mut rng, &format!("dec.{l}.occupancy"), 1, c.width(l), 1);
        }
        add_conv(&mut s, &mut rng, "dec.displacement", 1, c.width(d), 3);
        Ok(ModelState { config, params: s })
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

// ---------------------------------------------------------------------------
// forward building blocks

fn param<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::InvalidArgument(format!("model has no parameter {name}")))?;
    Ok(tape.param(store, id))
}

fn conv1_named<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = param(tape, store, &format!("{name}.w"))?;
    let b = param(tape, store, &format!("{name}.b"))?;
    tape.conv1(x, w, b)
}

/// `x + f(x)` with `f = (conv27 -> group norm -> relu) x 3`.
pub fn res_block<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    name: &str,
    groups: usize,
    x: Var,
    table: &Arc<Vec<[i32; 27]>>,
) -> Result<Var> {
    let mut h = x;
    let c = tape.value(x).cols;
    let zero = tape.input(FeatureMatrix::from_vec(0, 1, c, vec![T::zero(); c]));
    for j in 0..3 {
        let w = param(tape, store, &format!("{name}.conv{j}.w"))?;
        h = tape.conv27(h, w, zero, table)?;
        let g = param(tape, store, &format!("{name}.norm{j}.g"))?;
        let bt = param(tape, store, &format!("{name}.norm{j}.b"))?;
        h = tape.group_norm(h, g, bt, groups, 1e-5)?;
        h = tape.relu(h);
    }
    if tape.value(h).cols != tape.value(x).cols {
        return Err(Error::Shape(format!("residual block {name} changes the channel count")));
    }
    tape.add(x, h)
}

fn res_stage<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    prefix: &str,
    x: Var,
    table: &Arc<Vec<[i32; 27]>>,
) -> Result<Var> {
    let mut h = x;
    for k in 0..state.config.res_blocks {
        h = res_block(tape, &state.params, &format!("{prefix}.res{k}"), state.config.groups, h, table)?;
    }
    Ok(h)
}

pub(crate) fn children_table(parents: &[u64], children: &[u64]) -> Vec<[i32; 8]> {
    parents
        .iter()
        .map(|&p| {
            let mut row = [-1i32; 8];
            for (o, slot) in row.iter_mut().enumerate() {
                if let Ok(i) = children.binary_search(&(p << 3 | o as u64)) {
                    *slot = i as i32;
                }
            }
            row
        })
        .collect()
}

pub(crate) fn row_map(codes: &[u64], into: &[u64]) -> Vec<i32> {
    codes
        .iter()
        .map(|c| into.binary_search(c).map_or(-1, |i| i as i32))
        .collect()
}

/// Encoder feature per level, finest first.
pub struct Encoded {
    pub levels: Vec<EncodedLevel>,
}

pub struct EncodedLevel {
    pub level: u8,
    pub codes: Vec<u64>,
    pub features: Var,
}

impl Encoded {
    fn at(&self, level: u8) -> &EncodedLevel {
        self.levels.iter().find(|e| e.level == level).expect("encoder covers every level")
    }
}

pub fn encode<T: Real>(tape: &mut Tape<T>, state: &ModelState<T>, tree: &Octree) -> Result<Encoded> {
    let c = &state.config;
    if tree.depth() != c.depth {
        return Err(Error::InvalidArgument(format!(
            "octree depth {} does not match model depth {}",
            tree.depth(),
            c.depth
        )));
    }
    let d = c.depth;
    let input: Vec<T> = tree.features().iter().flat_map(|f| f.to_array()).map(T::of).collect();
    let rows = tree.node_count(d);
    let x = tape.input(FeatureMatrix::from_vec(d, rows, NodeFeature::CHANNELS, input));
    let mut h = conv1_named(tape, &state.params, "enc.input", x)?;
    let mut levels = Vec::new();
    for l in (c.full_depth..=d).rev() {
        let codes = tree.codes(l).to_vec();
        if l < d {
            let kids = Arc::new(children_table(&codes, tree.codes(l + 1)));
            let w = param(tape, &state.params, &format!("enc.{l}.down.w"))?;
            let b = param(tape, &state.params, &format!("enc.{l}.down.b"))?;
            h = tape.conv_down(h, w, b, &kids)?;
        }
        let table = Arc::new(neighbor_table(&codes, l));
        h = res_stage(tape, state, &format!("enc.{l}"), h, &table)?;
        levels.push(EncodedLevel {
            level: l,
            codes,
            features: h,
        });
    }
    Ok(Encoded { levels })
}

/// One decoder level: candidate nodes, their features and occupancy logits.
pub struct DecodedLevel {
    pub level: u8,
    pub candidates: Vec<u64>,
    pub features: Var,
    pub logits: Var,
}

fn full_grid(level: u8) -> Vec<u64> {
    (0..1u64 << (3 * level as u32)).collect()
}

fn decode_level<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    enc: &Encoded,
    level: u8,
    prev: Option<(&DecodedLevel, &[usize])>,
) -> Result<DecodedLevel> {
    let skip = enc.at(level);
    let (candidates, x) = match prev {
        None => {
            let cand = full_grid(level);
            let map = Arc::new(row_map(&cand, &skip.codes));
            let x = tape.gather(skip.features, &map, level)?;
            (cand, x)
        }
        Some((p, occupied)) => {
            let mut cand = Vec::with_capacity(occupied.len() * 8);
            let mut parents = Vec::with_capacity(occupied.len() * 8);
            for &r in occupied {
                for o in 0..8u8 {
                    cand.push(p.candidates[r] << 3 | o as u64);
                    parents.push((r as u32, o));
                }
            }
            let w = param(tape, &state.params, &format!("dec.{level}.up.w"))?;
            let b = param(tape, &state.params, &format!("dec.{level}.up.b"))?;
            let up = tape.deconv_up(p.features, w, b, &Arc::new(parents))?;
            let map = Arc::new(row_map(&cand, &skip.codes));
            let s = tape.gather(skip.features, &map, level)?;
            (cand, tape.add(up, s)?)
        }
    };
    let table = Arc::new(neighbor_table(&candidates, level));
    let features = res_stage(tape, state, &format!("dec.{level}"), x, &table)?;
    let logits = conv1_named(tape, &state.params, &format!("dec.{level}.occupancy"), features)?;
    Ok(DecodedLevel {
        level,
        candidates,
        features,
        logits,
    })
}

fn displacement_head<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    finest: &DecodedLevel,
    occupied: &[usize],
) -> Result<Var> {
    let map = Arc::new(occupied.iter().map(|&r| r as i32).collect::<Vec<_>>());
    let x = tape.gather(finest.features, &map, finest.level)?;
    let raw = conv1_named(tape, &state.params, "dec.displacement", x)?;
    Ok(tape.squash(raw))
}

/// Teacher-forced decoder output.
pub struct TrainForward {
    pub levels: Vec<DecodedLevel>,
    pub labels: Vec<Arc<Vec<u8>>>,
    pub displacements: Var,
    /// HR leaf mean offsets of the occupied finest nodes, in half voxel edges.
    pub targets: Arc<Vec<f64>>,
}

/// Grows along HR occupancy and supervises every candidate child.
pub fn decode_train<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    enc: &Encoded,
    hr: &Octree,
) -> Result<TrainForward> {
    let c = &state.config;
    if hr.depth() != c.depth {
        return Err(Error::InvalidArgument(format!(
            "reference octree depth {} does not match model depth {}",
            hr.depth(),
            c.depth
        )));
    }
    let mut levels: Vec<DecodedLevel> = Vec::new();
    let mut labels = Vec::new();
    let mut occupied: Vec<usize> = Vec::new();
    for l in c.full_depth..=c.depth {
        let prev = levels.last().map(|p| (p, occupied.as_slice()));
        let lvl = decode_level(tape, state, enc, l, prev)?;
        let lab: Vec<u8> = lvl
            .candidates
            .iter()
            .map(|&code| hr.contains(OctreeKey::new(l, code)) as u8)
            .collect();
        occupied = lab.iter().enumerate().filter(|(_, &y)| y == 1).map(|(i, _)| i).collect();
        labels.push(Arc::new(lab));
        levels.push(lvl);
    }
    let finest = levels.last().expect("at least two levels");
    let displacements = displacement_head(tape, state, finest, &occupied)?;
    let feats = hr.features();
    let mut targets = Vec::with_capacity(occupied.len() * 3);
    for &r in &occupied {
        let key = OctreeKey::new(c.depth, finest.candidates[r]);
        let i = hr.index_of(key).expect("label implies presence");
        targets.extend_from_slice(&feats[i].offset);
    }
    Ok(TrainForward {
        levels,
        labels,
        displacements,
        targets: Arc::new(targets),
    })
}

/// Per-level structure terms (coarsest first), the regression term and
/// their weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub structure: Vec<f64>,
    pub regression: f64,
}

/// Records the combined loss on the tape.
pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    fwd: &TrainForward,
) -> Result<(Var, LossBreakdown)> {
    let mut terms = Vec::new();
    let mut structure = Vec::new();
    for (lvl, lab) in fwd.levels.iter().zip(&fwd.labels) {
        let l = tape.balanced_bce(lvl.logits, lab)?;
        structure.push(tape.value(l).scalar().f64());
        terms.push((l, config.structure_weight));
    }
    let target: Arc<Vec<T>> = Arc::new(fwd.targets.iter().map(|&v| T::of(v)).collect());
    let r = tape.disp_mse(fwd.displacements, &target)?;
    let regression = tape.value(r).scalar().f64();
    terms.push((r, config.regression_weight));
    let total = tape.weighted_sum(&terms)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).scalar().f64(),
        structure,
        regression,
    };
    Ok((total, breakdown))
}

/// Evaluates the loss from plain values: logits and labels per level, and
/// finest displacements with their targets (both in half voxel edges).
pub fn loss(
    logits: &[Vec<f64>],
    labels: &[Vec<u8>],
    displacements: &[[f64; 3]],
    targets: &[[f64; 3]],
    config: &ModelConfig,
) -> Result<LossBreakdown> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logit levels for {} label levels", logits.len(), labels.len())));
    }
    let mut tape = Tape::<f64>::new();
    let mut terms = Vec::new();
    let mut structure = Vec::new();
    for (z, y) in logits.iter().zip(labels) {
        let v = tape.input(FeatureMatrix::from_vec(0, z.len(), 1, z.clone()));
        let l = tape.balanced_bce(v, &Arc::new(y.clone()))?;
        structure.push(tape.value(l).scalar());
        terms.push((l, config.structure_weight));
    }
    let flat: Vec<f64> = displacements.iter().flatten().copied().collect();
    let d = tape.input(FeatureMatrix::from_vec(0, displacements.len(), 3, flat));
    let t = Arc::new(targets.iter().flatten().copied().collect::<Vec<f64>>());
    let r = tape.disp_mse(d, &t)?;
    let regression = tape.value(r).scalar();
    terms.push((r, config.regression_weight));
    let total = tape.weighted_sum(&terms)?;
    Ok(LossBreakdown {
        total: tape.value(total).scalar(),
        structure,
        regression,
    })
}

/// One training sample with its tape, ready for `backward`.
pub struct TrainStep<T: Real> {
    pub tape: Tape<T>,
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

pub fn forward_train<T: Real>(state: &ModelState<T>, lr: &Octree, hr: &Octree) -> Result<TrainStep<T>> {
    let mut tape = Tape::new();
    let enc = encode(&mut tape, state, lr)?;
    let fwd = decode_train(&mut tape, state, &enc, hr)?;
    let (loss, breakdown) = loss_on_tape(&mut tape, &state.config, &fwd)?;
    Ok(TrainStep { tape, loss, breakdown })
}

/// Occupied codes per level (index = level; empty above `full_depth`) and
/// one displacement per finest occupied node.
#[derive(Debug, Clone, PartialEq)]
pub struct Growth {
    pub depth: u8,
    pub occupied: Vec<Vec<u64>>,
    pub displacements: Vec<[f64; 3]>,
}

impl Growth {
    pub fn points(&self) -> Vec<Point3> {
        decode_codes(&self.occupied[self.depth as usize], self.depth, &self.displacements)
    }
}

/// Grows by predicted occupancy (`probability > tau`).
pub fn decode_infer<T: Real>(tape: &mut Tape<T>, state: &ModelState<T>, enc: &Encoded) -> Result<Growth> {
    let c = &state.config;
    let thr = c.logit_threshold();
    let mut occupied_codes = vec![Vec::new(); c.depth as usize + 1];
    let mut prev: Option<DecodedLevel> = None;
    let mut occupied: Vec<usize> = Vec::new();
    for l in c.full_depth..=c.depth {
        let lvl = decode_level(tape, state, enc, l, prev.as_ref().map(|p| (p, occupied.as_slice())))?;
        let z = &tape.value(lvl.logits).data;
        occupied = z
            .iter()
            .enumerate()
            .filter(|(_, &v)| v.f64() > thr)
            .map(|(i, _)| i)
            .collect();
        if occupied.is_empty() {
            return Err(Error::EmptyGrowth { level: l });
        }
        occupied_codes[l as usize] = occupied.iter().map(|&i| lvl.candidates[i]).collect();
        prev = Some(lvl);
    }
    let finest = prev.expect("at least two levels");
    let disp = displacement_head(tape, state, &finest, &occupied)?;
    let displacements = tape
        .value(disp)
        .data
        .chunks_exact(3)
        .map(|r| [r[0].f64(), r[1].f64(), r[2].f64()])
        .collect();
    Ok(Growth {
        depth: c.depth,
        occupied: occupied_codes,
        displacements,
    })
}

/// Super-resolves one normalized block; the output stays in the block frame.
pub fn infer_block<T: Real>(nblock: &NormalizedBlock, state: &ModelState<T>) -> Result<NormalizedBlock> {
    let tree = Octree::build(&nblock.points, state.config.depth)?;
    let mut tape = Tape::new();
    let enc = encode(&mut tape, state, &tree)?;
    let growth = decode_infer(&mut tape, state, &enc)?;
    let mut points = growth.points();
    if state.config.support_voxels > 0.0 {
        let radius = state.config.support_voxels * 2.0 / (1u64 << state.config.depth) as f64;
        let index = crate::spatial::Index3::new(&nblock.points);
        points.retain(|p| index.nearest(p).1 <= radius);
        if points.is_empty() {
            return Err(Error::EmptyGrowth { level: state.config.depth });
        }
    }
    Ok(NormalizedBlock {
        points,
        center: nblock.center,
        half_extent: nblock.half_extent,
    })
}

/// Per-block outcome of [`super_resolve_report`].
#[derive(Debug, Clone)]
pub struct SrReport {
    pub cloud: PointCloud,
    /// `"origin: reason"` for each block that produced nothing.
    pub failed: Vec<String>,
    pub blocks: usize,
}

pub fn super_resolve_report<T: Real>(cloud: &PointCloud, state: &ModelState<T>, edge: f64) -> Result<SrReport> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("nothing to super-resolve".into()));
    }
    let blocks = tile(cloud, edge)?;
    let results: Vec<Result<NormalizedBlock>> = blocks
        .par_iter()
        .map(|b| {
            let nb = Frame::of_cell(b).normalize(&b.points.points)?;
            infer_block(&nb, state)
        })
        .collect();
    let mut points = Vec::new();
    let mut failed = Vec::new();
    for (b, r) in blocks.iter().zip(results) {
        match r {
            Ok(nb) => points.extend(crate::pcio::denormalize(&nb).points),
            Err(e) => failed.push(format!("({:.3}, {:.3}, {:.3}): {e}", b.origin.x, b.origin.y, b.origin.z)),
        }
    }
    if failed.len() == blocks.len() {
        return Err(Error::Pipeline(failed));
    }
    Ok(SrReport {
        cloud: PointCloud {
            points,
            label: cloud.label.clone(),
        },
        failed,
        blocks: blocks.len(),
    })
}

/// Tiles, super-resolves every block and concatenates the results in block
/// order. Fails only when no block produced output.
pub fn super_resolve<T: Real>(cloud: &PointCloud, state: &ModelState<T>, edge: f64) -> Result<PointCloud> {
    super_resolve_report(cloud, state, edge).map(|r| r.cloud)
}
