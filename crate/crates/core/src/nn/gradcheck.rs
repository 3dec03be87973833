//! Central finite-difference verification of tape gradients.
//!
//! Analytic gradients are taken in the precision under test; the numeric
//! reference is always evaluated in `f64`.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ParamStore, Parameter, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{children_table, forward_train, ModelConfig, ModelState};
use crate::octree::{neighbor_table, Octree};
use crate::pcio::Point3;

/// A scalar function of a parameter store, recorded on a fresh tape.
pub trait Objective {
    fn eval<T: Real>(&self, store: &ParamStore<T>) -> Result<(Tape<T>, Var)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Entries checked per parameter tensor (all when the tensor is smaller).
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            floor: 1e-4,
            max_entries: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `name[index]: analytic vs numeric` of the worst entry.
    pub worst: String,
    pub checked: usize,
    /// Entries whose ±step evaluations straddle a ReLU kink.
    pub skipped: usize,
}

fn loss_and_signature(obj: &impl Objective, store: &ParamStore<f64>) -> Result<(f64, u64)> {
    let (tape, loss) = obj.eval(store)?;
    Ok((tape.value(loss).scalar(), tape.relu_signature()))
}

/// One sampled parameter entry and its central difference; `None` when the
/// ±step evaluations straddle a ReLU kink.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub numeric: Option<f64>,
}

/// `f64` central differences at up to `max_entries` entries per tensor.
pub fn numeric_gradients(obj: &impl Objective, store: &ParamStore<f64>, cfg: &GradCheckConfig) -> Result<Vec<Probe>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = store.clone();
    let mut out = Vec::new();
    let names: Vec<(String, usize)> = store.iter().map(|p| (p.name.clone(), p.len())).collect();
    for (name, len) in names {
        let id = store.id(&name).expect("name from store");
        let picks: Vec<usize> = if len <= cfg.max_entries {
            (0..len).collect()
        } else {
            sample(&mut rng, len, cfg.max_entries).into_vec()
        };
        for index in picks {
            let orig = store.get(id).value[index];
            probe.get_mut(id).value[index] = orig + cfg.step;
            let (lp, sp) = loss_and_signature(obj, &probe)?;
            probe.get_mut(id).value[index] = orig - cfg.step;
            let (lm, sm) = loss_and_signature(obj, &probe)?;
            probe.get_mut(id).value[index] = orig;
            let numeric = (sp == sm).then(|| (lp - lm) / (2.0 * cfg.step));
            if numeric.is_some_and(|n| !n.is_finite()) {
                return Err(Error::Tape(format!("non-finite difference at {name}[{index}]")));
            }
            out.push(Probe {
                name: name.clone(),
                index,
                numeric,
            });
        }
    }
    Ok(out)
}

/// Compares `T`-precision backpropagation against precomputed differences.
pub fn compare_gradients<T: Real>(
    obj: &impl Objective,
    store: &ParamStore<f64>,
    probes: &[Probe],
    floor: f64,
) -> Result<GradReport> {
    let mut analytic: ParamStore<T> = store.cast();
    analytic.zero_grad();
    let (tape, loss) = obj.eval(&analytic)?;
    tape.backward(loss, &mut analytic)?;
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    for p in probes {
        let Some(numeric) = p.numeric else {
            report.skipped += 1;
            continue;
        };
        let id = analytic
            .id(&p.name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter {}", p.name)))?;
        let a = analytic.get(id).grad[p.index].f64();
        if !a.is_finite() {
            return Err(Error::Tape(format!("non-finite gradient at {}[{}]", p.name, p.index)));
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = format!("{}[{}]: {a:e} vs {numeric:e}", p.name, p.index);
        }
    }
    Ok(report)
}

/// Compares `T`-precision backpropagation against `f64` central differences.
pub fn check_gradients<T: Real>(obj: &impl Objective, store: &ParamStore<f64>, cfg: &GradCheckConfig) -> Result<GradReport> {
    let probes = numeric_gradients(obj, store, cfg)?;
    compare_gradients::<T>(obj, store, &probes, cfg.floor)
}

/// The tape operations that can be checked in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Conv27,
    Conv1,
    ConvDown,
    DeconvUp,
    GroupNorm,
    Relu,
    Squash,
    Add,
    Gather,
    Sum,
    WeightedSum,
    BalancedBce,
    DispMse,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::Conv27,
        OpKind::Conv1,
        OpKind::ConvDown,
        OpKind::DeconvUp,
        OpKind::GroupNorm,
        OpKind::Relu,
        OpKind::Squash,
        OpKind::Add,
        OpKind::Gather,
        OpKind::Sum,
        OpKind::WeightedSum,
        OpKind::BalancedBce,
        OpKind::DispMse,
    ];
}

/// One operation wired between random inputs on the two finest levels of an
/// octree and a random linear read-out, with every tensor a parameter.
#[derive(Debug, Clone)]
pub struct OpCase {
    pub kind: OpKind,
    pub store: ParamStore<f64>,
    level: u8,
    groups: usize,
    fine_identity: Arc<Vec<i32>>,
    coarse_identity: Arc<Vec<i32>>,
    neighbors: Arc<Vec<[i32; 27]>>,
    children: Arc<Vec<[i32; 8]>>,
    parents: Arc<Vec<(u32, u8)>>,
    shuffle: Arc<Vec<i32>>,
    labels: Arc<Vec<u8>>,
    targets: Vec<f64>,
}

fn normal_param(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>, scale: f64) {
    let n = shape.iter().product();
    let v = (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>();
    store.insert(Parameter::new(name, shape, v)).expect("unique names");
}

impl OpCase {
    pub fn new(kind: OpKind, tree: &Octree, channels: usize, seed: u64) -> Result<OpCase> {
        let level = tree.depth();
        if level == 0 || channels == 0 {
            return Err(Error::InvalidArgument("op cases need depth >= 1 and channels >= 1".into()));
        }
        let fine = tree.codes(level);
        let coarse = tree.codes(level - 1);
        let (n, m, c) = (fine.len(), coarse.len(), channels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fan = |k: usize| 1.0 / (k as f64).sqrt();
        normal_param(&mut store, &mut rng, "x", vec![n, c], 1.0);
        normal_param(&mut store, &mut rng, "y", vec![n, c], 1.0);
        normal_param(&mut store, &mut rng, "coarse", vec![m, c], 1.0);
        normal_param(&mut store, &mut rng, "w27", vec![27, c, c], fan(27 * c));
        normal_param(&mut store, &mut rng, "w8", vec![8, c, c], fan(8 * c));
        normal_param(&mut store, &mut rng, "w1", vec![c, c], fan(c));
        normal_param(&mut store, &mut rng, "b", vec![c], 0.1);
        normal_param(&mut store, &mut rng, "gamma", vec![c], 0.5);
        normal_param(&mut store, &mut rng, "beta", vec![c], 0.5);
        normal_param(&mut store, &mut rng, "w3", vec![c, 3], fan(c));
        normal_param(&mut store, &mut rng, "b3", vec![3], 0.1);
        normal_param(&mut store, &mut rng, "readout", vec![c, 1], 1.0);
        normal_param(&mut store, &mut rng, "readout_b", vec![1], 0.1);

        let parents: Vec<(u32, u8)> = fine
            .iter()
            .map(|&f| {
                let p = coarse.binary_search(&(f >> 3)).expect("parent exists") as u32;
                (p, (f & 7) as u8)
            })
            .collect();
        let shuffle: Vec<i32> = (0..n + 3)
            .map(|_| if rng.random_bool(0.2) { -1 } else { rng.random_range(0..n) as i32 })
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
        labels[0] = 1;
        if n > 1 {
            labels[n - 1] = 0;
        }
        let targets = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(OpCase {
            kind,
            store,
            level,
            groups: if c % 2 == 0 { 2 } else { 1 },
            fine_identity: Arc::new((0..n as i32).collect()),
            coarse_identity: Arc::new((0..m as i32).collect()),
            neighbors: Arc::new(neighbor_table(fine, level)),
            children: Arc::new(children_table(coarse, fine)),
            parents: Arc::new(parents),
            shuffle: Arc::new(shuffle),
            labels: Arc::new(labels),
            targets,
        })
    }
}

fn p<T: Real>(t: &mut Tape<T>, s: &ParamStore<T>, name: &str) -> Var {
    t.param(s, s.id(name).expect("op case parameter"))
}

impl Objective for OpCase {
    fn eval<T: Real>(&self, s: &ParamStore<T>) -> Result<(Tape<T>, Var)> {
        let mut t = Tape::new();
        let xr = p(&mut t, s, "x");
        let x = t.gather(xr, &self.fine_identity, self.level)?;
        let b = p(&mut t, s, "b");
        let ro = p(&mut t, s, "readout");
        let rob = p(&mut t, s, "readout_b");
        let read = |t: &mut Tape<T>, v: Var| -> Result<Var> {
            let r = t.conv1(v, ro, rob)?;
            Ok(t.sum(r))
        };
        let loss = match self.kind {
            OpKind::Conv27 => {
                let w = p(&mut t, s, "w27");
                let y = t.conv27(x, w, b, &self.neighbors)?;
                read(&mut t, y)?
            }
            OpKind::Conv1 => {
                let w = p(&mut t, s, "w1");
                let y = t.conv1(x, w, b)?;
                read(&mut t, y)?
            }
            OpKind::ConvDown => {
                let w = p(&mut t, s, "w8");
                let y = t.conv_down(x, w, b, &self.children)?;
                read(&mut t, y)?
            }
            OpKind::DeconvUp => {
                let cr = p(&mut t, s, "coarse");
                let c = t.gather(cr, &self.coarse_identity, self.level - 1)?;
                let w = p(&mut t, s, "w8");
                let y = t.deconv_up(c, w, b, &self.parents)?;
                read(&mut t, y)?
            }
            OpKind::GroupNorm => {
                let g = p(&mut t, s, "gamma");
                let be = p(&mut t, s, "beta");
                let y = t.group_norm(x, g, be, self.groups, 1e-5)?;
                read(&mut t, y)?
            }
            OpKind::Relu => {
                let y = t.relu(x);
                read(&mut t, y)?
            }
            OpKind::Squash => {
                let y = t.squash(x);
                read(&mut t, y)?
            }
            OpKind::Add => {
                let yr = p(&mut t, s, "y");
                let y = t.add(x, yr)?;
                read(&mut t, y)?
            }
            OpKind::Gather => {
                let y = t.gather(x, &self.shuffle, self.level)?;
                read(&mut t, y)?
            }
            OpKind::Sum => t.sum(x),
            OpKind::WeightedSum => {
                let a = read(&mut t, x)?;
                let yr = p(&mut t, s, "y");
                let c = t.sum(yr);
                t.weighted_sum(&[(a, 0.7), (c, -1.3)])?
            }
            OpKind::BalancedBce => {
                let z = t.conv1(x, ro, rob)?;
                t.balanced_bce(z, &self.labels)?
            }
            OpKind::DispMse => {
                let w = p(&mut t, s, "w3");
                let b3 = p(&mut t, s, "b3");
                let d = t.conv1(x, w, b3)?;
                let target = Arc::new(self.targets.iter().map(|&v| T::of(v)).collect());
                t.disp_mse(d, &target)?
            }
        };
        Ok((t, loss))
    }
}

/// The complete training loss of a model on one LR/HR octree pair.
#[derive(Debug, Clone)]
pub struct ModelObjective {
    pub config: ModelConfig,
    pub lr: Octree,
    pub hr: Octree,
}

impl Objective for ModelObjective {
    fn eval<T: Real>(&self, store: &ParamStore<T>) -> Result<(Tape<T>, Var)> {
        let state = ModelState {
            config: self.config.clone(),
            params: store.clone(),
        };
        let step = forward_train(&state, &self.lr, &self.hr)?;
        Ok((step.tape, step.loss))
    }
}

/// A small random surface patch in the unit cube: a dense reference sample
/// and a sparse jittered subset, both in `[-1, 1]^3`.
pub fn toy_pair(seed: u64, dense: usize, sparse: usize) -> (Vec<Point3>, Vec<Point3>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Point3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let r = rng.random_range(0.3..0.6);
    let on_sphere = |rng: &mut ChaCha8Rng| loop {
        let v: [f64; 3] = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return c + Point3::new(v[0], v[1], v[2]) * (r / n);
        }
    };
    let hr: Vec<Point3> = (0..dense).map(|_| on_sphere(&mut rng)).collect();
    let lr = (0..sparse)
        .map(|i| {
            let p = hr[i * dense / sparse.max(1)];
            let j = Point3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
            (p + j).max(Point3::new(-1.0, -1.0, -1.0)).min(Point3::new(1.0, 1.0, 1.0))
        })
        .collect();
    (hr, lr)
}
