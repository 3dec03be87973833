//! Reverse-mode tape over [`FeatureMatrix`] values.
//!
//! Nodes are appended in evaluation order, so reverse creation order is a
//! valid reverse topological order for the backward sweep.

use std::sync::Arc;

use super::{FeatureMatrix, ParamId, ParamStore, Real};
use crate::error::{Error, Result};
use crate::octree::CENTER_SLOT;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv27 {
        x: Var,
        w: Var,
        b: Var,
        table: Arc<Vec<[i32; 27]>>,
    },
    Conv1 {
        x: Var,
        w: Var,
        b: Var,
    },
    ConvDown {
        x: Var,
        w: Var,
        b: Var,
        children: Arc<Vec<[i32; 8]>>,
    },
    DeconvUp {
        x: Var,
        w: Var,
        b: Var,
        parents: Arc<Vec<(u32, u8)>>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Relu(Var),
    Squash(Var),
    Add(Var, Var),
    Gather {
        x: Var,
        map: Arc<Vec<i32>>,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, T)>),
    BalancedBce {
        logits: Var,
        labels: Arc<Vec<u8>>,
    },
    DispMse {
        disp: Var,
        target: Arc<Vec<T>>,
    },
}

struct Node<T> {
    value: FeatureMatrix<T>,
    op: Op<T>,
}

/// Bounded odd squashing used by the displacement head: `tanh`, range `(-1, 1)`.
pub fn displacement_squash<T: Real>(x: T) -> T {
    x.tanh()
}

fn softplus<T: Real>(z: T) -> T {
    // log(1 + e^z) without overflow
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &FeatureMatrix<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: FeatureMatrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, m: FeatureMatrix<T>) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Records a parameter; its shape is flattened to `prod(shape[..-1]) x shape[-1]`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let cols = p.shape.last().copied().unwrap_or(1);
        let rows = if cols == 0 { 0 } else { p.value.len() / cols };
        self.push(FeatureMatrix::from_vec(0, rows, cols, p.value.clone()), Op::Param(id))
    }

    fn check_bias(&self, b: Var, cout: usize) -> Result<()> {
        let bv = self.value(b);
        if bv.data.len() != cout {
            return Err(shape_err(format!("bias has {} values, expected {cout}", bv.data.len())));
        }
        Ok(())
    }

    /// 3x3x3 sparse convolution; `table[n][s]` is the input row feeding slot
    /// `s` of output row `n`, or -1 for an empty neighbor.
    pub fn conv27(&mut self, x: Var, w: Var, b: Var, table: &Arc<Vec<[i32; 27]>>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, cout) = (xv.cols, wv.cols);
        if wv.rows != 27 * cin {
            return Err(shape_err(format!("conv27 weight has {} rows, expected 27x{cin}", wv.rows)));
        }
        if table.len() != xv.rows {
            return Err(shape_err(format!("neighbor table has {} rows, features {}", table.len(), xv.rows)));
        }
        self.check_bias(b, cout)?;
        let bias = &self.value(b).data;
        let mut out = vec![T::zero(); xv.rows * cout];
        for (n, nb) in table.iter().enumerate() {
            let o = &mut out[n * cout..(n + 1) * cout];
            o.copy_from_slice(bias);
            for (s, &m) in nb.iter().enumerate() {
                if m < 0 {
                    continue;
                }
                let xr = xv.row(m as usize);
                let wbase = s * cin * cout;
                for (ci, &a) in xr.iter().enumerate() {
                    let wr = &wv.data[wbase + ci * cout..wbase + (ci + 1) * cout];
                    for (oo, &ww) in o.iter_mut().zip(wr) {
                        *oo += a * ww;
                    }
                }
            }
        }
        let level = xv.level;
        let rows = xv.rows;
        let table = Arc::clone(table);
        Ok(self.push(FeatureMatrix::from_vec(level, rows, cout, out), Op::Conv27 { x, w, b, table }))
    }

    /// Per-row affine map (1x1x1 convolution).
    pub fn conv1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, cout) = (xv.cols, wv.cols);
        if wv.rows != cin {
            return Err(shape_err(format!("conv1 weight has {} rows, expected {cin}", wv.rows)));
        }
        self.check_bias(b, cout)?;
        let bias = &self.value(b).data;
        let mut out = vec![T::zero(); xv.rows * cout];
        for n in 0..xv.rows {
            let o = &mut out[n * cout..(n + 1) * cout];
            o.copy_from_slice(bias);
            for (ci, &a) in xv.row(n).iter().enumerate() {
                for (oo, &ww) in o.iter_mut().zip(wv.row(ci)) {
                    *oo += a * ww;
                }
            }
        }
        let (level, rows) = (xv.level, xv.rows);
        Ok(self.push(FeatureMatrix::from_vec(level, rows, cout, out), Op::Conv1 { x, w, b }))
    }

    /// Kernel-2 stride-2 convolution: output row `p` sums its (up to eight)
    /// children `children[p][octant]` through per-octant weights.
    pub fn conv_down(&mut self, x: Var, w: Var, b: Var, children: &Arc<Vec<[i32; 8]>>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, cout) = (xv.cols, wv.cols);
        if wv.rows != 8 * cin {
            return Err(shape_err(format!("conv_down weight has {} rows, expected 8x{cin}", wv.rows)));
        }
        if xv.level == 0 {
            return Err(shape_err("conv_down from the root level".into()));
        }
        self.check_bias(b, cout)?;
        let bias = &self.value(b).data;
        let mut out = vec![T::zero(); children.len() * cout];
        for (p, kids) in children.iter().enumerate() {
            let o = &mut out[p * cout..(p + 1) * cout];
            o.copy_from_slice(bias);
            for (oct, &c) in kids.iter().enumerate() {
                if c < 0 {
                    continue;
                }
                if c as usize >= xv.rows {
                    return Err(shape_err(format!("child row {c} out of range")));
                }
                let wbase = oct * cin * cout;
                for (ci, &a) in xv.row(c as usize).iter().enumerate() {
                    let wr = &wv.data[wbase + ci * cout..wbase + (ci + 1) * cout];
                    for (oo, &ww) in o.iter_mut().zip(wr) {
                        *oo += a * ww;
                    }
                }
            }
        }
        let level = xv.level - 1;
        let children = Arc::clone(children);
        Ok(self.push(
            FeatureMatrix::from_vec(level, children.len(), cout, out),
            Op::ConvDown { x, w, b, children },
        ))
    }

    /// Kernel-2 stride-2 transposed convolution: output row `c` is
    /// `W[octant]^T x[parent] + b` for `parents[c] = (parent, octant)`.
    pub fn deconv_up(&mut self, x: Var, w: Var, b: Var, parents: &Arc<Vec<(u32, u8)>>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, cout) = (xv.cols, wv.cols);
        if wv.rows != 8 * cin {
            return Err(shape_err(format!("deconv_up weight has {} rows, expected 8x{cin}", wv.rows)));
        }
        self.check_bias(b, cout)?;
        let bias = &self.value(b).data;
        let mut out = vec![T::zero(); parents.len() * cout];
        for (c, &(p, oct)) in parents.iter().enumerate() {
            if p as usize >= xv.rows {
                return Err(shape_err(format!("target row {c} has no parent row {p}")));
            }
            let o = &mut out[c * cout..(c + 1) * cout];
            o.copy_from_slice(bias);
            let wbase = oct as usize * cin * cout;
            for (ci, &a) in xv.row(p as usize).iter().enumerate() {
                let wr = &wv.data[wbase + ci * cout..wbase + (ci + 1) * cout];
                for (oo, &ww) in o.iter_mut().zip(wr) {
                    *oo += a * ww;
                }
            }
        }
        let level = xv.level + 1;
        let parents = Arc::clone(parents);
        Ok(self.push(
            FeatureMatrix::from_vec(level, parents.len(), cout, out),
            Op::DeconvUp { x, w, b, parents },
        ))
    }

    /// Group normalization with statistics over all rows and the channels of
    /// each group, followed by a per-channel affine map.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols;
        if groups == 0 || c % groups != 0 {
            return Err(shape_err(format!("{c} channels not divisible into {groups} groups")));
        }
        if self.value(gamma).data.len() != c || self.value(beta).data.len() != c {
            return Err(shape_err(format!("group norm affine does not match {c} channels")));
        }
        let gc = c / groups;
        let count = T::of((xv.rows * gc).max(1) as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); xv.data.len()];
        let mut rstd = vec![T::zero(); groups];
        for g in 0..groups {
            let mut mean = T::zero();
            for n in 0..xv.rows {
                for &v in &xv.row(n)[g * gc..(g + 1) * gc] {
                    mean += v;
                }
            }
            mean /= count;
            let mut var = T::zero();
            for n in 0..xv.rows {
                for &v in &xv.row(n)[g * gc..(g + 1) * gc] {
                    var += (v - mean) * (v - mean);
                }
            }
            var /= count;
            let r = T::one() / (var + eps).sqrt();
            rstd[g] = r;
            for n in 0..xv.rows {
                for k in g * gc..(g + 1) * gc {
                    xhat[n * c + k] = (xv.data[n * c + k] - mean) * r;
                }
            }
        }
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| gv[i % c] * h + bv[i % c])
            .collect();
        let (level, rows) = (xv.level, xv.rows);
        Ok(self.push(
            FeatureMatrix::from_vec(level, rows, c, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.data.iter().map(|&v| v.max(T::zero())).collect();
        let m = FeatureMatrix::from_vec(xv.level, xv.rows, xv.cols, out);
        self.push(m, Op::Relu(x))
    }

    pub fn squash(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.data.iter().map(|&v| displacement_squash(v)).collect();
        let m = FeatureMatrix::from_vec(xv.level, xv.rows, xv.cols, out);
        self.push(m, Op::Squash(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows != bv.rows || av.cols != bv.cols {
            return Err(shape_err(format!(
                "add of {}x{} and {}x{}",
                av.rows, av.cols, bv.rows, bv.cols
            )));
        }
        let out = av.data.iter().zip(&bv.data).map(|(&p, &q)| p + q).collect();
        let m = FeatureMatrix::from_vec(av.level, av.rows, av.cols, out);
        Ok(self.push(m, Op::Add(a, b)))
    }

    /// Row gather: output row `r` is `x[map[r]]`, or zeros where `map[r] < 0`.
    pub fn gather(&mut self, x: Var, map: &Arc<Vec<i32>>, level: u8) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols;
        let mut out = vec![T::zero(); map.len() * c];
        for (r, &m) in map.iter().enumerate() {
            if m >= 0 {
                if m as usize >= xv.rows {
                    return Err(shape_err(format!("gather index {m} out of range")));
                }
                out[r * c..(r + 1) * c].copy_from_slice(xv.row(m as usize));
            }
        }
        let map = Arc::clone(map);
        Ok(self.push(FeatureMatrix::from_vec(level, map.len(), c, out), Op::Gather { x, map }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        self.push(FeatureMatrix::from_vec(0, 1, 1, vec![s]), Op::Sum(x))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = T::zero();
        let mut ts = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            let m = self.value(v);
            if m.data.len() != 1 {
                return Err(shape_err("weighted_sum expects scalar terms".into()));
            }
            s += T::of(w) * m.data[0];
            ts.push((v, T::of(w)));
        }
        Ok(self.push(FeatureMatrix::from_vec(0, 1, 1, vec![s]), Op::WeightedSum(ts)))
    }

    /// Class-balanced binary cross-entropy over one logit per row. Each class
    /// present contributes its mean loss with equal weight.
    pub fn balanced_bce(&mut self, logits: Var, labels: &Arc<Vec<u8>>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.cols != 1 || lv.rows != labels.len() {
            return Err(shape_err(format!(
                "{} labels for {}x{} logits",
                labels.len(),
                lv.rows,
                lv.cols
            )));
        }
        let (wp, wn) = bce_weights::<T>(labels);
        let mut l = T::zero();
        for (&z, &y) in lv.data.iter().zip(labels.iter()) {
            l += if y == 1 { wp * softplus(-z) } else { wn * softplus(z) };
        }
        let labels = Arc::clone(labels);
        Ok(self.push(FeatureMatrix::from_vec(0, 1, 1, vec![l]), Op::BalancedBce { logits, labels }))
    }

    /// Mean over rows of the squared distance between `disp` and `target`
    /// (both `rows x 3`, in half voxel edges).
    pub fn disp_mse(&mut self, disp: Var, target: &Arc<Vec<T>>) -> Result<Var> {
        let dv = self.value(disp);
        if dv.cols != 3 || dv.data.len() != target.len() {
            return Err(shape_err(format!(
                "{} target values for {}x{} displacements",
                target.len(),
                dv.rows,
                dv.cols
            )));
        }
        let n = T::of(dv.rows.max(1) as f64);
        let l = dv.data.iter().zip(target.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        let target = Arc::clone(target);
        Ok(self.push(FeatureMatrix::from_vec(0, 1, 1, vec![l]), Op::DispMse { disp, target }))
    }

    /// Hash of every ReLU activation pattern on the tape; two forward passes
    /// with equal signatures lie on the same linear piece.
    pub fn relu_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in &self.nodes[x.0].value.data {
                    h ^= (v > T::zero()) as u64 + 1;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Accumulates `d loss / d θ` into the gradient buffers of every
    /// parameter recorded on the tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::Tape("backward called before a forward pass".into()));
        }
        if self.nodes[loss.0].value.data.len() != 1 {
            return Err(Error::Tape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    for (a, &b) in p.grad.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Conv27 { x, w, b, table } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (cin, cout) = (xv.cols, wv.cols);
                    let mut gx = vec![T::zero(); xv.data.len()];
                    let mut gw = vec![T::zero(); wv.data.len()];
                    let mut gb = vec![T::zero(); cout];
                    for (n, nb) in table.iter().enumerate() {
                        let go = &g[n * cout..(n + 1) * cout];
                        for (a, &v) in gb.iter_mut().zip(go) {
                            *a += v;
                        }
                        for (s, &m) in nb.iter().enumerate() {
                            if m < 0 {
                                continue;
                            }
                            let m = m as usize;
                            let wbase = s * cin * cout;
                            for ci in 0..cin {
                                let wr = &wv.data[wbase + ci * cout..wbase + (ci + 1) * cout];
                                let mut acc = T::zero();
                                for (&ww, &gg) in wr.iter().zip(go) {
                                    acc += ww * gg;
                                }
                                gx[m * cin + ci] += acc;
                                let a = xv.data[m * cin + ci];
                                let gwr = &mut gw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                for (gwv, &gg) in gwr.iter_mut().zip(go) {
                                    *gwv += a * gg;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Conv1 { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (cin, cout) = (xv.cols, wv.cols);
                    let mut gx = vec![T::zero(); xv.data.len()];
                    let mut gw = vec![T::zero(); wv.data.len()];
                    let mut gb = vec![T::zero(); cout];
                    for n in 0..xv.rows {
                        let go = &g[n * cout..(n + 1) * cout];
                        for (a, &v) in gb.iter_mut().zip(go) {
                            *a += v;
                        }
                        for ci in 0..cin {
                            let wr = wv.row(ci);
                            let mut acc = T::zero();
                            for (&ww, &gg) in wr.iter().zip(go) {
                                acc += ww * gg;
                            }
                            gx[n * cin + ci] += acc;
                            let a = xv.data[n * cin + ci];
                            for (gwv, &gg) in gw[ci * cout..(ci + 1) * cout].iter_mut().zip(go) {
                                *gwv += a * gg;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ConvDown { x, w, b, children } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (cin, cout) = (xv.cols, wv.cols);
                    let mut gx = vec![T::zero(); xv.data.len()];
                    let mut gw = vec![T::zero(); wv.data.len()];
                    let mut gb = vec![T::zero(); cout];
                    for (p, kids) in children.iter().enumerate() {
                        let go = &g[p * cout..(p + 1) * cout];
                        for (a, &v) in gb.iter_mut().zip(go) {
                            *a += v;
                        }
                        for (oct, &c) in kids.iter().enumerate() {
                            if c < 0 {
                                continue;
                            }
                            let c = c as usize;
                            let wbase = oct * cin * cout;
                            for ci in 0..cin {
                                let wr = &wv.data[wbase + ci * cout..wbase + (ci + 1) * cout];
                                let mut acc = T::zero();
                                for (&ww, &gg) in wr.iter().zip(go) {
                                    acc += ww * gg;
                                }
                                gx[c * cin + ci] += acc;
                                let a = xv.data[c * cin + ci];
                                for (gwv, &gg) in gw[wbase + ci * cout..wbase + (ci + 1) * cout].iter_mut().zip(go) {
                                    *gwv += a * gg;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::DeconvUp { x, w, b, parents } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (cin, cout) = (xv.cols, wv.cols);
                    let mut gx = vec![T::zero(); xv.data.len()];
                    let mut gw = vec![T::zero(); wv.data.len()];
                    let mut gb = vec![T::zero(); cout];
                    for (c, &(p, oct)) in parents.iter().enumerate() {
                        let go = &g[c * cout..(c + 1) * cout];
                        for (a, &v) in gb.iter_mut().zip(go) {
                            *a += v;
                        }
                        let p = p as usize;
                        let wbase = oct as usize * cin * cout;
                        for ci in 0..cin {
                            let wr = &wv.data[wbase + ci * cout..wbase + (ci + 1) * cout];
                            let mut acc = T::zero();
                            for (&ww, &gg) in wr.iter().zip(go) {
                                acc += ww * gg;
                            }
                            gx[p * cin + ci] += acc;
                            let a = xv.data[p * cin + ci];
                            for (gwv, &gg) in gw[wbase + ci * cout..wbase + (ci + 1) * cout].iter_mut().zip(go) {
                                *gwv += a * gg;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let xv = val(*x);
                    let gv = &val(*gamma).data;
                    let (rows, c) = (xv.rows, xv.cols);
                    let gc = c / groups;
                    let count = T::of((rows * gc).max(1) as f64);
                    let mut ggamma = vec![T::zero(); c];
                    let mut gbeta = vec![T::zero(); c];
                    for n in 0..rows {
                        for k in 0..c {
                            ggamma[k] += g[n * c + k] * xhat[n * c + k];
                            gbeta[k] += g[n * c + k];
                        }
                    }
                    let mut gx = vec![T::zero(); xv.data.len()];
                    for grp in 0..*groups {
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for n in 0..rows {
                            for k in grp * gc..(grp + 1) * gc {
                                let dh = g[n * c + k] * gv[k];
                                s1 += dh;
                                s2 += dh * xhat[n * c + k];
                            }
                        }
                        let r = rstd[grp];
                        for n in 0..rows {
                            for k in grp * gc..(grp + 1) * gc {
                                let dh = g[n * c + k] * gv[k];
                                gx[n * c + k] = r / count * (count * dh - s1 - xhat[n * c + k] * s2);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                }
                Op::Relu(x) => {
                    let xv = val(*x);
                    let gx = xv
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gg)| if v > T::zero() { gg } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Squash(x) => {
                    let yv = &node.value.data;
                    let gx = yv.iter().zip(&g).map(|(&y, &gg)| gg * (T::one() - y * y)).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Gather { x, map } => {
                    let xv = val(*x);
                    let c = xv.cols;
                    let mut gx = vec![T::zero(); xv.data.len()];
                    for (r, &m) in map.iter().enumerate() {
                        if m >= 0 {
                            let m = m as usize;
                            for k in 0..c {
                                gx[m * c + k] += g[r * c + k];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let n = val(*x).data.len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, vec![w * g[0]]);
                    }
                }
                Op::BalancedBce { logits, labels } => {
                    let lv = val(*logits);
                    let (wp, wn) = bce_weights::<T>(labels);
                    let gx = lv
                        .data
                        .iter()
                        .zip(labels.iter())
                        .map(|(&z, &y)| {
                            let w = if y == 1 { wp } else { wn };
                            g[0] * w * (sigmoid(z) - T::of(y as f64))
                        })
                        .collect();
                    accumulate(&mut grads, *logits, gx);
                }
                Op::DispMse { disp, target } => {
                    let dv = val(*disp);
                    let n = T::of(dv.rows.max(1) as f64);
                    let two = T::of(2.0);
                    let gx = dv
                        .data
                        .iter()
                        .zip(target.iter())
                        .map(|(&a, &b)| g[0] * two * (a - b) / n)
                        .collect();
                    accumulate(&mut grads, *disp, gx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn bce_weights<T: Real>(labels: &[u8]) -> (T, T) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    let classes = (pos > 0) as usize + (neg > 0) as usize;
    let w = |n: usize| {
        if n == 0 {
            T::zero()
        } else {
            T::one() / T::of((classes * n) as f64)
        }
    };
    (w(pos), w(neg))
}

/// Identity stencil used by tests and the model's debug paths.
#[allow(dead_code)]
pub(crate) fn identity_conv27_weights<T: Real>(c: usize) -> Vec<T> {
    let mut w = vec![T::zero(); 27 * c * c];
    for i in 0..c {
        w[CENTER_SLOT * c * c + i * c + i] = T::one();
    }
    w
}
