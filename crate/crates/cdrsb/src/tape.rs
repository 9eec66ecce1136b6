//! Reverse-mode autodiff over f64 vectors.
//!
//! A `Graph` records vector-valued nodes plus the op that produced each one;
//! `backward` walks the record in reverse and accumulates parameter gradients
//! into a `Grads` buffer. Two features exist specifically for gradient
//! routing between loss terms:
//!
//! * `detach` cuts the graph: the result is a leaf that carries the input's
//!   value but no history. In `DetachMode::Capture` every detached value is
//!   also appended to a buffer; in `DetachMode::Replay` detached nodes take
//!   their values from that buffer instead of the live input. Replay is what
//!   lets a finite-difference check perturb parameters while holding
//!   stop-gradient values fixed, so numeric gradients agree with the routed
//!   analytic ones.
//! * `affine_frozen` applies a parameter matrix without ever accumulating
//!   gradient into it (input gradients still flow). When a frozen-parameter
//!   snapshot is installed, frozen ops read values from the snapshot rather
//!   than the live store, which pins them during finite differences.

use crate::params::{Grads, ParamId, ParameterStore};
use std::rc::Rc;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub u32);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Softplus,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "softplus" => Some(Activation::Softplus),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                // ln(1 + e^x), stable in both tails
                if x > 30.0 {
                    x
                } else if x < -30.0 {
                    x.exp()
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

pub enum DetachMode {
    Normal,
    /// Record every detached value in order.
    Capture(Vec<Vec<f64>>),
    /// Detached nodes take values from this buffer (same forward order).
    Replay(Rc<Vec<Vec<f64>>>),
}

enum Op {
    Leaf,
    Lookup {
        t: ParamId,
        row: usize,
    },
    Affine {
        w: ParamId,
        b: ParamId,
        x: NodeId,
        frozen: bool,
    },
    Act {
        x: NodeId,
        kind: Activation,
    },
    Mean {
        xs: Box<[NodeId]>,
    },
    Concat {
        xs: Box<[NodeId]>,
    },
    Slice {
        x: NodeId,
        start: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    /// a + k*b with constant k
    AddScaled {
        a: NodeId,
        b: NodeId,
        k: f64,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Square {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        k: f64,
    },
    Sum {
        x: NodeId,
    },
    AddMany {
        xs: Box<[NodeId]>,
    },
    /// exp(-clamp(x, lo, hi)); gradient is zero where the clamp saturates
    ExpNegClamped {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Ln {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Box<[f64]>,
    },
    /// One output slot of a batch-normalization over `xs` (training statistics).
    BnTrain {
        xs: Rc<[NodeId]>,
        xhat: Rc<Vec<Vec<f64>>>,
        inv_std: Rc<Vec<f64>>,
        slot: usize,
        gamma: ParamId,
        beta: ParamId,
    },
    /// Batch normalization with fixed (running) statistics.
    BnEval {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        xhat: Box<[f64]>,
        scale: Box<[f64]>,
    },
}

pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Graph<'a> {
    store: &'a ParameterStore,
    /// Value source for frozen affine ops (defaults to the live store).
    frozen_src: Option<&'a ParameterStore>,
    ops: Vec<Op>,
    vals: Vec<Vec<f64>>,
    pub detach: DetachMode,
    detach_cursor: usize,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        Graph {
            store,
            frozen_src: None,
            ops: Vec::new(),
            vals: Vec::new(),
            detach: DetachMode::Normal,
            detach_cursor: 0,
        }
    }

    pub fn with_frozen_source(store: &'a ParameterStore, frozen: &'a ParameterStore) -> Self {
        let mut g = Graph::new(store);
        g.frozen_src = Some(frozen);
        g
    }

    fn push(&mut self, op: Op, val: Vec<f64>) -> NodeId {
        let id = NodeId(self.ops.len() as u32);
        self.ops.push(op);
        self.vals.push(val);
        id
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.vals[id.0 as usize]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.vals[id.0 as usize].len(), 1);
        self.vals[id.0 as usize][0]
    }

    pub fn leaf(&mut self, val: Vec<f64>) -> NodeId {
        self.push(Op::Leaf, val)
    }

    pub fn zeros(&mut self, d: usize) -> NodeId {
        self.push(Op::Leaf, vec![0.0; d])
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let val = match &mut self.detach {
            DetachMode::Normal => self.vals[x.0 as usize].clone(),
            DetachMode::Capture(buf) => {
                let v = self.vals[x.0 as usize].clone();
                buf.push(v.clone());
                v
            }
            DetachMode::Replay(buf) => {
                let v = buf[self.detach_cursor].clone();
                self.detach_cursor += 1;
                v
            }
        };
        self.push(Op::Leaf, val)
    }

    pub fn lookup(&mut self, t: ParamId, row: usize) -> NodeId {
        let val = self.store.get(t).row(row).to_vec();
        self.push(Op::Lookup { t, row }, val)
    }

    fn affine_val(&self, w: ParamId, b: ParamId, x: NodeId, frozen: bool) -> Vec<f64> {
        let src = if frozen {
            self.frozen_src.unwrap_or(self.store)
        } else {
            self.store
        };
        let wt = src.get(w);
        let bt = src.get(b);
        let xv = &self.vals[x.0 as usize];
        debug_assert_eq!(wt.cols, xv.len());
        debug_assert_eq!(wt.rows, bt.data.len());
        let mut out = bt.data.clone();
        for r in 0..wt.rows {
            let row = wt.row(r);
            let mut acc = 0.0;
            for c in 0..wt.cols {
                acc += row[c] * xv[c];
            }
            out[r] += acc;
        }
        out
    }

    pub fn affine(&mut self, w: ParamId, b: ParamId, x: NodeId) -> NodeId {
        let val = self.affine_val(w, b, x, false);
        self.push(
            Op::Affine {
                w,
                b,
                x,
                frozen: false,
            },
            val,
        )
    }

    /// Affine whose parameters receive no gradient (and read from the frozen
    /// snapshot when one is installed).
    pub fn affine_frozen(&mut self, w: ParamId, b: ParamId, x: NodeId) -> NodeId {
        let val = self.affine_val(w, b, x, true);
        self.push(
            Op::Affine {
                w,
                b,
                x,
                frozen: true,
            },
            val,
        )
    }

    pub fn act(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let val = self.vals[x.0 as usize]
            .iter()
            .map(|&v| kind.apply(v))
            .collect();
        self.push(Op::Act { x, kind }, val)
    }

    /// Mean of equally-sized vectors; an empty set yields a zero vector that
    /// carries no gradient.
    pub fn mean(&mut self, xs: &[NodeId], dim: usize) -> NodeId {
        if xs.is_empty() {
            return self.zeros(dim);
        }
        let mut acc = vec![0.0; dim];
        for x in xs {
            let v = &self.vals[x.0 as usize];
            for (a, b) in acc.iter_mut().zip(v) {
                *a += b;
            }
        }
        let n = xs.len() as f64;
        for a in acc.iter_mut() {
            *a /= n;
        }
        self.push(Op::Mean { xs: xs.into() }, acc)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let mut val = Vec::new();
        for x in xs {
            val.extend_from_slice(&self.vals[x.0 as usize]);
        }
        self.push(Op::Concat { xs: xs.into() }, val)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let val = self.vals[x.0 as usize][start..start + len].to_vec();
        self.push(Op::Slice { x, start }, val)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = self.zipped(a, b, |x, y| x + y);
        self.push(Op::Add { a, b }, val)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = self.zipped(a, b, |x, y| x - y);
        self.push(Op::Sub { a, b }, val)
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, k: f64) -> NodeId {
        let val = self.zipped(a, b, |x, y| x + k * y);
        self.push(Op::AddScaled { a, b, k }, val)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = self.zipped(a, b, |x, y| x * y);
        self.push(Op::Mul { a, b }, val)
    }

    fn zipped(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let av = &self.vals[a.0 as usize];
        let bv = &self.vals[b.0 as usize];
        debug_assert_eq!(av.len(), bv.len());
        av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let val = self.vals[x.0 as usize].iter().map(|&v| v * v).collect();
        self.push(Op::Square { x }, val)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let val = self.vals[x.0 as usize].iter().map(|&v| v * k).collect();
        self.push(Op::Scale { x, k }, val)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.vals[x.0 as usize].iter().sum();
        self.push(Op::Sum { x }, vec![s])
    }

    pub fn add_many(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let dim = self.vals[xs[0].0 as usize].len();
        let mut acc = vec![0.0; dim];
        for x in xs {
            for (a, b) in acc.iter_mut().zip(&self.vals[x.0 as usize]) {
                *a += b;
            }
        }
        self.push(Op::AddMany { xs: xs.into() }, acc)
    }

    pub fn exp_neg_clamped(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let val = self.vals[x.0 as usize]
            .iter()
            .map(|&v| (-v.clamp(lo, hi)).exp())
            .collect();
        self.push(Op::ExpNegClamped { x, lo, hi }, val)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let val = self.vals[x.0 as usize]
            .iter()
            .map(|&v| v.clamp(lo, hi))
            .collect();
        self.push(Op::Clamp { x, lo, hi }, val)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let val = self.vals[x.0 as usize].iter().map(|&v| v.ln()).collect();
        self.push(Op::Ln { x }, val)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let val = self.vals[x.0 as usize]
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(Op::Sigmoid { x }, val)
    }

    /// Inverted dropout with a fixed mask of {0, 1/(1-p)} factors.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        debug_assert_eq!(mask.len(), self.vals[x.0 as usize].len());
        let val = self.vals[x.0 as usize]
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        self.push(
            Op::Dropout {
                x,
                mask: mask.into(),
            },
            val,
        )
    }

    /// Batch normalization over a set of same-shaped nodes using batch
    /// statistics (biased variance). Returns one output node per input plus
    /// the batch statistics so the caller can maintain running averages.
    pub fn batch_norm_train(
        &mut self,
        xs: &[NodeId],
        gamma: ParamId,
        beta: ParamId,
        eps: f64,
    ) -> (Vec<NodeId>, BnBatchStats) {
        let n = xs.len();
        assert!(n > 0);
        let dim = self.vals[xs[0].0 as usize].len();
        let mut mean = vec![0.0; dim];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(&self.vals[x.0 as usize]) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for x in xs {
            for (k, v) in self.vals[x.0 as usize].iter().enumerate() {
                let d = v - mean[k];
                var[k] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| {
                self.vals[x.0 as usize]
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| (v - mean[k]) * inv_std[k])
                    .collect()
            })
            .collect();
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let xs_rc: Rc<[NodeId]> = xs.into();
        let gv = self.store.get(gamma).data.clone();
        let bv = self.store.get(beta).data.clone();
        let outs: Vec<NodeId> = (0..n)
            .map(|slot| {
                let val: Vec<f64> = xhat[slot]
                    .iter()
                    .enumerate()
                    .map(|(k, &h)| gv[k] * h + bv[k])
                    .collect();
                self.push(
                    Op::BnTrain {
                        xs: Rc::clone(&xs_rc),
                        xhat: Rc::clone(&xhat),
                        inv_std: Rc::clone(&inv_std),
                        slot,
                        gamma,
                        beta,
                    },
                    val,
                )
            })
            .collect();
        (outs, BnBatchStats { mean, var })
    }

    /// Batch normalization with fixed statistics (inference path).
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        run_mean: ParamId,
        run_var: ParamId,
        eps: f64,
    ) -> NodeId {
        let gv = &self.store.get(gamma).data;
        let bv = &self.store.get(beta).data;
        let rm = &self.store.get(run_mean).data;
        let rv = &self.store.get(run_var).data;
        let scale: Vec<f64> = rv.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = self.vals[x.0 as usize]
            .iter()
            .enumerate()
            .map(|(k, &v)| (v - rm[k]) * scale[k])
            .collect();
        let val: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(k, &h)| gv[k] * h + bv[k])
            .collect();
        self.push(
            Op::BnEval {
                x,
                gamma,
                beta,
                xhat: xhat.into(),
                scale: scale.into(),
            },
            val,
        )
    }

    /// Accumulate parameter gradients of the scalar at `root` into `grads`.
    pub fn backward(&self, root: NodeId, grads: &mut Grads) {
        self.backward_impl(root, grads, None);
    }

    /// Like `backward`, also exposing per-node input gradients for tests.
    pub fn backward_with_node_grads(&self, root: NodeId, grads: &mut Grads) -> Vec<Option<Vec<f64>>> {
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; self.ops.len()];
        self.backward_impl(root, grads, Some(&mut node_grads));
        node_grads
    }

    fn backward_impl(
        &self,
        root: NodeId,
        grads: &mut Grads,
        mut keep: Option<&mut Vec<Option<Vec<f64>>>>,
    ) {
        assert_eq!(self.vals[root.0 as usize].len(), 1, "backward root must be scalar");
        let mut ng: Vec<Option<Vec<f64>>> = vec![None; self.ops.len()];
        ng[root.0 as usize] = Some(vec![1.0]);

        // Helper to lazily materialize a gradient slot.
        fn slot<'g>(ng: &'g mut [Option<Vec<f64>>], id: NodeId, dim: usize) -> &'g mut Vec<f64> {
            ng[id.0 as usize].get_or_insert_with(|| vec![0.0; dim])
        }

        for idx in (0..self.ops.len()).rev() {
            let g = match ng[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(keep) = keep.as_deref_mut() {
                keep[idx] = Some(g.clone());
            }
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Lookup { t, row } => {
                    let tensor = self.store.get(*t);
                    let dst = &mut grads.of_mut(*t)[row * tensor.cols..(row + 1) * tensor.cols];
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::Affine { w, b, x, frozen } => {
                    let wt = self.store.get(*w);
                    let xv = &self.vals[x.0 as usize];
                    {
                        let gx = slot(&mut ng, *x, xv.len());
                        // For frozen ops the live store still holds the same
                        // values during training backward; finite-difference
                        // replay never calls backward.
                        for r in 0..wt.rows {
                            let row = wt.row(r);
                            let gr = g[r];
                            for c in 0..wt.cols {
                                gx[c] += row[c] * gr;
                            }
                        }
                    }
                    if !frozen {
                        let gw = grads.of_mut(*w);
                        for r in 0..wt.rows {
                            let gr = g[r];
                            let dst = &mut gw[r * wt.cols..(r + 1) * wt.cols];
                            for c in 0..wt.cols {
                                dst[c] += gr * xv[c];
                            }
                        }
                        let gb = grads.of_mut(*b);
                        for r in 0..wt.rows {
                            gb[r] += g[r];
                        }
                    }
                }
                Op::Act { x, kind } => {
                    let xv = &self.vals[x.0 as usize];
                    let gx = slot(&mut ng, *x, xv.len());
                    for (k, gv) in g.iter().enumerate() {
                        gx[k] += gv * kind.derivative(xv[k]);
                    }
                }
                Op::Mean { xs } => {
                    let n = xs.len() as f64;
                    for x in xs.iter() {
                        let gx = slot(&mut ng, *x, g.len());
                        for (a, b) in gx.iter_mut().zip(&g) {
                            *a += b / n;
                        }
                    }
                }
                Op::Concat { xs } => {
                    let mut off = 0;
                    for x in xs.iter() {
                        let dim = self.vals[x.0 as usize].len();
                        let gx = slot(&mut ng, *x, dim);
                        for k in 0..dim {
                            gx[k] += g[off + k];
                        }
                        off += dim;
                    }
                }
                Op::Slice { x, start } => {
                    let dim = self.vals[x.0 as usize].len();
                    let gx = slot(&mut ng, *x, dim);
                    for (k, v) in g.iter().enumerate() {
                        gx[start + k] += v;
                    }
                }
                Op::Add { a, b } => {
                    for t in [a, b] {
                        let gt = slot(&mut ng, *t, g.len());
                        for (x, y) in gt.iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                }
                Op::Sub { a, b } => {
                    {
                        let ga = slot(&mut ng, *a, g.len());
                        for (x, y) in ga.iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                    let gb = slot(&mut ng, *b, g.len());
                    for (x, y) in gb.iter_mut().zip(&g) {
                        *x -= y;
                    }
                }
                Op::AddScaled { a, b, k } => {
                    {
                        let ga = slot(&mut ng, *a, g.len());
                        for (x, y) in ga.iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                    let gb = slot(&mut ng, *b, g.len());
                    for (x, y) in gb.iter_mut().zip(&g) {
                        *x += k * y;
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.vals[a.0 as usize].clone();
                    let bv = self.vals[b.0 as usize].clone();
                    {
                        let ga = slot(&mut ng, *a, g.len());
                        for k in 0..g.len() {
                            ga[k] += g[k] * bv[k];
                        }
                    }
                    let gb = slot(&mut ng, *b, g.len());
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
                Op::Square { x } => {
                    let xv = &self.vals[x.0 as usize];
                    let gx = slot(&mut ng, *x, xv.len());
                    for k in 0..g.len() {
                        gx[k] += 2.0 * xv[k] * g[k];
                    }
                }
                Op::Scale { x, k } => {
                    let gx = slot(&mut ng, *x, g.len());
                    for (a, b) in gx.iter_mut().zip(&g) {
                        *a += k * b;
                    }
                }
                Op::Sum { x } => {
                    let dim = self.vals[x.0 as usize].len();
                    let gx = slot(&mut ng, *x, dim);
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                }
                Op::AddMany { xs } => {
                    for x in xs.iter() {
                        let gx = slot(&mut ng, *x, g.len());
                        for (a, b) in gx.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                }
                Op::ExpNegClamped { x, lo, hi } => {
                    let xv = &self.vals[x.0 as usize];
                    let yv = &self.vals[idx];
                    let gx = slot(&mut ng, *x, xv.len());
                    for k in 0..g.len() {
                        if xv[k] > *lo && xv[k] < *hi {
                            gx[k] -= g[k] * yv[k];
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &self.vals[x.0 as usize];
                    let gx = slot(&mut ng, *x, xv.len());
                    for k in 0..g.len() {
                        if xv[k] > *lo && xv[k] < *hi {
                            gx[k] += g[k];
                        }
                    }
                }
                Op::Ln { x } => {
                    let xv = &self.vals[x.0 as usize];
                    let gx = slot(&mut ng, *x, xv.len());
                    for k in 0..g.len() {
                        gx[k] += g[k] / xv[k];
                    }
                }
                Op::Sigmoid { x } => {
                    let yv = self.vals[idx].clone();
                    let gx = slot(&mut ng, *x, yv.len());
                    for k in 0..g.len() {
                        gx[k] += g[k] * yv[k] * (1.0 - yv[k]);
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = slot(&mut ng, *x, g.len());
                    for k in 0..g.len() {
                        gx[k] += g[k] * mask[k];
                    }
                }
                Op::BnTrain {
                    xs,
                    xhat,
                    inv_std,
                    slot: j,
                    gamma,
                    beta,
                } => {
                    let n = xs.len() as f64;
                    let gv = self.store.get(*gamma).data.clone();
                    {
                        let gg = grads.of_mut(*gamma);
                        for k in 0..g.len() {
                            gg[k] += g[k] * xhat[*j][k];
                        }
                    }
                    {
                        let gb = grads.of_mut(*beta);
                        for k in 0..g.len() {
                            gb[k] += g[k];
                        }
                    }
                    // d xhat_j / d x_i = inv_std * (delta_ij - 1/n - xhat_j*xhat_i/n)
                    for (i, x) in xs.iter().enumerate() {
                        let gx = slot(&mut ng, *x, g.len());
                        for k in 0..g.len() {
                            let delta = if i == *j { 1.0 } else { 0.0 };
                            let dxh =
                                inv_std[k] * (delta - 1.0 / n - xhat[*j][k] * xhat[i][k] / n);
                            gx[k] += g[k] * gv[k] * dxh;
                        }
                    }
                }
                Op::BnEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    scale,
                } => {
                    let gv = self.store.get(*gamma).data.clone();
                    {
                        let gg = grads.of_mut(*gamma);
                        for k in 0..g.len() {
                            gg[k] += g[k] * xhat[k];
                        }
                    }
                    {
                        let gb = grads.of_mut(*beta);
                        for k in 0..g.len() {
                            gb[k] += g[k];
                        }
                    }
                    let gx = slot(&mut ng, *x, g.len());
                    for k in 0..g.len() {
                        gx[k] += g[k] * gv[k] * scale[k];
                    }
                }
            }
        }
    }
}
