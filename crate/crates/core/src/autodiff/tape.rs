//! Operation record and reverse sweep.

use std::sync::Arc;

use crate::error::{contract, Error, Result};

use super::attention::{self, AttentionLayout};
use super::kernels::{gelu_grad, gemm, MatRef};
use super::tensor::{check_shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f32 },
    AddBias { a: Var, bias: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { a: Var, rows: Vec<usize> },
    Transpose { a: Var },
    Sum { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f32>, kept: usize },
    MseMasked { pred: Var, target: Var, mask: Vec<bool>, kept: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, layout: Arc<AttentionLayout>, probs: Vec<f32> },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f32>>,
    pub requires_grad: bool,
    pub op: Op,
}

/// Records executed operations in topological order; [`Tape::backward`]
/// walks that record once in reverse.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as an input. The value buffer is shared, not copied.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_node(Node {
            shape: t.shape().to_vec(),
            value: t.shared(),
            requires_grad: t.requires_grad(),
            op: Op::Leaf,
        })
    }

    /// Like [`Tape::leaf`] with an explicit gradient flag.
    pub fn leaf_with(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push_node(Node {
            shape: t.shape().to_vec(),
            value: t.shared(),
            requires_grad,
            op: Op::Leaf,
        })
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        check_shape(&shape, data.len())?;
        Ok(self.push_node(Node {
            shape,
            value: Arc::new(data),
            requires_grad: false,
            op: Op::Leaf,
        }))
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_shared(n.shape.clone(), Arc::clone(&n.value))
    }

    /// Accumulated gradient of the last backward sweeps with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    pub(crate) fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar. Gradients add onto those of earlier sweeps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar, got shape {:?}",
                node.shape
            )));
        }
        if !node.requires_grad {
            return Ok(());
        }
        let mut g: Vec<Option<Vec<f32>>> = Vec::new();
        g.resize_with(loss.0 + 1, || None);
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            self.propagate(i, &gi, &mut g);
            if self.grads.len() <= i {
                self.grads.resize_with(i + 1, || None);
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                slot => *slot = Some(gi),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gi: &[f32], g: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.as_slice();
        let shp = |v: Var| nodes[v.0].shape.as_slice();
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = nodes[i].shape[1];
                let gm = MatRef::new(gi, m, n);
                if wants(a) {
                    let bm = if trans_b {
                        MatRef::new(val(b), n, k)
                    } else {
                        MatRef::new(val(b), k, n).t()
                    };
                    gemm(gm, bm, 1.0, slot(g, a, m * k));
                }
                if wants(b) {
                    let am = MatRef::new(val(a), m, k);
                    if trans_b {
                        gemm(gm.t(), am, 1.0, slot(g, b, n * k));
                    } else {
                        gemm(am.t(), gm, 1.0, slot(g, b, k * n));
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if wants(v) {
                        add_into(slot(g, v, gi.len()), gi);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let s = slot(g, a, gi.len());
                    for ((s, gv), bv) in s.iter_mut().zip(gi).zip(val(b)) {
                        *s += gv * bv;
                    }
                }
                if wants(b) {
                    let s = slot(g, b, gi.len());
                    for ((s, gv), av) in s.iter_mut().zip(gi).zip(val(a)) {
                        *s += gv * av;
                    }
                }
            }
            &Op::Scale { a, factor } => {
                // exact zero: nothing flows, so β = 0 leaves other gradients bit-identical
                if wants(a) && factor != 0.0 {
                    let s = slot(g, a, gi.len());
                    s.iter_mut().zip(gi).for_each(|(s, gv)| *s += factor * gv);
                }
            }
            &Op::AddBias { a, bias } => {
                if wants(a) {
                    add_into(slot(g, a, gi.len()), gi);
                }
                if wants(bias) {
                    let c = shp(bias)[0];
                    let s = slot(g, bias, c);
                    for row in gi.chunks_exact(c) {
                        add_into(s, row);
                    }
                }
            }
            &Op::Gelu { a } => {
                if wants(a) {
                    let s = slot(g, a, gi.len());
                    for ((s, gv), x) in s.iter_mut().zip(gi).zip(val(a)) {
                        *s += gv * gelu_grad(*x);
                    }
                }
            }
            &Op::Softmax { a } => {
                if wants(a) {
                    let c = *shp(a).last().unwrap();
                    let y = nodes[i].value.as_slice();
                    let s = slot(g, a, gi.len());
                    for ((srow, grow), yrow) in s.chunks_exact_mut(c).zip(gi.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let inner: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((s, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += yv * (gv - inner);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = shp(gain)[0];
                if wants(gain) {
                    let s = slot(g, gain, d);
                    for (grow, hrow) in gi.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((s, gv), h) in s.iter_mut().zip(grow).zip(hrow) {
                            *s += gv * h;
                        }
                    }
                }
                if wants(bias) {
                    let s = slot(g, bias, d);
                    for grow in gi.chunks_exact(d) {
                        add_into(s, grow);
                    }
                }
                if wants(x) {
                    let gamma = val(gain);
                    let s = slot(g, x, gi.len());
                    let mut dh = vec![0.0f32; d];
                    for (r, ((srow, grow), hrow)) in s
                        .chunks_exact_mut(d)
                        .zip(gi.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        for ((o, gv), gm) in dh.iter_mut().zip(grow).zip(gamma) {
                            *o = gv * gm;
                        }
                        let mean_dh = dh.iter().sum::<f32>() / d as f32;
                        let mean_dhx = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        for ((o, dhv), h) in srow.iter_mut().zip(&dh).zip(hrow) {
                            *o += rstd[r] * (dhv - mean_dh - h * mean_dhx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if wants(table) {
                    let d = shp(table)[1];
                    let s = slot(g, table, val(table).len());
                    for (row, &id) in gi.chunks_exact(d).zip(ids) {
                        add_into(&mut s[id * d..(id + 1) * d], row);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        add_into(slot(g, p, n), &gi[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::GatherRows { a, rows } => {
                let a = *a;
                if wants(a) {
                    let c = shp(a)[1];
                    let s = slot(g, a, val(a).len());
                    for (grow, &r) in gi.chunks_exact(c).zip(rows) {
                        add_into(&mut s[r * c..(r + 1) * c], grow);
                    }
                }
            }
            &Op::Transpose { a } => {
                if wants(a) {
                    let (r, c) = (shp(a)[0], shp(a)[1]);
                    let s = slot(g, a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += gi[j * r + i];
                        }
                    }
                }
            }
            &Op::Sum { a } => {
                if wants(a) {
                    let s = slot(g, a, val(a).len());
                    s.iter_mut().for_each(|v| *v += gi[0]);
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, kept } => {
                let logits = *logits;
                if wants(logits) && *kept > 0 {
                    let v = shp(logits)[1];
                    let scale = gi[0] / *kept as f32;
                    let s = slot(g, logits, val(logits).len());
                    for (r, (&t, &keep)) in targets.iter().zip(mask).enumerate() {
                        if !keep {
                            continue;
                        }
                        let srow = &mut s[r * v..(r + 1) * v];
                        let prow = &probs[r * v..(r + 1) * v];
                        for (o, p) in srow.iter_mut().zip(prow) {
                            *o += scale * p;
                        }
                        srow[t] -= scale;
                    }
                }
            }
            Op::MseMasked { pred, target, mask, kept } => {
                let (pred, target) = (*pred, *target);
                if *kept == 0 {
                    return;
                }
                let d = shp(pred)[1];
                let scale = 2.0 * gi[0] / (*kept * d) as f32;
                for (v, sign) in [(pred, 1.0f32), (target, -1.0f32)] {
                    if !wants(v) {
                        continue;
                    }
                    let s = slot(g, v, val(pred).len());
                    let (p, t) = (val(pred), val(target));
                    for (r, &keep) in mask.iter().enumerate() {
                        if !keep {
                            continue;
                        }
                        for j in r * d..(r + 1) * d {
                            s[j] += sign * scale * (p[j] - t[j]);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, layout, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let d = shp(q)[1];
                let len = val(q).len();
                // take the three buffers out so they can be borrowed mutably together
                let mut dq = wants(q).then(|| take_slot(g, q, len));
                let mut dk = wants(k).then(|| take_slot(g, k, len));
                let mut dv = wants(v).then(|| take_slot(g, v, len));
                attention::backward(
                    val(q),
                    val(k),
                    val(v),
                    d,
                    *heads,
                    layout,
                    probs,
                    gi,
                    attention::Grads {
                        q: dq.as_deref_mut(),
                        k: dk.as_deref_mut(),
                        v: dv.as_deref_mut(),
                    },
                );
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(buf) = buf {
                        match &mut g[var.0] {
                            Some(acc) => add_into(acc, &buf),
                            s => *s = Some(buf),
                        }
                    }
                }
            }
        }
    }
}

fn slot(g: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    g[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn take_slot(g: &mut [Option<Vec<f32>>], v: Var, len: usize) -> Vec<f32> {
    g[v.0].take().unwrap_or_else(|| vec![0.0; len])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
