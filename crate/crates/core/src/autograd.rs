//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in creation order,
//! which is already a topological order: an op's inputs always have smaller
//! ids than the op itself. [`Tape::backward`] walks the ids in reverse and
//! visits each recorded op once.
//!
//! ```
//! use mactn::autograd::Tape;
//! use mactn::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
//! let loss = x.mul(x).unwrap().sum_all().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
//! ```
//!
//! Tapes are single-threaded (`!Sync`) and meant to be dropped once the
//! gradients have been read.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{check_finite, numel, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Abs,
    Relu,
    Scale(f64),
    Shift(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    SumAll {
        a: usize,
    },
    ReduceAxis {
        a: usize,
        axis: usize,
        mean: bool,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        groups: usize,
        padding: usize,
    },
    AvgPool1d {
        a: usize,
        pool: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    flops: Cell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

/// Statistics of one training-mode batch-norm call, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<f64>,
}

/// Normalization statistics source for [`Var::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

// ---------------------------------------------------------------------------
// Kernels shared by forward and backward passes.

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Per-dimension strides of `operand` aligned to the trailing dims of `out`,
/// zero where the operand is broadcast.
fn broadcast_strides(operand: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if operand.len() > out.len() {
        return None;
    }
    let own = strides(operand);
    let lead = out.len() - operand.len();
    let mut s = vec![0; out.len()];
    for (j, (&d, &st)) in operand.iter().zip(&own).enumerate() {
        let od = out[lead + j];
        if d == od {
            s[lead + j] = if d == 1 { 0 } else { st };
        } else if d != 1 {
            return None;
        }
    }
    Some(s)
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn broadcast_walk(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = out.len();
    let total = numel(out);
    let mut idx = vec![0usize; n];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        let mut d = n;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_into(x: &[f64], out: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(x[base + j * inner]);
            }
            let mut s = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                s += e;
            }
            for j in 0..len {
                out[base + j * inner] /= s;
            }
        }
    }
}

fn ensure<'g>(slot: &'g mut Option<Vec<f64>>, len: usize) -> &'g mut [f64] {
    slot.get_or_insert_with(|| vec![0.0; len])
}

// ---------------------------------------------------------------------------

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulate based flop count (2 per MAC) of the convolutions
    /// and matrix products recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    fn add_flops(&self, f: usize) {
        self.flops.set(self.flops.get() + f as u64);
    }

    /// Records `t` as a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    /// Records `t` as a differentiable leaf regardless of its flag.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records `t` as a non-differentiable leaf.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn finish(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        inputs: &[usize],
        name: &'static str,
    ) -> Result<Var<'_>> {
        check_finite(&value, name)?;
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(shape, value, op, rg))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let nodes = self.nodes.borrow();
        let base = &nodes[first.id].shape;
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = &nodes[p.id].shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along {axis}: {s:?} vs {base:?}"
                )));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let n = &nodes[p.id];
                let chunk = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        drop(nodes);
        self.finish(out_shape, out, Op::Concat { parts: ids.clone(), axis }, &ids, "concat")
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (a, b) = (*a, *b);
            let sa = broadcast_strides(&nodes[a].shape, &node.shape).expect("checked in forward");
            let sb = broadcast_strides(&nodes[b].shape, &node.shape).expect("checked in forward");
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if wants(a) {
                let mut ga = grads[a].take().unwrap_or_else(|| vec![0.0; av.len()]);
                broadcast_walk(&node.shape, &sa, &sb, |o, ia, ib| {
                    ga[ia] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => g[o],
                        BinaryKind::Mul => g[o] * bv[ib],
                    };
                });
                grads[a] = Some(ga);
            }
            if wants(b) {
                let mut gb = grads[b].take().unwrap_or_else(|| vec![0.0; bv.len()]);
                broadcast_walk(&node.shape, &sa, &sb, |o, ia, ib| {
                    gb[ib] += match kind {
                        BinaryKind::Add => g[o],
                        BinaryKind::Sub => -g[o],
                        BinaryKind::Mul => g[o] * av[ia],
                    };
                });
                grads[b] = Some(gb);
            }
        }
        Op::Unary { kind, a } => {
            let x = &nodes[*a].value;
            let ga = ensure(&mut grads[*a], x.len());
            match kind {
                UnaryKind::Abs => {
                    for ((d, &xi), &gi) in ga.iter_mut().zip(x).zip(g) {
                        // sign(0) = 0
                        let s = if xi > 0.0 {
                            1.0
                        } else if xi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *d += s * gi;
                    }
                }
                UnaryKind::Relu => {
                    for ((d, &xi), &gi) in ga.iter_mut().zip(x).zip(g) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
                UnaryKind::Scale(c) => ga.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi),
                UnaryKind::Shift(_) => ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi),
            }
        }
        Op::SumAll { a } => {
            let n = nodes[*a].value.len();
            ensure(&mut grads[*a], n).iter_mut().for_each(|d| *d += g[0]);
        }
        Op::ReduceAxis { a, axis, mean } => {
            let (outer, len, inner) = axis_split(&nodes[*a].shape, *axis);
            let scale = if *mean { 1.0 / len as f64 } else { 1.0 };
            let ga = ensure(&mut grads[*a], outer * len * inner);
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        ga[(o * len + j) * inner + i] += g[o * inner + i] * scale;
                    }
                }
            }
        }
        Op::Softmax { a, axis } => {
            let y = &node.value;
            let (outer, len, inner) = axis_split(&node.shape, *axis);
            let ga = ensure(&mut grads[*a], y.len());
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len)
                        .map(|j| g[base + j * inner] * y[base + j * inner])
                        .sum();
                    for j in 0..len {
                        let k = base + j * inner;
                        ga[k] += y[k] * (g[k] - dot);
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels } => {
            let x = &nodes[*logits].value;
            let (b, c) = (nodes[*logits].shape[0], nodes[*logits].shape[1]);
            let mut p = vec![0.0; x.len()];
            softmax_into(x, &mut p, b, c, 1);
            let ga = ensure(&mut grads[*logits], x.len());
            let s = g[0] / b as f64;
            for (r, &lab) in labels.iter().enumerate() {
                for j in 0..c {
                    let onehot = if j == lab { 1.0 } else { 0.0 };
                    ga[r * c + j] += s * (p[r * c + j] - onehot);
                }
            }
        }
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if wants(*a) {
                // dA = G B^T
                let ga = ensure(&mut grads[*a], m * k);
                gemm(m, n, k, g, false, &nodes[*b].value, true, ga, 1.0);
            }
            if wants(*b) {
                // dB = A^T G
                let gb = ensure(&mut grads[*b], k * n);
                gemm(k, m, n, &nodes[*a].value, true, g, false, gb, 1.0);
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let sa = &nodes[*a].shape;
            let (bt, m, k) = (sa[0], sa[1], sa[2]);
            let n = node.shape[2];
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if wants(*a) {
                let ga = ensure(&mut grads[*a], bt * m * k);
                for i in 0..bt {
                    // dA = G op(B)^T
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        false,
                        &bv[i * k * n..],
                        !*trans_b,
                        &mut ga[i * m * k..],
                        1.0,
                    );
                }
            }
            if wants(*b) {
                let gb = ensure(&mut grads[*b], bt * k * n);
                for i in 0..bt {
                    if *trans_b {
                        // B stored n x k: dB = G^T A
                        gemm(n, m, k, &g[i * m * n..], true, &av[i * m * k..], false, &mut gb[i * k * n..], 1.0);
                    } else {
                        gemm(k, m, n, &av[i * m * k..], true, &g[i * m * n..], false, &mut gb[i * k * n..], 1.0);
                    }
                }
            }
        }
        Op::Reshape { a } => {
            ensure(&mut grads[*a], g.len())
                .iter_mut()
                .zip(g)
                .for_each(|(d, gi)| *d += gi);
        }
        Op::Permute { a, perm } => {
            let in_st = strides(&nodes[*a].shape);
            let ps: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
            let zero = vec![0; ps.len()];
            let ga = ensure(&mut grads[*a], g.len());
            broadcast_walk(&node.shape, &ps, &zero, |o, ia, _| ga[ia] += g[o]);
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_split(&node.shape, *axis);
            let mut offset = 0;
            let total_chunk = node.shape[*axis] * inner;
            for &p in parts {
                let chunk = nodes[p].shape[*axis] * inner;
                if wants(p) {
                    let gp = ensure(&mut grads[p], outer * chunk);
                    for o in 0..outer {
                        let src = &g[o * total_chunk + offset..o * total_chunk + offset + chunk];
                        gp[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
                offset += chunk;
            }
        }
        Op::Narrow { a, axis, start } => {
            let src_shape = &nodes[*a].shape;
            let (outer, len, inner) = axis_split(src_shape, *axis);
            let take = node.shape[*axis];
            let ga = ensure(&mut grads[*a], outer * len * inner);
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                let src = o * take * inner;
                ga[dst..dst + take * inner]
                    .iter_mut()
                    .zip(&g[src..src + take * inner])
                    .for_each(|(d, s)| *d += s);
            }
        }
        Op::Conv1d {
            x,
            w,
            bias,
            groups,
            padding,
        } => conv1d_backward(nodes, node, g, grads, *x, *w, *bias, *groups, *padding),
        Op::AvgPool1d { a, pool } => {
            let t_in = *nodes[*a].shape.last().unwrap();
            let t_out = *node.shape.last().unwrap();
            let rows = g.len() / t_out;
            let inv = 1.0 / *pool as f64;
            let ga = ensure(&mut grads[*a], rows * t_in);
            for r in 0..rows {
                for j in 0..t_out {
                    let gv = g[r * t_out + j] * inv;
                    for q in 0..*pool {
                        ga[r * t_in + j * pool + q] += gv;
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            batch_stats,
        } => {
            let s = &nodes[*x].shape;
            let (b, c, t) = (s[0], s[1], s[2]);
            let xv = &nodes[*x].value;
            let gam = &nodes[*gamma].value;
            let n = (b * t) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut sum_dxhat = vec![0.0; c];
            let mut sum_dxhat_xhat = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * t;
                    for ti in 0..t {
                        let xhat = (xv[off + ti] - mean[ci]) * inv_std[ci];
                        let gi = g[off + ti];
                        dgamma[ci] += gi * xhat;
                        dbeta[ci] += gi;
                        sum_dxhat[ci] += gi * gam[ci];
                        sum_dxhat_xhat[ci] += gi * gam[ci] * xhat;
                    }
                }
            }
            if wants(*x) {
                let gx = ensure(&mut grads[*x], xv.len());
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * t;
                        for ti in 0..t {
                            let dxhat = g[off + ti] * gam[ci];
                            gx[off + ti] += if *batch_stats {
                                let xhat = (xv[off + ti] - mean[ci]) * inv_std[ci];
                                inv_std[ci] / n
                                    * (n * dxhat - sum_dxhat[ci] - xhat * sum_dxhat_xhat[ci])
                            } else {
                                dxhat * inv_std[ci]
                            };
                        }
                    }
                }
            }
            if wants(*gamma) {
                let gg = ensure(&mut grads[*gamma], c);
                gg.iter_mut().zip(&dgamma).for_each(|(d, s)| *d += s);
            }
            if wants(*beta) {
                let gb = ensure(&mut grads[*beta], c);
                gb.iter_mut().zip(&dbeta).for_each(|(d, s)| *d += s);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let d = *nodes[*x].shape.last().unwrap();
            let rows = g.len() / d;
            let xv = &nodes[*x].value;
            let gam = &nodes[*gamma].value;
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut gx = if wants(*x) { Some(vec![0.0; xv.len()]) } else { None };
            for r in 0..rows {
                let off = r * d;
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for j in 0..d {
                    let xhat = (xv[off + j] - mean[r]) * inv_std[r];
                    let gj = g[off + j];
                    dgamma[j] += gj * xhat;
                    dbeta[j] += gj;
                    let dxhat = gj * gam[j];
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                }
                if let Some(gx) = gx.as_mut() {
                    let df = d as f64;
                    for j in 0..d {
                        let xhat = (xv[off + j] - mean[r]) * inv_std[r];
                        let dxhat = g[off + j] * gam[j];
                        gx[off + j] = inv_std[r] / df * (df * dxhat - s1 - xhat * s2);
                    }
                }
            }
            if let Some(gx) = gx {
                let acc = ensure(&mut grads[*x], xv.len());
                acc.iter_mut().zip(&gx).for_each(|(a, b)| *a += b);
            }
            if wants(*gamma) {
                let gg = ensure(&mut grads[*gamma], d);
                gg.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
            }
            if wants(*beta) {
                let gb = ensure(&mut grads[*beta], d);
                gb.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    w: usize,
    bias: Option<usize>,
    groups: usize,
    padding: usize,
) {
    let xs = &nodes[x].shape;
    let ws = &nodes[w].shape;
    let (b, cin, t_in) = (xs[0], xs[1], xs[2]);
    let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
    let t_out = node.shape[2];
    let cout_g = cout / groups;
    let xv = &nodes[x].value;
    let wv = &nodes[w].value;

    if let Some(bi) = bias {
        if nodes[bi].requires_grad {
            let gb = ensure(&mut grads[bi], cout);
            for bb in 0..b {
                for oc in 0..cout {
                    let off = (bb * cout + oc) * t_out;
                    gb[oc] += g[off..off + t_out].iter().sum::<f64>();
                }
            }
        }
    }

    let pointwise = k == 1 && padding == 0 && groups == 1;
    if nodes[w].requires_grad {
        let gw = ensure(&mut grads[w], wv.len());
        if pointwise {
            for bb in 0..b {
                // dW += G_b X_b^T
                gemm(cout, t_out, cin, &g[bb * cout * t_out..], false, &xv[bb * cin * t_in..], true, gw, 1.0);
            }
        } else {
            for bb in 0..b {
                for oc in 0..cout {
                    let grp = oc / cout_g;
                    let g_row = &g[(bb * cout + oc) * t_out..][..t_out];
                    for ic in 0..cin_g {
                        let x_row = &xv[(bb * cin + grp * cin_g + ic) * t_in..][..t_in];
                        for kk in 0..k {
                            let (lo, hi) = valid_range(kk, padding, t_in, t_out);
                            if lo >= hi {
                                continue;
                            }
                            let shift = kk as isize - padding as isize;
                            let xs = &x_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                            let acc: f64 = g_row[lo..hi].iter().zip(xs).map(|(a, b)| a * b).sum();
                            gw[(oc * cin_g + ic) * k + kk] += acc;
                        }
                    }
                }
            }
        }
    }
    if nodes[x].requires_grad {
        let gx = ensure(&mut grads[x], xv.len());
        if pointwise {
            for bb in 0..b {
                // dX_b += W^T G_b
                gemm(cin, cout, t_out, wv, true, &g[bb * cout * t_out..], false, &mut gx[bb * cin * t_in..], 1.0);
            }
        } else {
            for bb in 0..b {
                for oc in 0..cout {
                    let grp = oc / cout_g;
                    let g_row = &g[(bb * cout + oc) * t_out..][..t_out];
                    for ic in 0..cin_g {
                        let xoff = (bb * cin + grp * cin_g + ic) * t_in;
                        for kk in 0..k {
                            let wk = wv[(oc * cin_g + ic) * k + kk];
                            let (lo, hi) = valid_range(kk, padding, t_in, t_out);
                            if lo >= hi {
                                continue;
                            }
                            let shift = kk as isize - padding as isize;
                            let start = (xoff as isize + lo as isize + shift) as usize;
                            gx[start..start + (hi - lo)]
                                .iter_mut()
                                .zip(&g_row[lo..hi])
                                .for_each(|(d, gv)| *d += wk * gv);
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `t` for which tap `k` reads a real (unpadded) input sample.
fn valid_range(k: usize, padding: usize, t_in: usize, t_out: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k);
    let hi = ((t_in + padding) as isize - k as isize).clamp(0, t_out as isize) as usize;
    (lo, hi.max(lo))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    /// Runs `f` on the stored values without copying.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars recorded on different tapes"
        );
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.same_tape(&other);
        let nodes = self.tape.nodes.borrow();
        let (na, nb) = (&nodes[self.id], &nodes[other.id]);
        // The result takes the shape of whichever operand is not broadcast.
        let out_shape = if broadcast_strides(&nb.shape, &na.shape).is_some() {
            na.shape.clone()
        } else if broadcast_strides(&na.shape, &nb.shape).is_some() {
            nb.shape.clone()
        } else {
            return Err(Error::dim(format!(
                "{kind:?}: shapes {:?} and {:?} are not broadcast-compatible",
                na.shape, nb.shape
            )));
        };
        let mut out = vec![0.0; numel(&out_shape)];
        if na.shape == nb.shape {
            for ((o, a), b) in out.iter_mut().zip(&na.value).zip(&nb.value) {
                *o = match kind {
                    BinaryKind::Add => a + b,
                    BinaryKind::Sub => a - b,
                    BinaryKind::Mul => a * b,
                };
            }
        } else {
            let sa = broadcast_strides(&na.shape, &out_shape).unwrap();
            let sb = broadcast_strides(&nb.shape, &out_shape).unwrap();
            let (av, bv) = (&na.value, &nb.value);
            broadcast_walk(&out_shape, &sa, &sb, |o, ia, ib| {
                out[o] = match kind {
                    BinaryKind::Add => av[ia] + bv[ib],
                    BinaryKind::Sub => av[ia] - bv[ib],
                    BinaryKind::Mul => av[ia] * bv[ib],
                };
            });
        }
        drop(nodes);
        self.tape.finish(
            out_shape,
            out,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
            "elementwise",
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    fn unary(self, kind: UnaryKind) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let out: Vec<f64> = n
            .value
            .iter()
            .map(|&x| match kind {
                UnaryKind::Abs => x.abs(),
                UnaryKind::Relu => x.max(0.0),
                UnaryKind::Scale(c) => c * x,
                UnaryKind::Shift(c) => x + c,
            })
            .collect();
        let shape = n.shape.clone();
        drop(nodes);
        self.tape
            .finish(shape, out, Op::Unary { kind, a: self.id }, &[self.id], "unary")
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Abs)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::Scale(c))
    }

    /// Adds a constant to every element.
    pub fn shift(self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::Shift(c))
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let s: f64 = self.with_values(|v| v.iter().sum());
        self.tape
            .finish(vec![1], vec![s], Op::SumAll { a: self.id }, &[self.id], "sum")
    }

    fn reduce(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if axis >= n.shape.len() {
            return Err(Error::dim(format!("axis {axis} for shape {:?}", n.shape)));
        }
        let (outer, len, inner) = axis_split(&n.shape, axis);
        if len == 0 {
            return Err(Error::EmptyReduction {
                axis,
                shape: n.shape.clone(),
            });
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &n.value[(o * len + j) * inner..][..inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = n.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        drop(nodes);
        self.tape.finish(
            shape,
            out,
            Op::ReduceAxis {
                a: self.id,
                axis,
                mean,
            },
            &[self.id],
            "reduce",
        )
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, true)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if axis >= n.shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} for shape {:?}", n.shape)));
        }
        let (outer, len, inner) = axis_split(&n.shape, axis);
        let mut out = vec![0.0; n.value.len()];
        softmax_into(&n.value, &mut out, outer, len, inner);
        let shape = n.shape.clone();
        drop(nodes);
        self.tape
            .finish(shape, out, Op::Softmax { a: self.id, axis }, &[self.id], "softmax")
    }

    /// Mean softmax cross-entropy of `(batch, classes)` logits.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if n.shape.len() != 2 || n.shape[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {:?} with {} labels",
                n.shape,
                labels.len()
            )));
        }
        let c = n.shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidLabel {
                label: bad,
                n_classes: c,
            });
        }
        let mut loss = 0.0;
        for (r, &lab) in labels.iter().enumerate() {
            let row = &n.value[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[lab];
        }
        loss /= labels.len() as f64;
        drop(nodes);
        self.tape.finish(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
            },
            &[self.id],
            "cross_entropy",
        )
    }

    /// 2-D matrix product.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let nodes = self.tape.nodes.borrow();
        let (sa, sb) = (&nodes[self.id].shape, &nodes[other.id].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &nodes[self.id].value, false, &nodes[other.id].value, false, &mut out, 0.0);
        drop(nodes);
        self.tape.add_flops(2 * m * k * n);
        self.tape.finish(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
            "matmul",
        )
    }

    /// Batched product of `(n, m, k)` with `(n, k, p)`, or with `(n, p, k)`
    /// transposed when `trans_b`.
    pub fn bmm(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(&other);
        let nodes = self.tape.nodes.borrow();
        let (sa, sb) = (&nodes[self.id].shape, &nodes[other.id].shape);
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::dim(format!("bmm(trans_b={trans_b}): {sa:?} x {sb:?}")));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; bt * m * n];
        let (av, bv) = (&nodes[self.id].value, &nodes[other.id].value);
        for i in 0..bt {
            gemm(m, k, n, &av[i * m * k..], false, &bv[i * k * n..], trans_b, &mut out[i * m * n..], 0.0);
        }
        drop(nodes);
        self.tape.add_flops(2 * bt * m * k * n);
        self.tape.finish(
            vec![bt, m, n],
            out,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            &[self.id, other.id],
            "bmm",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, old) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.clone(), n.shape.clone())
        };
        if numel(shape) != value.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("cannot reshape {old:?} into {shape:?}")));
        }
        self.tape
            .finish(shape.to_vec(), value, Op::Reshape { a: self.id }, &[self.id], "reshape")
    }

    /// Output axis `j` is input axis `perm[j]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let mut seen = vec![false; n.shape.len()];
        let valid = perm.len() == n.shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::dim(format!(
                "invalid permutation {perm:?} for shape {:?}",
                n.shape
            )));
        }
        let in_st = strides(&n.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| n.shape[p]).collect();
        let ps: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
        let zero = vec![0; ps.len()];
        let mut out = vec![0.0; n.value.len()];
        broadcast_walk(&out_shape, &ps, &zero, |o, ia, _| out[o] = n.value[ia]);
        drop(nodes);
        self.tape.finish(
            out_shape,
            out,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
            "permute",
        )
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t>> {
        let nd = self.shape().len();
        if a >= nd || b >= nd {
            return Err(Error::dim(format!("transpose({a}, {b}) of rank {nd}")));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if axis >= n.shape.len() || len == 0 || start + len > n.shape[axis] {
            return Err(Error::dim(format!(
                "narrow(axis={axis}, {start}..{}) of {:?}",
                start + len,
                n.shape
            )));
        }
        let (outer, full, inner) = axis_split(&n.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = o * full * inner + start * inner;
            out.extend_from_slice(&n.value[s..s + len * inner]);
        }
        let mut shape = n.shape.clone();
        shape[axis] = len;
        drop(nodes);
        self.tape.finish(
            shape,
            out,
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
            &[self.id],
            "narrow",
        )
    }

    /// Grouped 1-D cross-correlation of `(B, C_in, T)` with weights
    /// `(C_out, C_in / groups, K)`, symmetric zero padding.
    pub fn conv1d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        groups: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let nodes = self.tape.nodes.borrow();
        let (xs, ws) = (&nodes[self.id].shape, &nodes[weight.id].shape);
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::dim(format!("conv1d: input {xs:?}, weight {ws:?}")));
        }
        let (b, cin, t_in) = (xs[0], xs[1], xs[2]);
        let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::dim(format!(
                "conv1d: {cin} input / {cout} output channels do not split into {groups} groups of weight {ws:?}"
            )));
        }
        if t_in + 2 * padding < k {
            return Err(Error::dim(format!(
                "conv1d: output length <= 0 (T={t_in}, K={k}, padding={padding})"
            )));
        }
        let t_out = t_in + 2 * padding - k + 1;
        if let Some(bv) = bias {
            let bs = &nodes[bv.id].shape;
            if bs.as_slice() != [cout] {
                return Err(Error::dim(format!("conv1d bias {bs:?}, expected [{cout}]")));
            }
        }
        let xv = &nodes[self.id].value;
        let wv = &nodes[weight.id].value;
        let cout_g = cout / groups;
        let mut out = vec![0.0; b * cout * t_out];
        if k == 1 && padding == 0 && groups == 1 {
            for bb in 0..b {
                gemm(cout, cin, t_out, wv, false, &xv[bb * cin * t_in..], false, &mut out[bb * cout * t_out..], 0.0);
            }
        } else {
            for bb in 0..b {
                for oc in 0..cout {
                    let grp = oc / cout_g;
                    let o_row = &mut out[(bb * cout + oc) * t_out..][..t_out];
                    for ic in 0..cin_g {
                        let x_row = &xv[(bb * cin + grp * cin_g + ic) * t_in..][..t_in];
                        for kk in 0..k {
                            let wk = wv[(oc * cin_g + ic) * k + kk];
                            let (lo, hi) = valid_range(kk, padding, t_in, t_out);
                            if lo >= hi {
                                continue;
                            }
                            let shift = kk as isize - padding as isize;
                            let xs = &x_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                            o_row[lo..hi].iter_mut().zip(xs).for_each(|(o, xv)| *o += wk * xv);
                        }
                    }
                }
            }
        }
        if let Some(bv) = bias {
            let bvals = &nodes[bv.id].value;
            for bb in 0..b {
                for oc in 0..cout {
                    out[(bb * cout + oc) * t_out..][..t_out]
                        .iter_mut()
                        .for_each(|v| *v += bvals[oc]);
                }
            }
        }
        drop(nodes);
        self.tape.add_flops(2 * b * cout * cin_g * k * t_out);
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|v| v.id));
        self.tape.finish(
            vec![b, cout, t_out],
            out,
            Op::Conv1d {
                x: self.id,
                w: weight.id,
                bias: bias.map(|v| v.id),
                groups,
                padding,
            },
            &inputs,
            "conv1d",
        )
    }

    /// Non-overlapping mean pooling over the last axis; the remainder is dropped.
    pub fn avg_pool1d(self, pool: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let t_in = *n.shape.last().unwrap();
        if pool == 0 || t_in < pool {
            return Err(Error::EmptyReduction {
                axis: n.shape.len() - 1,
                shape: n.shape.clone(),
            });
        }
        let t_out = t_in / pool;
        let rows = n.value.len() / t_in;
        let inv = 1.0 / pool as f64;
        let mut out = Vec::with_capacity(rows * t_out);
        for r in 0..rows {
            let row = &n.value[r * t_in..(r + 1) * t_in];
            for j in 0..t_out {
                out.push(row[j * pool..(j + 1) * pool].iter().sum::<f64>() * inv);
            }
        }
        let mut shape = n.shape.clone();
        *shape.last_mut().unwrap() = t_out;
        drop(nodes);
        self.tape
            .finish(shape, out, Op::AvgPool1d { a: self.id, pool }, &[self.id], "avg_pool1d")
    }

    /// Batch normalization of `(B, C, T)` per channel.
    ///
    /// With [`BnStats::Batch`] the statistics come from this batch and are
    /// returned for the running-average update.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        stats: BnStats<'_>,
        eps: f64,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        let nodes = self.tape.nodes.borrow();
        let s = nodes[self.id].shape.clone();
        if s.len() != 3 {
            return Err(Error::dim(format!("batch_norm expects (B, C, T), got {s:?}")));
        }
        let (b, c, t) = (s[0], s[1], s[2]);
        if nodes[gamma.id].shape != [c] || nodes[beta.id].shape != [c] {
            return Err(Error::dim(format!("batch_norm affine params must be [{c}]")));
        }
        let xv = &nodes[self.id].value;
        let (mean, var, returned) = match stats {
            BnStats::Batch => {
                let n = b * t;
                if n < 2 {
                    return Err(Error::Contract(format!(
                        "batch_norm in train mode needs B*T >= 2, got {n}"
                    )));
                }
                let mut mean = vec![0.0; c];
                for bb in 0..b {
                    for ci in 0..c {
                        mean[ci] += xv[(bb * c + ci) * t..][..t].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut ss = vec![0.0; c];
                for bb in 0..b {
                    for ci in 0..c {
                        ss[ci] += xv[(bb * c + ci) * t..][..t]
                            .iter()
                            .map(|v| (v - mean[ci]).powi(2))
                            .sum::<f64>();
                    }
                }
                let biased: Vec<f64> = ss.iter().map(|v| v / n as f64).collect();
                let unbiased: Vec<f64> = ss.iter().map(|v| v / (n - 1) as f64).collect();
                (
                    mean.clone(),
                    biased,
                    Some(BatchStats {
                        mean,
                        var: unbiased,
                    }),
                )
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("running stats length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (&nodes[gamma.id].value, &nodes[beta.id].value);
        let mut out = vec![0.0; xv.len()];
        for bb in 0..b {
            for ci in 0..c {
                let off = (bb * c + ci) * t;
                for ti in 0..t {
                    out[off + ti] = (xv[off + ti] - mean[ci]) * inv_std[ci] * gv[ci] + bv[ci];
                }
            }
        }
        drop(nodes);
        let batch_stats = returned.is_some();
        let v = self.tape.finish(
            s,
            out,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean,
                inv_std,
                batch_stats,
            },
            &[self.id, gamma.id, beta.id],
            "batch_norm",
        )?;
        Ok((v, returned))
    }

    /// Normalizes over the last axis, then scales and shifts.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let s = nodes[self.id].shape.clone();
        let d = *s.last().unwrap();
        if d < 2 {
            return Err(Error::dim(format!("layer_norm over a length-{d} axis")));
        }
        if nodes[gamma.id].shape != [d] || nodes[beta.id].shape != [d] {
            return Err(Error::dim(format!("layer_norm affine params must be [{d}]")));
        }
        let xv = &nodes[self.id].value;
        let (gv, bv) = (&nodes[gamma.id].value, &nodes[beta.id].value);
        let rows = xv.len() / d;
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            mean[r] = m;
            inv_std[r] = is;
            for j in 0..d {
                out[r * d + j] = (row[j] - m) * is * gv[j] + bv[j];
            }
        }
        drop(nodes);
        self.tape.finish(
            s,
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean,
                inv_std,
            },
            &[self.id, gamma.id, beta.id],
            "layer_norm",
        )
    }

    /// Affine map on the last axis: `x W + b` with `W` of shape `(d_in, d_out)`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let shape = self.shape();
        let ws = weight.shape();
        let d_in = *shape.last().unwrap();
        if ws.len() != 2 || ws[0] != d_in {
            return Err(Error::dim(format!("linear: input {shape:?}, weight {ws:?}")));
        }
        let rows = numel(&shape) / d_in;
        let flat = if shape.len() == 2 {
            self
        } else {
            self.reshape(&[rows, d_in])?
        };
        let mut y = flat.matmul(weight)?;
        if let Some(b) = bias {
            y = y.add(b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = ws[1];
        if out_shape.len() == 2 {
            Ok(y)
        } else {
            y.reshape(&out_shape)
        }
    }
}
