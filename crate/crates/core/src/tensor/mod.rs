//! Dense f64 tensors with reverse-mode differentiation on a tape.
//!
//! A [`Tape`] records every primitive as it is built; [`Tape::backward`]
//! replays adjoints in reverse and accumulates gradients into the
//! `requires_grad` leaves. Copies over views: every op materializes its
//! output, which keeps the adjoint code direct and the engine easy to check
//! against finite differences.
//!
//! A tape and its tensors form a single-threaded unit (`Rc` inside);
//! separate tapes may live on separate threads.

mod kernels;

pub use kernels::{broadcast_shape, numel, strides_for};
pub(crate) use kernels::{conv3d_forward, resolve_tripoint, Conv3dGeom};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::TensorError;
use kernels::*;

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    Neg(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    PowScalar(usize, f64),
    Clamp(usize, f64, f64),
    MatMul { a: usize, b: usize, alpha: f64 },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    MaskedSoftmax { x: usize, axis: usize, mask: Rc<[bool]> },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Conv3d { x: usize, w: usize, b: Option<usize>, geom: Conv3dGeom },
    SumAll(usize),
    MeanAll(usize),
    SumAxis { x: usize, axis: usize },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    IndexSelect { x: usize, axis: usize, indices: Rc<[usize]> },
    TrilinearSample { grid: usize, coords: usize },
}

impl Op {
    fn inputs(&self, out: &mut Vec<usize>) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b) => {
                out.push(*a);
                out.push(*b);
            }
            Op::Neg(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::PowScalar(a, _)
            | Op::Clamp(a, _, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Reshape(a) => out.push(*a),
            Op::MatMul { a, b, .. } => {
                out.push(*a);
                out.push(*b);
            }
            Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::MaskedSoftmax { x, .. }
            | Op::SumAxis { x, .. }
            | Op::Permute { x, .. }
            | Op::IndexSelect { x, .. } => out.push(*x),
            Op::LayerNorm { x, gain, bias, .. } => {
                out.push(*x);
                out.push(*gain);
                out.push(*bias);
            }
            Op::Conv3d { x, w, b, .. } => {
                out.push(*x);
                out.push(*w);
                if let Some(b) = b {
                    out.push(*b);
                }
            }
            Op::Concat { parts, .. } => out.extend_from_slice(parts),
            Op::TrilinearSample { grid, coords } => {
                out.push(*grid);
                out.push(*coords);
            }
        }
    }
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    /// Accumulated dLoss/dNode for `requires_grad` leaves; empty means zero.
    grad: Vec<f64>,
    needs_grad: bool,
    is_leaf: bool,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Ordered record of primitive operations; owner of all node buffers.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one tensor on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New leaf tensor. `product(shape)` must equal `data.len()`.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(TensorError::Invalid {
                op: "leaf",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel(shape), data.len()),
            });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, true, Op::Leaf))
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.push(vec![v], vec![], false, true, Op::Leaf)
    }

    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    pub fn zeros(&self, shape: &[usize], requires_grad: bool) -> Var {
        self.push(vec![0.0; numel(shape)], shape.to_vec(), requires_grad, true, Op::Leaf)
    }

    fn push(&self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool, is_leaf: bool, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            data,
            shape,
            grad: Vec::new(),
            needs_grad,
            is_leaf,
            op,
        });
        Var { tape: self.clone(), id }
    }

    fn push_op(&self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        let needs = {
            let inner = self.inner.borrow();
            let mut ins = Vec::with_capacity(4);
            op.inputs(&mut ins);
            ins.iter().any(|&i| inner.nodes[i].needs_grad)
        };
        self.push(data, shape, needs, false, op)
    }

    /// Accumulated gradient of a leaf (zeros if backward never reached it).
    pub fn grad(&self, v: &Var) -> Vec<f64> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[v.id];
        if node.grad.is_empty() {
            vec![0.0; node.data.len()]
        } else {
            node.grad.clone()
        }
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        for node in inner.nodes.iter_mut() {
            node.grad.clear();
        }
    }

    /// Reverse pass from a scalar loss. Gradients of `requires_grad` leaves
    /// accumulate across repeated calls; anything unreachable stays zero.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: "loss lives on a different tape".into(),
            });
        }
        let mut inner = self.inner.borrow_mut();
        let nodes = &mut inner.nodes;
        if nodes[loss.id].data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: nodes[loss.id].shape.clone() });
        }

        // Mark ancestors of the loss that can influence a gradient.
        let mut reachable = vec![false; loss.id + 1];
        let mut stack = vec![loss.id];
        let mut ins = Vec::with_capacity(8);
        while let Some(i) = stack.pop() {
            if reachable[i] || !nodes[i].needs_grad {
                continue;
            }
            reachable[i] = true;
            ins.clear();
            nodes[i].op.inputs(&mut ins);
            stack.extend(ins.iter().copied());
        }
        if !reachable[loss.id] {
            return Ok(()); // loss does not depend on any parameter
        }

        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        adj[loss.id] = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            if !reachable[i] {
                continue;
            }
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            if nodes[i].is_leaf {
                if nodes[i].grad.is_empty() {
                    nodes[i].grad = g;
                } else {
                    for (a, b) in nodes[i].grad.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
                continue;
            }
            let op = nodes[i].op.clone();
            backprop(nodes, &mut adj, &reachable, i, &g, &op);
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], reachable: &[bool], id: usize, contrib: Vec<f64>) {
    if !reachable[id] {
        return;
    }
    match &mut adj[id] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(contrib.iter()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

#[allow(clippy::too_many_lines)]
fn backprop(
    nodes: &mut [Node],
    adj: &mut [Option<Vec<f64>>],
    reachable: &[bool],
    out_id: usize,
    g: &[f64],
    op: &Op,
) {
    let out_shape = nodes[out_id].shape.clone();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (ash, bsh) = (nodes[*a].shape.clone(), nodes[*b].shape.clone());
            accumulate(adj, reachable, *a, reduce_to_shape(g, &out_shape, &ash));
            accumulate(adj, reachable, *b, reduce_to_shape(g, &out_shape, &bsh));
        }
        Op::Sub(a, b) => {
            let (ash, bsh) = (nodes[*a].shape.clone(), nodes[*b].shape.clone());
            accumulate(adj, reachable, *a, reduce_to_shape(g, &out_shape, &ash));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(adj, reachable, *b, reduce_to_shape(&neg, &out_shape, &bsh));
        }
        Op::Mul(a, b) | Op::Div(a, b) | Op::Minimum(a, b) | Op::Maximum(a, b) => {
            let (ash, bsh) = (nodes[*a].shape.clone(), nodes[*b].shape.clone());
            let ax = broadcast_expand(&nodes[*a].data, &ash, &out_shape);
            let bx = broadcast_expand(&nodes[*b].data, &bsh, &out_shape);
            let (da, db): (Vec<f64>, Vec<f64>) = match op {
                Op::Mul(..) => (
                    g.iter().zip(bx.iter()).map(|(g, b)| g * b).collect(),
                    g.iter().zip(ax.iter()).map(|(g, a)| g * a).collect(),
                ),
                Op::Div(..) => (
                    g.iter().zip(bx.iter()).map(|(g, b)| g / b).collect(),
                    g.iter()
                        .zip(ax.iter().zip(bx.iter()))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect(),
                ),
                // Ties route the gradient to the first operand.
                Op::Minimum(..) => (
                    g.iter()
                        .zip(ax.iter().zip(bx.iter()))
                        .map(|(g, (a, b))| if a <= b { *g } else { 0.0 })
                        .collect(),
                    g.iter()
                        .zip(ax.iter().zip(bx.iter()))
                        .map(|(g, (a, b))| if a <= b { 0.0 } else { *g })
                        .collect(),
                ),
                Op::Maximum(..) => (
                    g.iter()
                        .zip(ax.iter().zip(bx.iter()))
                        .map(|(g, (a, b))| if a >= b { *g } else { 0.0 })
                        .collect(),
                    g.iter()
                        .zip(ax.iter().zip(bx.iter()))
                        .map(|(g, (a, b))| if a >= b { 0.0 } else { *g })
                        .collect(),
                ),
                _ => unreachable!(),
            };
            accumulate(adj, reachable, *a, reduce_to_shape(&da, &out_shape, &ash));
            accumulate(adj, reachable, *b, reduce_to_shape(&db, &out_shape, &bsh));
        }
        Op::Neg(a) => accumulate(adj, reachable, *a, g.iter().map(|v| -v).collect()),
        Op::Relu(a) => {
            let x = &nodes[*a].data;
            // Subgradient at 0 is 0.
            let d = g.iter().zip(x.iter()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(adj, reachable, *a, d);
        }
        Op::Sigmoid(a) => {
            let y = &nodes[out_id].data;
            let d = g.iter().zip(y.iter()).map(|(g, s)| g * s * (1.0 - s)).collect();
            accumulate(adj, reachable, *a, d);
        }
        Op::Exp(a) => {
            let y = &nodes[out_id].data;
            accumulate(adj, reachable, *a, g.iter().zip(y.iter()).map(|(g, e)| g * e).collect());
        }
        Op::Ln(a) => {
            let x = &nodes[*a].data;
            accumulate(adj, reachable, *a, g.iter().zip(x.iter()).map(|(g, x)| g / x).collect());
        }
        Op::Sqrt(a) => {
            let y = &nodes[out_id].data;
            accumulate(adj, reachable, *a, g.iter().zip(y.iter()).map(|(g, s)| g / (2.0 * s)).collect());
        }
        Op::Abs(a) => {
            let x = &nodes[*a].data;
            let d = g
                .iter()
                .zip(x.iter())
                .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -*g } else { 0.0 })
                .collect();
            accumulate(adj, reachable, *a, d);
        }
        Op::Scale(a, s) => accumulate(adj, reachable, *a, g.iter().map(|v| v * s).collect()),
        Op::AddScalar(a, _) => accumulate(adj, reachable, *a, g.to_vec()),
        Op::PowScalar(a, p) => {
            let x = &nodes[*a].data;
            let d = g.iter().zip(x.iter()).map(|(g, &x)| g * p * x.powf(p - 1.0)).collect();
            accumulate(adj, reachable, *a, d);
        }
        Op::Clamp(a, lo, hi) => {
            let x = &nodes[*a].data;
            let d = g
                .iter()
                .zip(x.iter())
                .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                .collect();
            accumulate(adj, reachable, *a, d);
        }
        Op::MatMul { a, b, alpha } => {
            let plan = batched_matmul_plan(&nodes[*a].shape, &nodes[*b].shape).expect("checked at build");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut da = vec![0.0; nodes[*a].data.len()];
            let mut db = vec![0.0; nodes[*b].data.len()];
            let adata = &nodes[*a].data;
            let bdata = &nodes[*b].data;
            for (batch, &(ao, bo)) in plan.pairs.iter().enumerate() {
                let gslice = &g[batch * m * n..(batch + 1) * m * n];
                matmul_nt_into(gslice, &bdata[bo * k * n..(bo + 1) * k * n], m, n, k, *alpha, &mut da[ao * m * k..(ao + 1) * m * k]);
                matmul_tn_into(&adata[ao * m * k..(ao + 1) * m * k], gslice, m, k, n, *alpha, &mut db[bo * k * n..(bo + 1) * k * n]);
            }
            accumulate(adj, reachable, *a, da);
            accumulate(adj, reachable, *b, db);
        }
        Op::Softmax { x, axis } => {
            let y = &nodes[out_id].data;
            let mut d = vec![0.0; y.len()];
            let axis_len = out_shape[*axis];
            for_each_lane(&out_shape, *axis, |start, stride| {
                let mut dot = 0.0;
                for t in 0..axis_len {
                    let idx = start + t * stride;
                    dot += g[idx] * y[idx];
                }
                for t in 0..axis_len {
                    let idx = start + t * stride;
                    d[idx] = y[idx] * (g[idx] - dot);
                }
            });
            accumulate(adj, reachable, *x, d);
        }
        Op::LogSoftmax { x, axis } => {
            let y = &nodes[out_id].data; // log-probs
            let mut d = vec![0.0; y.len()];
            let axis_len = out_shape[*axis];
            for_each_lane(&out_shape, *axis, |start, stride| {
                let mut gsum = 0.0;
                for t in 0..axis_len {
                    gsum += g[start + t * stride];
                }
                for t in 0..axis_len {
                    let idx = start + t * stride;
                    d[idx] = g[idx] - y[idx].exp() * gsum;
                }
            });
            accumulate(adj, reachable, *x, d);
        }
        Op::MaskedSoftmax { x, axis, mask } => {
            let y = &nodes[out_id].data;
            let mut d = vec![0.0; y.len()];
            let axis_len = out_shape[*axis];
            for_each_lane(&out_shape, *axis, |start, stride| {
                let mut dot = 0.0;
                for t in 0..axis_len {
                    let idx = start + t * stride;
                    dot += g[idx] * y[idx];
                }
                for t in 0..axis_len {
                    let idx = start + t * stride;
                    d[idx] = if mask[idx % mask.len()] { 0.0 } else { y[idx] * (g[idx] - dot) };
                }
            });
            accumulate(adj, reachable, *x, d);
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xs = nodes[*x].shape.clone();
            let dim = *xs.last().unwrap();
            let rows = nodes[*x].data.len() / dim;
            let xd = &nodes[*x].data;
            let gaind = &nodes[*gain].data;
            let mut dx = vec![0.0; xd.len()];
            let mut dgain = vec![0.0; dim];
            let mut dbias = vec![0.0; dim];
            for r in 0..rows {
                let xrow = &xd[r * dim..(r + 1) * dim];
                let grow = &g[r * dim..(r + 1) * dim];
                let mean = xrow.iter().sum::<f64>() / dim as f64;
                let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xrow.iter().map(|&v| (v - mean) * inv_std).collect();
                let mut dxhat = vec![0.0; dim];
                for j in 0..dim {
                    dgain[j] += grow[j] * xhat[j];
                    dbias[j] += grow[j];
                    dxhat[j] = grow[j] * gaind[j];
                }
                let sum_dxhat: f64 = dxhat.iter().sum();
                let sum_dxhat_xhat: f64 = dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
                let nf = dim as f64;
                for j in 0..dim {
                    dx[r * dim + j] = inv_std / nf * (nf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                }
            }
            accumulate(adj, reachable, *x, dx);
            accumulate(adj, reachable, *gain, dgain);
            accumulate(adj, reachable, *bias, dbias);
        }
        Op::Conv3d { x, w, b, geom } => {
            let mut dx = vec![0.0; nodes[*x].data.len()];
            let mut dw = vec![0.0; nodes[*w].data.len()];
            let mut db = b.map(|bid| vec![0.0; nodes[bid].data.len()]);
            kernels::conv3d_backward(&nodes[*x].data, &nodes[*w].data, g, geom, &mut dx, &mut dw, db.as_deref_mut());
            accumulate(adj, reachable, *x, dx);
            accumulate(adj, reachable, *w, dw);
            if let (Some(bid), Some(db)) = (b, db) {
                accumulate(adj, reachable, *bid, db);
            }
        }
        Op::SumAll(a) => {
            let n = nodes[*a].data.len();
            accumulate(adj, reachable, *a, vec![g[0]; n]);
        }
        Op::MeanAll(a) => {
            let n = nodes[*a].data.len();
            accumulate(adj, reachable, *a, vec![g[0] / n as f64; n]);
        }
        Op::SumAxis { x, axis } => {
            let xs = nodes[*x].shape.clone();
            let mut d = vec![0.0; nodes[*x].data.len()];
            let axis_len = xs[*axis];
            let mut out_idx = 0usize;
            for_each_lane(&xs, *axis, |start, stride| {
                for t in 0..axis_len {
                    d[start + t * stride] = g[out_idx];
                }
                out_idx += 1;
            });
            accumulate(adj, reachable, *x, d);
        }
        Op::Reshape(a) => accumulate(adj, reachable, *a, g.to_vec()),
        Op::Permute { x, perm } => {
            // Scatter the adjoint back through the inverse permutation.
            let xs = nodes[*x].shape.clone();
            let mut d = vec![0.0; nodes[*x].data.len()];
            let in_strides = strides_for(&xs);
            let rank = xs.len();
            let mut coords = vec![0usize; rank]; // coordinates in output space
            for &gv in g.iter() {
                let mut src = 0usize;
                for d2 in 0..rank {
                    src += coords[d2] * in_strides[perm[d2]];
                }
                d[src] += gv;
                for d2 in (0..rank).rev() {
                    coords[d2] += 1;
                    if coords[d2] < out_shape[d2] {
                        break;
                    }
                    coords[d2] = 0;
                }
            }
            accumulate(adj, reachable, *x, d);
        }
        Op::Concat { parts, axis } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total_axis = out_shape[*axis];
            let mut offset = 0usize;
            for &p in parts.iter() {
                let psh = nodes[p].shape.clone();
                let plen = psh[*axis];
                let mut d = vec![0.0; nodes[p].data.len()];
                for o in 0..outer {
                    for t in 0..plen {
                        let src = (o * total_axis + offset + t) * inner;
                        let dst = (o * plen + t) * inner;
                        d[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                accumulate(adj, reachable, p, d);
                offset += plen;
            }
        }
        Op::IndexSelect { x, axis, indices } => {
            let xs = nodes[*x].shape.clone();
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[*axis + 1..].iter().product();
            let src_axis = xs[*axis];
            let mut d = vec![0.0; nodes[*x].data.len()];
            for o in 0..outer {
                for (t, &idx) in indices.iter().enumerate() {
                    let gbase = (o * indices.len() + t) * inner;
                    let dbase = (o * src_axis + idx) * inner;
                    for j in 0..inner {
                        d[dbase + j] += g[gbase + j];
                    }
                }
            }
            accumulate(adj, reachable, *x, d);
        }
        Op::TrilinearSample { grid, coords } => {
            let gs = nodes[*grid].shape.clone();
            let (c, dims) = (gs[0], [gs[1], gs[2], gs[3]]);
            let plane = dims[1] * dims[2];
            let vol = dims[0] * plane;
            let n = nodes[*coords].shape[0];
            let mut dgrid = vec![0.0; nodes[*grid].data.len()];
            let mut dcoords = vec![0.0; nodes[*coords].data.len()];
            let griddata = &nodes[*grid].data;
            let coorddata = &nodes[*coords].data;
            for s in 0..n {
                let p = resolve_tripoint(&coorddata[s * 3..s * 3 + 3], dims);
                let (fz, fy, fx) = (p.frac[0], p.frac[1], p.frac[2]);
                let corners = [
                    (p.i0[0], p.i0[1], p.i0[2], (1.0 - fz) * (1.0 - fy) * (1.0 - fx), [-(1.0 - fy) * (1.0 - fx), -(1.0 - fz) * (1.0 - fx), -(1.0 - fz) * (1.0 - fy)]),
                    (p.i0[0], p.i0[1], p.i1[2], (1.0 - fz) * (1.0 - fy) * fx, [-(1.0 - fy) * fx, -(1.0 - fz) * fx, (1.0 - fz) * (1.0 - fy)]),
                    (p.i0[0], p.i1[1], p.i0[2], (1.0 - fz) * fy * (1.0 - fx), [-fy * (1.0 - fx), (1.0 - fz) * (1.0 - fx), -(1.0 - fz) * fy]),
                    (p.i0[0], p.i1[1], p.i1[2], (1.0 - fz) * fy * fx, [-fy * fx, (1.0 - fz) * fx, (1.0 - fz) * fy]),
                    (p.i1[0], p.i0[1], p.i0[2], fz * (1.0 - fy) * (1.0 - fx), [(1.0 - fy) * (1.0 - fx), -fz * (1.0 - fx), -fz * (1.0 - fy)]),
                    (p.i1[0], p.i0[1], p.i1[2], fz * (1.0 - fy) * fx, [(1.0 - fy) * fx, -fz * fx, fz * (1.0 - fy)]),
                    (p.i1[0], p.i1[1], p.i0[2], fz * fy * (1.0 - fx), [fy * (1.0 - fx), fz * (1.0 - fx), -fz * fy]),
                    (p.i1[0], p.i1[1], p.i1[2], fz * fy * fx, [fy * fx, fz * fx, fz * fy]),
                ];
                for ch in 0..c {
                    let gv = g[s * c + ch];
                    if gv == 0.0 {
                        continue;
                    }
                    let base = ch * vol;
                    for &(iz, iy, ix, w, dw) in corners.iter() {
                        let idx = base + iz * plane + iy * dims[2] + ix;
                        dgrid[idx] += gv * w;
                        let v = griddata[idx];
                        dcoords[s * 3] += gv * v * dw[0] * p.dcoord[0];
                        dcoords[s * 3 + 1] += gv * v * dw[1] * p.dcoord[1];
                        dcoords[s * 3 + 2] += gv * v * dw[2] * p.dcoord[2];
                    }
                }
            }
            accumulate(adj, reachable, *grid, dgrid);
            accumulate(adj, reachable, *coords, dcoords);
        }
    }
}

// ── forward op construction ─────────────────────────────────────────

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    pub fn scalar_value(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].data[0]
    }

    pub fn grad(&self) -> Vec<f64> {
        self.tape.grad(self)
    }

    fn with_data<R>(&self, f: impl FnOnce(&[f64], &[usize]) -> R) -> R {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        f(&node.data, &node.shape)
    }

    fn binary(&self, other: &Var, op_name: &'static str, make: impl Fn(usize, usize) -> Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[other.id];
        let out_shape = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| TensorError::ShapeMismatch {
            op: op_name,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })?;
        let data = if a.shape == b.shape {
            a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ax = broadcast_expand(&a.data, &a.shape, &out_shape);
            let bx = broadcast_expand(&b.data, &b.shape, &out_shape);
            ax.iter().zip(bx.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        drop(inner);
        Ok(self.tape.push_op(data, out_shape, make(self.id, other.id)))
    }

    fn unary(&self, make: impl Fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var {
        let (data, shape) = self.with_data(|d, s| (d.iter().map(|&x| f(x)).collect::<Vec<f64>>(), s.to_vec()));
        self.tape.push_op(data, shape, make(self.id))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn minimum(&self, other: &Var) -> Result<Var> {
        self.binary(other, "minimum", Op::Minimum, f64::min)
    }

    pub fn maximum(&self, other: &Var) -> Result<Var> {
        self.binary(other, "maximum", Op::Maximum, f64::max)
    }

    pub fn neg(&self) -> Var {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn relu(&self) -> Var {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Var {
        self.unary(Op::Ln, f64::ln)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn abs(&self) -> Var {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn scale(&self, s: f64) -> Var {
        self.unary(|a| Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.unary(|a| Op::AddScalar(a, s), |x| x + s)
    }

    pub fn pow_scalar(&self, p: f64) -> Var {
        self.unary(|a| Op::PowScalar(a, p), |x| x.powf(p))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.unary(|a| Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Batched matrix product with optional scalar factor folded in.
    pub fn matmul_scaled(&self, other: &Var, alpha: f64) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[other.id];
        let plan = batched_matmul_plan(&a.shape, &b.shape)?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![0.0; plan.pairs.len() * m * n];
        for (batch, &(ao, bo)) in plan.pairs.iter().enumerate() {
            matmul_nn_into(
                &a.data[ao * m * k..(ao + 1) * m * k],
                &b.data[bo * k * n..(bo + 1) * k * n],
                m,
                k,
                n,
                alpha,
                &mut out[batch * m * n..(batch + 1) * m * n],
            );
        }
        let shape = plan.out_shape;
        drop(inner);
        Ok(self.tape.push_op(out, shape, Op::MatMul { a: self.id, b: other.id, alpha }))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.matmul_scaled(other, 1.0)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { op, axis, rank: shape.len() });
        }
        Ok(shape)
    }

    /// Numerically stable softmax along `axis`. Non-finite input is an error.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let shape = self.check_axis("softmax", axis)?;
        let data = self.with_data(|d, _| {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "softmax" });
            }
            let mut out = vec![0.0; d.len()];
            let axis_len = shape[axis];
            for_each_lane(&shape, axis, |start, stride| {
                let mut mx = f64::NEG_INFINITY;
                for t in 0..axis_len {
                    mx = mx.max(d[start + t * stride]);
                }
                let mut sum = 0.0;
                for t in 0..axis_len {
                    let idx = start + t * stride;
                    let e = (d[idx] - mx).exp();
                    out[idx] = e;
                    sum += e;
                }
                for t in 0..axis_len {
                    out[start + t * stride] /= sum;
                }
            });
            Ok(out)
        })?;
        Ok(self.tape.push_op(data, shape, Op::Softmax { x: self.id, axis }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var> {
        let shape = self.check_axis("log_softmax", axis)?;
        let data = self.with_data(|d, _| {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "log_softmax" });
            }
            let mut out = vec![0.0; d.len()];
            let axis_len = shape[axis];
            for_each_lane(&shape, axis, |start, stride| {
                let mut mx = f64::NEG_INFINITY;
                for t in 0..axis_len {
                    mx = mx.max(d[start + t * stride]);
                }
                let mut sum = 0.0;
                for t in 0..axis_len {
                    sum += (d[start + t * stride] - mx).exp();
                }
                let lse = mx + sum.ln();
                for t in 0..axis_len {
                    let idx = start + t * stride;
                    out[idx] = d[idx] - lse;
                }
            });
            Ok(out)
        })?;
        Ok(self.tape.push_op(data, shape, Op::LogSoftmax { x: self.id, axis }))
    }

    /// Softmax along `axis` where `mask[i] == true` entries are excluded
    /// (zero probability). The mask indexes the flattened tensor modulo its
    /// length, so a `[Lq*Lk]` mask broadcasts over a leading heads dim.
    /// A fully masked lane yields all zeros.
    pub fn masked_softmax(&self, axis: usize, mask: Rc<[bool]>) -> Result<Var> {
        let shape = self.check_axis("masked_softmax", axis)?;
        let n = numel(&shape);
        if n % mask.len() != 0 {
            return Err(TensorError::Invalid {
                op: "masked_softmax",
                msg: format!("mask length {} does not divide tensor size {}", mask.len(), n),
            });
        }
        let data = self.with_data(|d, _| {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "masked_softmax" });
            }
            let mut out = vec![0.0; d.len()];
            let axis_len = shape[axis];
            for_each_lane(&shape, axis, |start, stride| {
                let mut mx = f64::NEG_INFINITY;
                for t in 0..axis_len {
                    let idx = start + t * stride;
                    if !mask[idx % mask.len()] {
                        mx = mx.max(d[idx]);
                    }
                }
                if mx == f64::NEG_INFINITY {
                    return; // fully masked lane
                }
                let mut sum = 0.0;
                for t in 0..axis_len {
                    let idx = start + t * stride;
                    if !mask[idx % mask.len()] {
                        let e = (d[idx] - mx).exp();
                        out[idx] = e;
                        sum += e;
                    }
                }
                for t in 0..axis_len {
                    let idx = start + t * stride;
                    if !mask[idx % mask.len()] {
                        out[idx] /= sum;
                    }
                }
            });
            Ok(out)
        })?;
        Ok(self.tape.push_op(data, shape, Op::MaskedSoftmax { x: self.id, axis, mask }))
    }

    /// Layer normalization over the last axis followed by a gain/bias affine.
    pub fn layer_norm(&self, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let shape = self.shape();
        let dim = *shape.last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        if gain.numel() != dim || bias.numel() != dim {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape.clone(),
                rhs: gain.shape(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid { op: "layer_norm", msg: "eps must be > 0".into() });
        }
        let inner = self.tape.inner.borrow();
        let xd = &inner.nodes[self.id].data;
        let gaind = &inner.nodes[gain.id].data;
        let biasd = &inner.nodes[bias.id].data;
        let rows = xd.len() / dim;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let xrow = &xd[r * dim..(r + 1) * dim];
            let mean = xrow.iter().sum::<f64>() / dim as f64;
            let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..dim {
                out[r * dim + j] = (xrow[j] - mean) * inv_std * gaind[j] + biasd[j];
            }
        }
        drop(inner);
        Ok(self.tape.push_op(out, shape, Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, eps }))
    }

    /// 3D convolution: x `[c_in,D,H,W]`, w `[c_out,c_in,kd,kh,kw]`, odd kernels.
    pub fn conv3d(&self, w: &Var, b: Option<&Var>, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id];
        let wn = &inner.nodes[w.id];
        let geom = Conv3dGeom::resolve(&x.shape, &wn.shape, stride, pad)?;
        if let Some(b) = b {
            if inner.nodes[b.id].data.len() != geom.cout {
                return Err(TensorError::ShapeMismatch {
                    op: "conv3d",
                    lhs: inner.nodes[b.id].shape.clone(),
                    rhs: vec![geom.cout],
                });
            }
        }
        let out = conv3d_forward(&x.data, &wn.data, b.map(|b| inner.nodes[b.id].data.as_slice()), &geom);
        let shape = geom.out_shape();
        drop(inner);
        Ok(self.tape.push_op(out, shape, Op::Conv3d { x: self.id, w: w.id, b: b.map(|b| b.id), geom }))
    }

    pub fn sum_all(&self) -> Var {
        let s = self.with_data(|d, _| d.iter().sum::<f64>());
        self.tape.push_op(vec![s], vec![], Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var {
        let s = self.with_data(|d, _| d.iter().sum::<f64>() / d.len() as f64);
        self.tape.push_op(vec![s], vec![], Op::MeanAll(self.id))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let shape = self.check_axis("sum_axis", axis)?;
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let data = self.with_data(|d, _| {
            let mut out = Vec::with_capacity(numel(&out_shape));
            let axis_len = shape[axis];
            for_each_lane(&shape, axis, |start, stride| {
                let mut acc = 0.0;
                for t in 0..axis_len {
                    acc += d[start + t * stride];
                }
                out.push(acc);
            });
            out
        });
        Ok(self.tape.push_op(data, out_shape, Op::SumAxis { x: self.id, axis }))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Var> {
        if numel(new_shape) != self.numel() {
            return Err(TensorError::Invalid {
                op: "reshape",
                msg: format!("cannot reshape {:?} to {:?}", self.shape(), new_shape),
            });
        }
        let data = self.value();
        Ok(self.tape.push_op(data, new_shape.to_vec(), Op::Reshape(self.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("invalid permutation {:?} for rank {}", perm, rank),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides_for(&shape);
        let data = self.with_data(|d, _| {
            let mut out = vec![0.0; d.len()];
            let mut coords = vec![0usize; rank];
            for slot in out.iter_mut() {
                let mut src = 0usize;
                for d2 in 0..rank {
                    src += coords[d2] * in_strides[perm[d2]];
                }
                *slot = d[src];
                for d2 in (0..rank).rev() {
                    coords[d2] += 1;
                    if coords[d2] < out_shape[d2] {
                        break;
                    }
                    coords[d2] = 0;
                }
            }
            out
        });
        Ok(self.tape.push_op(data, out_shape, Op::Permute { x: self.id, perm: perm.to_vec() }))
    }

    /// Rows (or slices along `axis`) gathered by index; duplicates allowed.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.check_axis("index_select", axis)?;
        for &i in indices {
            if i >= shape[axis] {
                return Err(TensorError::IndexOutOfRange { op: "index_select", index: i, extent: shape[axis] });
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner_len: usize = shape[axis + 1..].iter().product();
        let src_axis = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let data = self.with_data(|d, _| {
            let mut out = vec![0.0; outer * indices.len() * inner_len];
            for o in 0..outer {
                for (t, &idx) in indices.iter().enumerate() {
                    let dst = (o * indices.len() + t) * inner_len;
                    let src = (o * src_axis + idx) * inner_len;
                    out[dst..dst + inner_len].copy_from_slice(&d[src..src + inner_len]);
                }
            }
            out
        });
        let idx: Rc<[usize]> = indices.into();
        Ok(self.tape.push_op(data, out_shape, Op::IndexSelect { x: self.id, axis, indices: idx }))
    }

    /// Sample a `[C,D,H,W]` grid at `[N,3]` normalized coordinates (z,y,x
    /// order, align-corners, border clamp). Output `[N,C]`; differentiable
    /// with respect to both the grid and the coordinates.
    pub fn trilinear_sample(&self, coords: &Var) -> Result<Var> {
        let gs = self.shape();
        let cs = coords.shape();
        if gs.len() != 4 || cs.len() != 2 || cs[1] != 3 {
            return Err(TensorError::Invalid {
                op: "trilinear_sample",
                msg: format!("expected grid [C,D,H,W] and coords [N,3], got {gs:?} / {cs:?}"),
            });
        }
        let (c, dims) = (gs[0], [gs[1], gs[2], gs[3]]);
        let plane = dims[1] * dims[2];
        let vol = dims[0] * plane;
        let n = cs[0];
        let inner = self.tape.inner.borrow();
        let grid = &inner.nodes[self.id].data;
        let coord = &inner.nodes[coords.id].data;
        let mut out = vec![0.0; n * c];
        for s in 0..n {
            let p = resolve_tripoint(&coord[s * 3..s * 3 + 3], dims);
            let (fz, fy, fx) = (p.frac[0], p.frac[1], p.frac[2]);
            let w = [
                (p.i0[0], p.i0[1], p.i0[2], (1.0 - fz) * (1.0 - fy) * (1.0 - fx)),
                (p.i0[0], p.i0[1], p.i1[2], (1.0 - fz) * (1.0 - fy) * fx),
                (p.i0[0], p.i1[1], p.i0[2], (1.0 - fz) * fy * (1.0 - fx)),
                (p.i0[0], p.i1[1], p.i1[2], (1.0 - fz) * fy * fx),
                (p.i1[0], p.i0[1], p.i0[2], fz * (1.0 - fy) * (1.0 - fx)),
                (p.i1[0], p.i0[1], p.i1[2], fz * (1.0 - fy) * fx),
                (p.i1[0], p.i1[1], p.i0[2], fz * fy * (1.0 - fx)),
                (p.i1[0], p.i1[1], p.i1[2], fz * fy * fx),
            ];
            for ch in 0..c {
                let base = ch * vol;
                let mut acc = 0.0;
                for &(iz, iy, ix, wt) in w.iter() {
                    acc += wt * grid[base + iz * plane + iy * dims[2] + ix];
                }
                out[s * c + ch] = acc;
            }
        }
        drop(inner);
        Ok(self.tape.push_op(out, vec![n, c], Op::TrilinearSample { grid: self.id, coords: coords.id }))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid { op: "concat", msg: "no parts".into() })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis { op: "concat", axis, rank: base.len() });
        }
        let mut total_axis = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d]) {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: base.clone(), rhs: s });
            }
            total_axis += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total_axis;
        let outer: usize = base[..axis].iter().product();
        let inner_len: usize = base[axis + 1..].iter().product();
        let mut out = vec![0.0; numel(&out_shape)];
        let mut offset = 0usize;
        for p in parts {
            let plen = p.shape()[axis];
            p.with_data(|d, _| {
                for o in 0..outer {
                    for t in 0..plen {
                        let dst = (o * total_axis + offset + t) * inner_len;
                        let src = (o * plen + t) * inner_len;
                        out[dst..dst + inner_len].copy_from_slice(&d[src..src + inner_len]);
                    }
                }
            });
            offset += plen;
        }
        let tape = first.tape.clone();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push_op(out, out_shape, Op::Concat { parts: ids, axis }))
    }
}

#[cfg(test)]
mod tests;
