use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{AdError, Result};
use crate::kernels::{self, FrameSpec, View};
use crate::special;
use crate::tensor::Tensor;

/// Identifier of a node on a [`Tape`].
pub type NodeId = usize;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `scale * x + shift`
    Affine(NodeId, f64),
    AddRow(NodeId, NodeId),
    AddCol(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sin(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    LnGamma(NodeId),
    Digamma(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Sum(NodeId),
    SumRows(NodeId),
    Cumsum(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    Conv1d { x: NodeId, w: NodeId, dilation: usize },
    TConv1d { x: NodeId, w: NodeId, stride: usize },
    LstmCell { x: NodeId, h: NodeId, c: NodeId, w_ih: NodeId, w_hh: NodeId, b: NodeId, gates: Vec<f64> },
    Fir(NodeId, Rc<Vec<f64>>),
    RfftPower(NodeId, FrameSpec),
}

pub(crate) struct Node {
    pub value: Rc<Tensor>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Records every operation of one forward pass for a single reverse sweep.
///
/// A tape is single-threaded. Independent tapes may be used concurrently.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    checked: bool,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), checked: false, consumed: Cell::new(false) }
    }

    /// A tape that fails with [`AdError::NonFinite`] as soon as an op produces NaN or ±inf.
    pub fn checked() -> Self {
        Tape { checked: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn push(&self, name: &'static str, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<Var<'_>> {
        if self.checked && !value.is_finite() {
            return Err(AdError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(AdError::Usage("loss belongs to a different tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(AdError::Usage("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(AdError::Usage(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, contrib) in input_grads(&nodes, node, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        // Only leaves keep their gradients.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the loss w.r.t. every trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("backward produced inconsistent shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    t(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn input_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
    let val = |id: NodeId| -> &Tensor { &nodes[id].value };
    let needs = |id: NodeId| nodes[id].requires_grad;
    let out = &*node.value;
    let gd = g.data();
    let res = match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).dims2().unwrap().1;
            let mut v = Vec::new();
            if needs(*a) {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, 1.0, View::rows(gd, n), View::rows(val(*b).data(), n).transposed(), 0.0, &mut ga, 0, k);
                v.push((*a, t(&[m, k], ga)));
            }
            if needs(*b) {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, 1.0, View::rows(val(*a).data(), k).transposed(), View::rows(gd, n), 0.0, &mut gb, 0, n);
                v.push((*b, t(&[k, n], gb)));
            }
            v
        }
        Op::Transpose(a) => vec![(*a, g.transpose2())],
        Op::Reshape(a) => vec![(*a, g.clone().reshaped(val(*a).shape())?)],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![(*a, zip_map(g, val(*b), |x, y| x * y)), (*b, zip_map(g, val(*a), |x, y| x * y))],
        Op::Div(a, b) => {
            let ga = zip_map(g, val(*b), |x, y| x / y);
            let gb = t(
                g.shape(),
                gd.iter().zip(out.data()).zip(val(*b).data()).map(|((gv, o), bv)| -gv * o / bv).collect(),
            );
            vec![(*a, ga), (*b, gb)]
        }
        Op::Affine(a, scale) => vec![(*a, g.map(|v| v * scale))],
        Op::AddRow(a, r) => {
            let (m, n) = g.dims2().unwrap();
            let mut gr = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    gr[j] += gd[i * n + j];
                }
            }
            vec![(*a, g.clone()), (*r, t(&[n], gr))]
        }
        Op::AddCol(a, c) => {
            let (m, n) = g.dims2().unwrap();
            let gc = (0..m).map(|i| gd[i * n..(i + 1) * n].iter().sum()).collect();
            vec![(*a, g.clone()), (*c, t(&[m], gc))]
        }
        Op::Tanh(a) => vec![(*a, zip_map(g, out, |gv, y| gv * (1.0 - y * y)))],
        Op::Sigmoid(a) => vec![(*a, zip_map(g, out, |gv, y| gv * y * (1.0 - y)))],
        Op::Exp(a) => vec![(*a, zip_map(g, out, |gv, y| gv * y))],
        Op::Log(a) => vec![(*a, zip_map(g, val(*a), |gv, x| gv / x))],
        Op::Sin(a) => vec![(*a, zip_map(g, val(*a), |gv, x| gv * x.cos()))],
        Op::Square(a) => vec![(*a, zip_map(g, val(*a), |gv, x| 2.0 * gv * x))],
        Op::Clamp(a, lo, hi) => {
            vec![(*a, zip_map(g, val(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 }))]
        }
        Op::LnGamma(a) => vec![(*a, zip_map(g, val(*a), |gv, x| gv * special::digamma(x)))],
        Op::Digamma(a) => vec![(*a, zip_map(g, val(*a), |gv, x| gv * special::trigamma(x)))],
        Op::SoftmaxRows(a) => {
            let (m, n) = out.dims2().unwrap();
            let y = out.data();
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                let r = i * n..(i + 1) * n;
                let dot: f64 = gd[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                for j in r {
                    gx[j] = y[j] * (gd[j] - dot);
                }
            }
            vec![(*a, t(&[m, n], gx))]
        }
        Op::LogSoftmaxRows(a) => {
            let (m, n) = out.dims2().unwrap();
            let y = out.data();
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                let r = i * n..(i + 1) * n;
                let s: f64 = gd[r.clone()].iter().sum();
                for j in r {
                    gx[j] = gd[j] - y[j].exp() * s;
                }
            }
            vec![(*a, t(&[m, n], gx))]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), gd[0]))],
        Op::SumRows(a) => {
            let (m, n) = val(*a).dims2().unwrap();
            let gx = (0..m * n).map(|i| gd[i / n]).collect();
            vec![(*a, t(&[m, n], gx))]
        }
        Op::Cumsum(a) => {
            let mut gx = vec![0.0; gd.len()];
            let mut acc = 0.0;
            for i in (0..gd.len()).rev() {
                acc += gd[i];
                gx[i] = acc;
            }
            vec![(*a, t(val(*a).shape(), gx))]
        }
        Op::GatherRows(a, idx) => {
            let src = val(*a);
            let n = src.len() / src.shape()[0];
            let mut gx = vec![0.0; src.len()];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..n {
                    gx[i * n + j] += gd[r * n + j];
                }
            }
            vec![(*a, t(src.shape(), gx))]
        }
        Op::SliceRows(a, start) => {
            let src = val(*a);
            let n = src.len() / src.shape()[0];
            let mut gx = vec![0.0; src.len()];
            gx[start * n..start * n + gd.len()].copy_from_slice(gd);
            vec![(*a, t(src.shape(), gx))]
        }
        Op::SliceCols(a, start) => {
            let (m, n) = val(*a).dims2().unwrap();
            let w = g.dims2().unwrap().1;
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                gx[i * n + start..i * n + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
            }
            vec![(*a, t(&[m, n], gx))]
        }
        Op::ConcatCols(parts) => {
            let (m, total) = g.dims2().unwrap();
            let mut off = 0;
            let mut v = Vec::new();
            for &p in parts {
                let w = val(p).dims2().unwrap().1;
                let mut gp = vec![0.0; m * w];
                for i in 0..m {
                    gp[i * w..(i + 1) * w].copy_from_slice(&gd[i * total + off..i * total + off + w]);
                }
                v.push((p, t(&[m, w], gp)));
                off += w;
            }
            v
        }
        Op::StackRows(parts) => {
            let mut off = 0;
            let mut v = Vec::new();
            for &p in parts {
                let n = val(p).len();
                v.push((p, t(val(p).shape(), gd[off..off + n].to_vec())));
                off += n;
            }
            v
        }
        Op::Conv1d { x, w, dilation } => {
            let (c_in, tl) = val(*x).dims2().unwrap();
            let ws = val(*w).shape();
            let (c_out, k) = (ws[0], ws[2]);
            let (gx, gw) = kernels::conv1d_backward(gd, val(*x).data(), val(*w).data(), c_in, c_out, k, tl, *dilation);
            vec![(*x, t(&[c_in, tl], gx)), (*w, t(&[c_out, c_in, k], gw))]
        }
        Op::TConv1d { x, w, stride } => {
            let (c_in, l) = val(*x).dims2().unwrap();
            let ws = val(*w).shape();
            let (c_out, k) = (ws[1], ws[2]);
            let (gx, gw) = kernels::tconv1d_backward(gd, val(*x).data(), val(*w).data(), c_in, c_out, k, l, *stride);
            vec![(*x, t(&[c_in, l], gx)), (*w, t(&[c_in, c_out, k], gw))]
        }
        Op::LstmCell { x, h, c, w_ih, w_hh, b, gates } => lstm_backward(nodes, g, *x, *h, *c, *w_ih, *w_hh, *b, gates, out),
        Op::Fir(a, taps) => vec![(*a, t(val(*a).shape(), kernels::fir_backward(gd, taps)))],
        Op::RfftPower(a, spec) => {
            let x = val(*a);
            vec![(*a, t(x.shape(), kernels::stft_power_backward(gd, x.data(), *spec)))]
        }
    };
    Ok(res)
}

#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    nodes: &[Node],
    g: &Tensor,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    w_ih: NodeId,
    w_hh: NodeId,
    b: NodeId,
    gates: &[f64],
    out: &Tensor,
) -> Vec<(NodeId, Tensor)> {
    let hsz = nodes[h].value.len();
    let xin = nodes[x].value.data();
    let hin = nodes[h].value.data();
    let cin = nodes[c].value.data();
    let (gi, gf, gg, go) = (&gates[0..hsz], &gates[hsz..2 * hsz], &gates[2 * hsz..3 * hsz], &gates[3 * hsz..]);
    let c_new = &out.data()[hsz..];
    let gd = g.data();
    let (gh_out, gc_out) = (&gd[..hsz], &gd[hsz..]);
    let mut da = vec![0.0; 4 * hsz];
    let mut dc = vec![0.0; hsz];
    for j in 0..hsz {
        let tc = c_new[j].tanh();
        let d_o = gh_out[j] * tc;
        let d_c = gc_out[j] + gh_out[j] * go[j] * (1.0 - tc * tc);
        let d_i = d_c * gg[j];
        let d_g = d_c * gi[j];
        let d_f = d_c * cin[j];
        dc[j] = d_c * gf[j];
        da[j] = d_i * gi[j] * (1.0 - gi[j]);
        da[hsz + j] = d_f * gf[j] * (1.0 - gf[j]);
        da[2 * hsz + j] = d_g * (1.0 - gg[j] * gg[j]);
        da[3 * hsz + j] = d_o * go[j] * (1.0 - go[j]);
    }
    let n_in = xin.len();
    let w_ih_v = nodes[w_ih].value.data();
    let w_hh_v = nodes[w_hh].value.data();
    let mut dx = vec![0.0; n_in];
    let mut dh = vec![0.0; hsz];
    let mut dwih = vec![0.0; 4 * hsz * n_in];
    let mut dwhh = vec![0.0; 4 * hsz * hsz];
    for (r, &a) in da.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let wi = &w_ih_v[r * n_in..(r + 1) * n_in];
        for (k, w) in wi.iter().enumerate() {
            dx[k] += a * w;
            dwih[r * n_in + k] = a * xin[k];
        }
        let wh = &w_hh_v[r * hsz..(r + 1) * hsz];
        for (k, w) in wh.iter().enumerate() {
            dh[k] += a * w;
            dwhh[r * hsz + k] = a * hin[k];
        }
    }
    vec![
        (x, t(nodes[x].value.shape(), dx)),
        (h, t(nodes[h].value.shape(), dh)),
        (c, t(nodes[c].value.shape(), dc)),
        (w_ih, t(&[4 * hsz, n_in], dwih)),
        (w_hh, t(&[4 * hsz, hsz], dwhh)),
        (b, t(&[4 * hsz], da)),
    ]
}
