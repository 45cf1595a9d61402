//! Define-by-run tape. Each training step builds a fresh `Graph`, runs the
//! forward pass through the builder methods, and calls `backward` once on the
//! scalar loss. Node evaluation order is the tape order, so gradient
//! accumulation is deterministic.

use super::ops;
use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use std::collections::BTreeMap;

pub type Arr = ArrayD<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f32),
    Square(NodeId),
    Sqrt(NodeId),
    Silu(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f32),
    Matmul(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    AddBiasRow(NodeId, NodeId),
    ScaleShiftChannel {
        x: NodeId,
        scale: Option<NodeId>,
        shift: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        col: Array2<f32>,
    },
    UpsampleNearest2(NodeId),
    AvgPoolGlobal(NodeId),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        xhat: Array4<f32>,
        inv_std: Array2<f32>,
    },
    SoftmaxLast(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    Reshape(NodeId),
    Transpose021(NodeId),
    ConcatChannel(Vec<NodeId>),
    GridSample {
        src: NodeId,
        flow: NodeId,
    },
    DiffAxis {
        x: NodeId,
        axis: usize,
    },
}

struct Node {
    value: Arr,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// param-store slot -> node, so one parameter enters the tape once.
    param_nodes: BTreeMap<usize, NodeId>,
}

fn as4(a: &Arr) -> ndarray::ArrayView4<'_, f32> {
    a.view().into_dimensionality().expect("rank-4 tensor")
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f32> {
    a.view().into_dimensionality().expect("rank-2 tensor")
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value.iter().next().copied().unwrap()
    }

    /// Constant input; gradients stop here.
    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that participates in the backward pass.
    pub fn variable(&mut self, value: Arr) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Enter a parameter-store slot into the tape (memoized per slot).
    pub fn param_slot(&mut self, slot: usize, value: &Arr) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&slot) {
            return id;
        }
        let id = self.push(value.clone(), Op::Leaf, true);
        self.param_nodes.insert(slot, id);
        id
    }

    pub fn param_slot_nodes(&self) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.param_nodes.iter().map(|(&s, &n)| (s, n))
    }

    /// After `backward`, pull the gradients of all parameter slots that were
    /// entered into this tape, in slot order.
    pub fn param_grads(&self, grads: &[Option<Arr>]) -> Vec<(usize, Arr)> {
        self.param_nodes
            .iter()
            .filter_map(|(&slot, &node)| grads[node.0].as_ref().map(|g| (slot, g.clone())))
            .collect()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f32) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + s);
        let g = self.ng(a);
        self.push(v, Op::AddScalar(a), g)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f32) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * s);
        let g = self.ng(a);
        self.push(v, Op::MulScalar(a, s), g)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let g = self.ng(a);
        self.push(v, Op::Square(a), g)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        let g = self.ng(a);
        self.push(v, Op::Sqrt(a), g)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x / (1.0 + (-x).exp()));
        let g = self.ng(a);
        self.push(v, Op::Silu(a), g)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let g = self.ng(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f32) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { alpha * x });
        let g = self.ng(a);
        self.push(v, Op::LeakyRelu(a, alpha), g)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ops::matmul2(&as2(self.value(a)), &as2(self.value(b))).into_dyn();
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Matmul(a, b), g)
    }

    /// Batched matmul `[b, m, k] x [b, k, n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        let (bb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bb2, k2, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert_eq!(bb, bb2, "bmm batch");
        assert_eq!(k, k2, "bmm inner");
        let mut out = ndarray::Array3::<f32>::zeros((bb, m, n));
        for i in 0..bb {
            let ai = av
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let bi = bv
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let mut oi = out.index_axis_mut(Axis(0), i);
            ndarray::linalg::general_mat_mul(1.0, &ai, &bi, 0.0, &mut oi);
        }
        let g = self.ng(a) || self.ng(b);
        self.push(out.into_dyn(), Op::Bmm(a, b), g)
    }

    /// `[n, f] + [f]`.
    pub fn add_bias_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = as2(self.value(x)).to_owned();
        let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        assert_eq!(xv.dim().1, bv.len(), "bias length");
        let v = (xv + &bv).into_dyn();
        let g = self.ng(x) || self.ng(b);
        self.push(v, Op::AddBiasRow(x, b), g)
    }

    /// `y[n,c,h,w] = x * (1 + scale[n,c]) + shift[n,c]`, either side optional.
    pub fn scale_shift_channel(
        &mut self,
        x: NodeId,
        scale: Option<NodeId>,
        shift: Option<NodeId>,
    ) -> NodeId {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let mut y = xv.to_owned();
        if let Some(s) = scale {
            let sv = as2(self.value(s));
            assert_eq!(sv.dim(), (n, c), "scale shape");
            for ni in 0..n {
                for ci in 0..c {
                    let f = 1.0 + sv[[ni, ci]];
                    y.index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), ci)
                        .mapv_inplace(|v| v * f);
                }
            }
        }
        if let Some(t) = shift {
            let tv = as2(self.value(t));
            assert_eq!(tv.dim(), (n, c), "shift shape");
            for ni in 0..n {
                for ci in 0..c {
                    let a = tv[[ni, ci]];
                    y.index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), ci)
                        .mapv_inplace(|v| v + a);
                }
            }
        }
        let _ = (h, w);
        let g = self.ng(x)
            || scale.map(|s| self.ng(s)).unwrap_or(false)
            || shift.map(|t| self.ng(t)).unwrap_or(false);
        self.push(y.into_dyn(), Op::ScaleShiftChannel { x, scale, shift }, g)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let bias = b.map(|bid| {
            self.value(bid)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned()
        });
        let fwd = ops::conv2d_forward(
            &as4(self.value(x)),
            &as4(self.value(w)),
            bias.as_ref(),
            stride,
            pad,
        );
        let g = self.ng(x) || self.ng(w) || b.map(|bid| self.ng(bid)).unwrap_or(false);
        // keep the unfold only when a backward pass can reach this node
        let col = if g { fwd.col } else { Array2::zeros((0, 0)) };
        self.push(
            fwd.y.into_dyn(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                col,
            },
            g,
        )
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let v = ops::upsample_nearest2_forward(&as4(self.value(x))).into_dyn();
        let g = self.ng(x);
        self.push(v, Op::UpsampleNearest2(x), g)
    }

    /// `[N,C,H,W] -> [N,C]` mean over the spatial extent.
    pub fn avg_pool_global(&mut self, x: NodeId) -> NodeId {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let mut y = Array2::<f32>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut s = 0.0f32;
                for iy in 0..h {
                    for ix in 0..w {
                        s += xv[[ni, ci, iy, ix]];
                    }
                }
                y[[ni, ci]] = s / (h * w) as f32;
            }
        }
        let g = self.ng(x);
        self.push(y.into_dyn(), Op::AvgPoolGlobal(x), g)
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f32,
    ) -> NodeId {
        let ga = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let be = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let fwd = ops::group_norm_forward(&as4(self.value(x)), &ga, &be, groups, eps);
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            fwd.y.into_dyn(),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
            },
            g,
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let last = xv.ndim() - 1;
        let mut y = xv.clone();
        for mut row in y.lanes_mut(Axis(last)) {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let g = self.ng(x);
        self.push(y, Op::SoftmaxLast(x), g)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let m = self.value(x).mean().unwrap();
        let g = self.ng(x);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), m),
            Op::MeanAll(x),
            g,
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let g = self.ng(x);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::SumAll(x), g)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        let g = self.ng(x);
        self.push(v, Op::Reshape(x), g)
    }

    /// `[a, b, c] -> [a, c, b]`.
    pub fn transpose021(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "transpose021 wants rank 3");
        let v = xv
            .view()
            .permuted_axes(IxDyn(&[0, 2, 1]))
            .to_owned()
            .as_standard_layout()
            .to_owned();
        let g = self.ng(x);
        self.push(v, Op::Transpose021(x), g)
    }

    /// Concatenate along axis 1 (channels for NCHW inputs).
    pub fn concat_channel(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatChannel(parts.to_vec()), g)
    }

    /// Bilinear backward warp of `src` by `flow` (see ops module).
    pub fn grid_sample(&mut self, src: NodeId, flow: NodeId) -> NodeId {
        let v = ops::grid_sample_forward(&as4(self.value(src)), &as4(self.value(flow))).into_dyn();
        let g = self.ng(src) || self.ng(flow);
        self.push(v, Op::GridSample { src, flow }, g)
    }

    /// Forward difference along a spatial axis (2 or 3) of an NCHW tensor.
    pub fn diff_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        assert!(axis == 2 || axis == 3, "diff axis must be spatial");
        let xv = self.value(x);
        let n = xv.shape()[axis];
        let hi = xv.slice_axis(Axis(axis), ndarray::Slice::from(1..n));
        let lo = xv.slice_axis(Axis(axis), ndarray::Slice::from(0..n - 1));
        let v = (&hi - &lo).to_owned();
        let g = self.ng(x);
        self.push(v, Op::DiffAxis { x, axis }, g)
    }

    /// Backpropagate from a scalar node; returns per-node gradients.
    pub fn backward(&mut self, loss: NodeId) -> Vec<Option<Arr>> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        grads
    }

    fn accum(grads: &mut [Option<Arr>], id: NodeId, contribution: Arr) {
        match &mut grads[id.0] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, i: usize, dy: &Arr, grads: &mut Vec<Option<Arr>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    Self::accum(grads, *a, dy.clone());
                }
                if self.ng(*b) {
                    Self::accum(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    Self::accum(grads, *a, dy.clone());
                }
                if self.ng(*b) {
                    Self::accum(grads, *b, dy.mapv(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    Self::accum(grads, *a, dy * &self.nodes[b.0].value);
                }
                if self.ng(*b) {
                    Self::accum(grads, *b, dy * &self.nodes[a.0].value);
                }
            }
            Op::AddScalar(a) => {
                if self.ng(*a) {
                    Self::accum(grads, *a, dy.clone());
                }
            }
            Op::MulScalar(a, s) => {
                if self.ng(*a) {
                    Self::accum(grads, *a, dy.mapv(|v| v * s));
                }
            }
            Op::Square(a) => {
                if self.ng(*a) {
                    Self::accum(grads, *a, 2.0 * dy * &self.nodes[a.0].value);
                }
            }
            Op::Sqrt(a) => {
                if self.ng(*a) {
                    let y = &self.nodes[i].value;
                    Self::accum(grads, *a, dy * &y.mapv(|v| 0.5 / v.max(1e-12)));
                }
            }
            Op::Silu(a) => {
                if self.ng(*a) {
                    let x = &self.nodes[a.0].value;
                    let d = x.mapv(|v| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        s * (1.0 + v * (1.0 - s))
                    });
                    Self::accum(grads, *a, dy * &d);
                }
            }
            Op::Sigmoid(a) => {
                if self.ng(*a) {
                    let y = &self.nodes[i].value;
                    Self::accum(grads, *a, dy * &y.mapv(|v| v * (1.0 - v)));
                }
            }
            Op::LeakyRelu(a, alpha) => {
                if self.ng(*a) {
                    let x = &self.nodes[a.0].value;
                    let d = x.mapv(|v| if v > 0.0 { 1.0 } else { *alpha });
                    Self::accum(grads, *a, dy * &d);
                }
            }
            Op::Matmul(a, b) => {
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                let dyv = as2(dy);
                if self.ng(*a) {
                    Self::accum(grads, *a, ops::matmul2(&dyv, &bv.t()).into_dyn());
                }
                if self.ng(*b) {
                    Self::accum(grads, *b, ops::matmul2(&av.t(), &dyv).into_dyn());
                }
            }
            Op::Bmm(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let bb = av.shape()[0];
                if self.ng(*a) {
                    let mut da = ndarray::Array3::<f32>::zeros((
                        bb,
                        av.shape()[1],
                        av.shape()[2],
                    ));
                    for k in 0..bb {
                        let dyk = dy
                            .index_axis(Axis(0), k)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let bk = bv
                            .index_axis(Axis(0), k)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let mut dak = da.index_axis_mut(Axis(0), k);
                        ndarray::linalg::general_mat_mul(1.0, &dyk, &bk.t(), 0.0, &mut dak);
                    }
                    Self::accum(grads, *a, da.into_dyn());
                }
                if self.ng(*b) {
                    let mut db = ndarray::Array3::<f32>::zeros((
                        bb,
                        bv.shape()[1],
                        bv.shape()[2],
                    ));
                    for k in 0..bb {
                        let dyk = dy
                            .index_axis(Axis(0), k)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let ak = av
                            .index_axis(Axis(0), k)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let mut dbk = db.index_axis_mut(Axis(0), k);
                        ndarray::linalg::general_mat_mul(1.0, &ak.t(), &dyk, 0.0, &mut dbk);
                    }
                    Self::accum(grads, *b, db.into_dyn());
                }
            }
            Op::AddBiasRow(x, b) => {
                if self.ng(*x) {
                    Self::accum(grads, *x, dy.clone());
                }
                if self.ng(*b) {
                    let dyv = as2(dy);
                    let db = dyv.sum_axis(Axis(0));
                    Self::accum(grads, *b, db.into_dyn());
                }
            }
            Op::ScaleShiftChannel { x, scale, shift } => {
                let xv = as4(&self.nodes[x.0].value);
                let dyv = as4(dy);
                let (n, c, h, w) = xv.dim();
                if self.ng(*x) {
                    let mut dx = dyv.to_owned();
                    if let Some(s) = scale {
                        let sv = as2(&self.nodes[s.0].value);
                        for ni in 0..n {
                            for ci in 0..c {
                                let f = 1.0 + sv[[ni, ci]];
                                dx.index_axis_mut(Axis(0), ni)
                                    .index_axis_mut(Axis(0), ci)
                                    .mapv_inplace(|v| v * f);
                            }
                        }
                    }
                    Self::accum(grads, *x, dx.into_dyn());
                }
                if let Some(s) = scale {
                    if self.ng(*s) {
                        let mut ds = Array2::<f32>::zeros((n, c));
                        for ni in 0..n {
                            for ci in 0..c {
                                let mut acc = 0.0f32;
                                for iy in 0..h {
                                    for ix in 0..w {
                                        acc += dyv[[ni, ci, iy, ix]] * xv[[ni, ci, iy, ix]];
                                    }
                                }
                                ds[[ni, ci]] = acc;
                            }
                        }
                        Self::accum(grads, *s, ds.into_dyn());
                    }
                }
                if let Some(t) = shift {
                    if self.ng(*t) {
                        let mut dt = Array2::<f32>::zeros((n, c));
                        for ni in 0..n {
                            for ci in 0..c {
                                let mut acc = 0.0f32;
                                for iy in 0..h {
                                    for ix in 0..w {
                                        acc += dyv[[ni, ci, iy, ix]];
                                    }
                                }
                                dt[[ni, ci]] = acc;
                            }
                        }
                        Self::accum(grads, *t, dt.into_dyn());
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                col,
            } => {
                let xv = &self.nodes[x.0].value;
                let x_dim = {
                    let s = xv.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let bwd = ops::conv2d_backward(
                    col,
                    x_dim,
                    &as4(&self.nodes[w.0].value),
                    b.is_some(),
                    *stride,
                    *pad,
                    &as4(dy),
                );
                if self.ng(*x) {
                    Self::accum(grads, *x, bwd.dx.into_dyn());
                }
                if self.ng(*w) {
                    Self::accum(grads, *w, bwd.dw.into_dyn());
                }
                if let (Some(bid), Some(db)) = (b, bwd.db) {
                    if self.ng(*bid) {
                        Self::accum(grads, *bid, db.into_dyn());
                    }
                }
            }
            Op::UpsampleNearest2(x) => {
                if self.ng(*x) {
                    Self::accum(
                        grads,
                        *x,
                        ops::upsample_nearest2_backward(&as4(dy)).into_dyn(),
                    );
                }
            }
            Op::AvgPoolGlobal(x) => {
                if self.ng(*x) {
                    let xv = as4(&self.nodes[x.0].value);
                    let (n, c, h, w) = xv.dim();
                    let dyv = as2(dy);
                    let scale = 1.0 / (h * w) as f32;
                    let mut dx = Array4::<f32>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let v = dyv[[ni, ci]] * scale;
                            dx.index_axis_mut(Axis(0), ni)
                                .index_axis_mut(Axis(0), ci)
                                .fill(v);
                        }
                    }
                    Self::accum(grads, *x, dx.into_dyn());
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let ga = self.nodes[gamma.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .to_owned();
                let bwd = ops::group_norm_backward(xhat, inv_std, &ga, *groups, &as4(dy));
                if self.ng(*x) {
                    Self::accum(grads, *x, bwd.dx.into_dyn());
                }
                if self.ng(*gamma) {
                    Self::accum(grads, *gamma, bwd.dgamma.into_dyn());
                }
                if self.ng(*beta) {
                    Self::accum(grads, *beta, bwd.dbeta.into_dyn());
                }
            }
            Op::SoftmaxLast(x) => {
                if self.ng(*x) {
                    let y = &self.nodes[i].value;
                    let last = y.ndim() - 1;
                    let mut dx = dy * y;
                    // dx = y ⊙ (dy − Σ dy⊙y)
                    for (mut drow, yrow) in dx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                        let s: f32 = drow.sum();
                        for (d, yv) in drow.iter_mut().zip(yrow.iter()) {
                            *d -= s * yv;
                        }
                    }
                    Self::accum(grads, *x, dx);
                }
            }
            Op::MeanAll(x) => {
                if self.ng(*x) {
                    let xv = &self.nodes[x.0].value;
                    let scale = dy.iter().next().unwrap() / xv.len() as f32;
                    Self::accum(grads, *x, ArrayD::from_elem(xv.raw_dim(), scale));
                }
            }
            Op::SumAll(x) => {
                if self.ng(*x) {
                    let xv = &self.nodes[x.0].value;
                    let scale = *dy.iter().next().unwrap();
                    Self::accum(grads, *x, ArrayD::from_elem(xv.raw_dim(), scale));
                }
            }
            Op::Reshape(x) => {
                if self.ng(*x) {
                    let xs = self.nodes[x.0].value.raw_dim();
                    Self::accum(grads, *x, dy.clone().into_shape_with_order(xs).unwrap());
                }
            }
            Op::Transpose021(x) => {
                if self.ng(*x) {
                    let v = dy
                        .view()
                        .permuted_axes(IxDyn(&[0, 2, 1]))
                        .to_owned()
                        .as_standard_layout()
                        .to_owned();
                    Self::accum(grads, *x, v);
                }
            }
            Op::ConcatChannel(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    if self.ng(p) {
                        let slice = dy
                            .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + c))
                            .to_owned();
                        Self::accum(grads, p, slice);
                    }
                    offset += c;
                }
            }
            Op::GridSample { src, flow } => {
                let need_dsrc = self.ng(*src);
                let bwd = ops::grid_sample_backward(
                    &as4(&self.nodes[src.0].value),
                    &as4(&self.nodes[flow.0].value),
                    &as4(dy),
                    need_dsrc,
                );
                if need_dsrc {
                    Self::accum(grads, *src, bwd.dsrc.into_dyn());
                }
                if self.ng(*flow) {
                    Self::accum(grads, *flow, bwd.dflow.into_dyn());
                }
            }
            Op::DiffAxis { x, axis } => {
                if self.ng(*x) {
                    let xs = self.nodes[x.0].value.raw_dim();
                    let n = xs[*axis];
                    let mut dx = ArrayD::<f32>::zeros(xs);
                    {
                        let mut hi = dx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(1..n));
                        hi += dy;
                    }
                    {
                        let mut lo =
                            dx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(0..n - 1));
                        lo -= dy;
                    }
                    Self::accum(grads, *x, dx);
                }
            }
        }
    }
}
