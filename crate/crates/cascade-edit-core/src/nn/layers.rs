//! Parameter store and the small layer vocabulary the pipeline's networks are
//! assembled from. Layers hold parameter slots plus hyperparameters; the
//! arrays themselves live in a `ParamStore` so checkpointing and the
//! optimizer see one flat named list.

use super::graph::{Arr, Graph, NodeId};
use crate::rng;
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Arr) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.by_name.insert(name.to_string(), self.values.len() - 1);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Load values by name; shapes must match the registered layout.
    pub fn load_named(&mut self, entries: &[(String, Arr)]) -> crate::Result<()> {
        for (name, value) in entries {
            let Some(&idx) = self.by_name.get(name) else {
                return Err(crate::Error::Checkpoint(format!(
                    "unknown parameter '{name}' in checkpoint"
                )));
            };
            if self.values[idx].shape() != value.shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter '{name}' shape {:?} != expected {:?}",
                    value.shape(),
                    self.values[idx].shape()
                )));
            }
            self.values[idx] = value.clone();
        }
        Ok(())
    }

    pub fn enter(&self, g: &mut Graph, id: ParamId) -> NodeId {
        g.param_slot(id.0, &self.values[id.0])
    }

    /// Collect `(ParamId, grad)` pairs after a backward pass.
    pub fn grads_from(&self, g: &Graph, grads: &[Option<Arr>]) -> Vec<(ParamId, Arr)> {
        g.param_grads(grads)
            .into_iter()
            .map(|(slot, grad)| (ParamId(slot), grad))
            .collect()
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f32).sqrt();
    let mut a = ArrayD::<f32>::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = rng::normal(rng) * std;
    }
    a
}

fn xavier_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Arr {
    let std = (2.0 / (fan_in + fan_out) as f32).sqrt();
    let mut a = ArrayD::<f32>::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = rng::normal(rng) * std;
    }
    a
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.register(
            &format!("{name}.w"),
            he_normal(rng, &[out_ch, in_ch, k, k], in_ch * k * k),
        );
        let b = ps.register(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_ch])));
        Conv2d { w, b, stride, pad }
    }

    /// All-zero weights and bias; used for output heads that must start as
    /// the zero map.
    pub fn zeroed(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.register(
            &format!("{name}.w"),
            ArrayD::zeros(IxDyn(&[out_ch, in_ch, k, k])),
        );
        let b = ps.register(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_ch])));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let w = ps.enter(g, self.w);
        let b = ps.enter(g, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_f: usize,
        out_f: usize,
    ) -> Self {
        let w = ps.register(
            &format!("{name}.w"),
            xavier_normal(rng, &[in_f, out_f], in_f, out_f),
        );
        let b = ps.register(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_f])));
        Linear { w, b }
    }

    pub fn zeroed(ps: &mut ParamStore, name: &str, in_f: usize, out_f: usize) -> Self {
        let w = ps.register(&format!("{name}.w"), ArrayD::zeros(IxDyn(&[in_f, out_f])));
        let b = ps.register(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_f])));
        Linear { w, b }
    }

    /// `x: [n, in_f] -> [n, out_f]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let w = ps.enter(g, self.w);
        let b = ps.enter(g, self.b);
        let y = g.matmul(x, w);
        g.add_bias_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f32,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        let groups = preferred_groups(channels);
        let gamma = ps.register(
            &format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[channels]), 1.0),
        );
        let beta = ps.register(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
        GroupNorm {
            gamma,
            beta,
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let ga = ps.enter(g, self.gamma);
        let be = ps.enter(g, self.beta);
        g.group_norm(x, ga, be, self.groups, self.eps)
    }
}

/// Largest group count <= 8 that divides the channel count.
pub fn preferred_groups(channels: usize) -> usize {
    for g in [8, 4, 2, 1] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

/// Single-head cross-attention: queries from a spatial feature map,
/// keys/values from a token sequence. The output projection starts at zero
/// so the block begins as an identity residual.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub norm: GroupNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub width: usize,
}

impl CrossAttention {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        token_dim: usize,
    ) -> Self {
        CrossAttention {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), width),
            q: Linear::new(ps, rng, &format!("{name}.q"), width, width),
            k: Linear::new(ps, rng, &format!("{name}.k"), token_dim, width),
            v: Linear::new(ps, rng, &format!("{name}.v"), token_dim, width),
            out: Linear::zeroed(ps, &format!("{name}.out"), width, width),
            width,
        }
    }

    /// `x: [N, C, H, W]`, `tokens: [N, L, D]` -> `[N, C, H, W]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId, tokens: NodeId) -> NodeId {
        let xs = g.value(x).shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(c, self.width);
        let ts = g.value(tokens).shape().to_vec();
        let (tn, l, d) = (ts[0], ts[1], ts[2]);
        assert_eq!(n, tn, "attention batch mismatch");

        let xn = self.norm.forward(g, ps, x);
        // [N,C,H,W] -> [N, HW, C]
        let xr = g.reshape(xn, &[n, c, h * w]);
        let xt = g.transpose021(xr);
        let q_in = g.reshape(xt, &[n * h * w, c]);
        let q = self.q.forward(g, ps, q_in);
        let q = g.reshape(q, &[n, h * w, c]);

        let tok2 = g.reshape(tokens, &[n * l, d]);
        let k = self.k.forward(g, ps, tok2);
        let k = g.reshape(k, &[n, l, c]);
        let v = self.v.forward(g, ps, tok2);
        let v = g.reshape(v, &[n, l, c]);

        let kt = g.transpose021(k); // [N, C, L]
        let scores = g.bmm(q, kt); // [N, HW, L]
        let scores = g.mul_scalar(scores, 1.0 / (c as f32).sqrt());
        let attn = g.softmax_last(scores);
        let ctx = g.bmm(attn, v); // [N, HW, C]

        let ctx2 = g.reshape(ctx, &[n * h * w, c]);
        let proj = self.out.forward(g, ps, ctx2);
        let proj = g.reshape(proj, &[n, h * w, c]);
        let proj = g.transpose021(proj); // [N, C, HW]
        let proj = g.reshape(proj, &[n, c, h, w]);
        g.add(x, proj)
    }
}

/// Residual block with group norm, SiLU and an optional per-sample channel
/// shift injected between the convolutions (used for timestep embeddings
/// and AdaIN-style motion modulation).
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub emb: Option<Linear>,
}

impl ResBlock {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        emb_dim: Option<usize>,
    ) -> Self {
        ResBlock {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), in_ch),
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), out_ch),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1),
            skip: (in_ch != out_ch)
                .then(|| Conv2d::new(ps, rng, &format!("{name}.skip"), in_ch, out_ch, 1, 1, 0)),
            emb: emb_dim
                .map(|d| Linear::new(ps, rng, &format!("{name}.emb"), d, out_ch)),
        }
    }

    /// `emb: [N, emb_dim]` if the block was built with an embedding input.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: NodeId,
        emb: Option<NodeId>,
    ) -> NodeId {
        let h = self.norm1.forward(g, ps, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, ps, h);
        if let (Some(lin), Some(e)) = (&self.emb, emb) {
            let shift = lin.forward(g, ps, e); // [N, out_ch]
            h = g.scale_shift_channel(h, None, Some(shift));
        }
        let h = self.norm2.forward(g, ps, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, ps, h);
        let sk = match &self.skip {
            Some(conv) => conv.forward(g, ps, x),
            None => x,
        };
        g.add(h, sk)
    }
}

/// Sinusoidal embedding of integer timesteps, `[N] -> [N, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Array2<f32> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Array2::<f32>::zeros((ts.len(), dim));
    for (row, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (10_000f32).powf(-(i as f32) / half as f32);
            let arg = t as f32 * freq;
            out[[row, i]] = arg.sin();
            out[[row, half + i]] = arg.cos();
        }
    }
    out
}

/// Stack `[C,H,W]` slices into a `[N,C,H,W]` batch tensor.
pub fn stack_nchw(items: &[ndarray::Array3<f32>]) -> Array4<f32> {
    assert!(!items.is_empty());
    let (c, h, w) = items[0].dim();
    let mut out = Array4::<f32>::zeros((items.len(), c, h, w));
    for (n, item) in items.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), n).assign(item);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_names_are_stable_and_unique() {
        let mut ps = ParamStore::new();
        let mut r = rng::seeded(1);
        let c = Conv2d::new(&mut ps, &mut r, "enc.conv1", 3, 8, 3, 1, 1);
        let l = Linear::new(&mut ps, &mut r, "head", 8, 2);
        assert_eq!(ps.name(c.w), "enc.conv1.w");
        assert_eq!(ps.name(l.b), "head.b");
        assert_eq!(ps.id_of("enc.conv1.w"), Some(c.w));
        assert_eq!(ps.len(), 4);
    }

    #[test]
    fn timestep_embedding_shape_and_range() {
        let e = timestep_embedding(&[1, 100, 200], 32);
        assert_eq!(e.dim(), (3, 32));
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e.row(0), e.row(1));
    }
}
