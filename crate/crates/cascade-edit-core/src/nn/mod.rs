//! Minimal reverse-mode autodiff over ndarray plus the layer vocabulary and
//! optimizer used by every trainable network in the pipeline. CPU only,
//! f32, fully deterministic given seeds.

pub mod adam;
pub mod graph;
pub mod layers;
pub mod ops;

pub use adam::Adam;
pub use graph::{Arr, Graph, NodeId};
pub use layers::{
    preferred_groups, stack_nchw, timestep_embedding, Conv2d, CrossAttention, GroupNorm, Linear,
    ParamId, ParamStore, ResBlock,
};

#[cfg(test)]
mod grad_tests {
    //! Central finite-difference checks for every differentiable op. Each
    //! test perturbs the inputs of a scalar-valued composite and compares
    //! analytic gradients against (f(x+h) - f(x-h)) / 2h.

    use super::graph::{Arr, Graph, NodeId};
    use crate::rng;
    use ndarray::{ArrayD, IxDyn};

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut r = rng::seeded(seed);
        let mut a = ArrayD::<f32>::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            *v = rng::normal(&mut r);
        }
        a
    }

    /// Builds the scalar loss from leaf values; returns (loss_id, leaf_ids).
    type Builder = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

    fn check_grads(leaves: &[Arr], build: &Builder, tol: f64) {
        check_grads_h(leaves, build, 5e-3, tol);
    }

    fn check_grads_h(leaves: &[Arr], build: &Builder, h: f32, tol: f64) {
        // analytic; leaves are created first, so they occupy grad slots 0..n
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| g.variable(l.clone())).collect();
        let loss = build(&mut g, &ids);
        let grads = g.backward(loss);
        let analytic: Vec<Arr> = (0..leaves.len())
            .map(|i| {
                grads[i]
                    .clone()
                    .unwrap_or_else(|| ArrayD::zeros(leaves[i].raw_dim()))
            })
            .collect();

        for (li, leaf) in leaves.iter().enumerate() {
            for flat in 0..leaf.len() {
                let mut plus = leaves.to_vec();
                let mut minus = leaves.to_vec();
                *plus[li].iter_mut().nth(flat).unwrap() += h;
                *minus[li].iter_mut().nth(flat).unwrap() -= h;
                let fp = eval(&plus, build);
                let fm = eval(&minus, build);
                let fd = (fp as f64 - fm as f64) / (2.0 * h as f64);
                let an = *analytic[li].iter().nth(flat).unwrap() as f64;
                // mixed criterion: f32 central differences carry ~1e-4
                // absolute noise at loss scale O(1)
                let err = (an - fd).abs();
                let bound = 2e-4 + tol * an.abs().max(fd.abs());
                assert!(
                    err <= bound,
                    "leaf {li} elem {flat}: analytic {an} vs fd {fd} (err {err} > {bound})"
                );
            }
        }
    }

    fn eval(leaves: &[Arr], build: &Builder) -> f32 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| g.variable(l.clone())).collect();
        let loss = build(&mut g, &ids);
        g.scalar(loss)
    }

    #[test]
    fn grad_elementwise_chain() {
        let x = randn(&[2, 3], 10);
        let y = randn(&[2, 3], 11);
        check_grads(
            &[x, y],
            &|g, ids| {
                let a = g.mul(ids[0], ids[1]);
                let b = g.add(a, ids[0]);
                let c = g.sub(b, ids[1]);
                let d = g.mul_scalar(c, 0.7);
                let e = g.add_scalar(d, 0.1);
                let f = g.square(e);
                g.mean_all(f)
            },
            1e-2,
        );
    }

    #[test]
    fn grad_sqrt_charbonnier() {
        let x = randn(&[3, 4], 12);
        check_grads(
            &[x],
            &|g, ids| {
                let s = g.square(ids[0]);
                let s = g.add_scalar(s, 1e-3);
                let r = g.sqrt(s);
                g.mean_all(r)
            },
            1e-2,
        );
    }

    #[test]
    fn grad_activations() {
        let x = randn(&[2, 5], 13);
        check_grads(
            &[x.clone()],
            &|g, ids| {
                let a = g.silu(ids[0]);
                g.mean_all(a)
            },
            1e-2,
        );
        check_grads(
            &[x.clone()],
            &|g, ids| {
                let a = g.sigmoid(ids[0]);
                g.mean_all(a)
            },
            1e-2,
        );
        check_grads(
            &[x],
            &|g, ids| {
                let a = g.leaky_relu(ids[0], 0.1);
                g.mean_all(a)
            },
            1e-2,
        );
    }

    #[test]
    fn grad_matmul_bias() {
        let x = randn(&[3, 4], 14);
        let w = randn(&[4, 2], 15);
        let b = randn(&[2], 16);
        check_grads(
            &[x, w, b],
            &|g, ids| {
                let y = g.matmul(ids[0], ids[1]);
                let y = g.add_bias_row(y, ids[2]);
                let y = g.square(y);
                g.mean_all(y)
            },
            1e-2,
        );
    }

    #[test]
    fn grad_bmm_softmax_transpose() {
        let q = randn(&[2, 3, 4], 17);
        let k = randn(&[2, 5, 4], 18);
        let v = randn(&[2, 5, 4], 19);
        check_grads(
            &[q, k, v],
            &|g, ids| {
                let kt = g.transpose021(ids[1]); // [2,4,5]
                let s = g.bmm(ids[0], kt); // [2,3,5]
                let s = g.mul_scalar(s, 0.5);
                let a = g.softmax_last(s);
                let o = g.bmm(a, ids[2]); // [2,3,4]
                let o = g.square(o);
                g.mean_all(o)
            },
            1e-2,
        );
    }

    #[test]
    fn grad_conv2d_stride1_and_2() {
        let x = randn(&[2, 3, 6, 6], 20).mapv(|v| 0.5 * v);
        let w = randn(&[4, 3, 3, 3], 21).mapv(|v| 0.3 * v);
        let b = randn(&[4], 22).mapv(|v| 0.3 * v);
        // loss is quadratic in each input; central differences are exact up
        // to rounding, so a larger h is strictly more accurate here
        check_grads_h(
            &[x.clone(), w.clone(), b.clone()],
            &|g, ids| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1);
                let y = g.square(y);
                g.mean_all(y)
            },
            5e-2,
            1e-2,
        );
        check_grads_h(
            &[x, w, b],
            &|g, ids| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1);
                let y = g.square(y);
                g.mean_all(y)
            },
            5e-2,
            1e-2,
        );
    }

    #[test]
    fn grad_upsample_avgpool() {
        let x = randn(&[2, 3, 4, 4], 23);
        check_grads(
            &[x.clone()],
            &|g, ids| {
                let y = g.upsample_nearest2(ids[0]);
                let y = g.square(y);
                g.mean_all(y)
            },
            1e-2,
        );
        check_grads(
            &[x],
            &|g, ids| {
                let y = g.avg_pool_global(ids[0]);
                let y = g.square(y);
                g.mean_all(y)
            },
            1e-2,
        );
    }

    #[test]
    fn grad_group_norm() {
        let x = randn(&[2, 4, 3, 3], 24);
        let gamma = randn(&[4], 25).mapv(|v| 1.0 + 0.1 * v);
        let beta = randn(&[4], 26).mapv(|v| 0.1 * v);
        check_grads(
            &[x, gamma, beta],
            &|g, ids| {
                let y = g.group_norm(ids[0], ids[1], ids[2], 2, 1e-5);
                let y = g.square(y);
                g.mean_all(y)
            },
            1e-2,
        );
    }

    #[test]
    fn grad_scale_shift_channel() {
        let x = randn(&[2, 3, 4, 4], 27);
        let s = randn(&[2, 3], 28).mapv(|v| 0.3 * v);
        let t = randn(&[2, 3], 29).mapv(|v| 0.3 * v);
        check_grads(
            &[x, s, t],
            &|g, ids| {
                let y = g.scale_shift_channel(ids[0], Some(ids[1]), Some(ids[2]));
                let y = g.square(y);
                g.mean_all(y)
            },
            1e-2,
        );
    }

    #[test]
    fn grad_concat_reshape_diff() {
        let a = randn(&[2, 2, 3, 3], 30);
        let b = randn(&[2, 3, 3, 3], 31);
        check_grads(
            &[a, b],
            &|g, ids| {
                let y = g.concat_channel(&[ids[0], ids[1]]);
                let d = g.diff_axis(y, 2);
                let d = g.square(d);
                g.mean_all(d)
            },
            1e-2,
        );
    }

    #[test]
    fn grad_grid_sample_flow_and_src() {
        // Smooth source so bilinear interpolation is locally linear; keep
        // offsets well inside the frame to stay off clamp boundaries.
        let mut src = ArrayD::<f32>::zeros(IxDyn(&[1, 2, 6, 6]));
        for c in 0..2 {
            for y in 0..6 {
                for x in 0..6 {
                    src[[0, c, y, x]] =
                        (0.3 * y as f32 + 0.15 * x as f32 + 0.1 * c as f32).sin();
                }
            }
        }
        // offsets ~0.4..0.6 px keep sample positions mid-cell, away from
        // the bilinear kinks at integer coordinates
        let px_to_norm = 2.0 / 5.0f32;
        let flow = randn(&[1, 2, 6, 6], 33).mapv(|v| (0.5 + 0.1 * v.tanh()) * px_to_norm);
        check_grads_h(
            &[src, flow],
            &|g, ids| {
                let y = g.grid_sample(ids[0], ids[1]);
                let y = g.square(y);
                g.mean_all(y)
            },
            1e-3,
            2e-2,
        );
    }

    #[test]
    fn backward_accumulates_shared_nodes() {
        // y = x*x + x used twice; d/dx = 2x + 1
        let x = ArrayD::from_elem(IxDyn(&[1]), 3.0f32);
        let mut g = Graph::new();
        let xid = g.variable(x);
        let sq = g.mul(xid, xid);
        let sum = g.add(sq, xid);
        let loss = g.sum_all(sum);
        let grads = g.backward(loss);
        let gx = grads[0].as_ref().unwrap().iter().next().copied().unwrap();
        assert!((gx - 7.0).abs() < 1e-5, "expected 7, got {gx}");
    }
}
