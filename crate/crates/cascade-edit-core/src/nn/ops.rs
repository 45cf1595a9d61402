//! Dense kernels for the tape. Forward and backward implementations are kept
//! together so the pairing is auditable; every one of them is covered by a
//! central finite-difference test in the graph module.
//!
//! Layout convention: activations are `[N, C, H, W]`, conv weights
//! `[Cout, Cin, KH, KW]`, flow fields `[N, 2, H, W]` with channel 0 the x
//! offset and channel 1 the y offset in normalized `[-1, 1]` coordinates
//! (align-corners grid, border clamp).

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array4, ArrayView2, ArrayView4};

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfold `x` into the im2col matrix `[N*OH*OW, Cin*KH*KW]`.
pub fn im2col(x: &ArrayView4<f32>, k: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (n, cin, h, w) = x.dim();
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut col = Array2::<f32>::zeros((n * oh * ow, cin * k * k));
    let xs = x.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().expect("standard layout");
    let row_len = cin * k * k;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * row_len;
                for ci in 0..cin {
                    let x_base = (ni * cin + ci) * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let col_base = row + (ci * k + ky) * k;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_base + iy as usize * w;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[col_base + kx] = xs[x_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the im2col gradient back onto the (unpadded) input.
pub fn col2im(
    dcol: &ArrayView2<f32>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut dx = Array4::<f32>::zeros((n, cin, h, w));
    let ds = dcol.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    let row_len = cin * k * k;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * row_len;
                for ci in 0..cin {
                    let x_base = (ni * cin + ci) * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let col_base = row + (ci * k + ky) * k;
                        let x_row = x_base + iy as usize * w;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xs[x_row + ix as usize] += ds[col_base + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub struct ConvForward {
    pub y: Array4<f32>,
    /// Saved unfold for the backward pass.
    pub col: Array2<f32>,
}

pub fn conv2d_forward(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    b: Option<&Array1<f32>>,
    stride: usize,
    pad: usize,
) -> ConvForward {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv channel mismatch");
    assert_eq!(kh, kw, "square kernels only");
    let k = kh;
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    let col = im2col(x, k, stride, pad);
    let wmat = w
        .to_shape((cout, cin * k * k))
        .expect("weight reshape")
        .to_owned();
    // [N*OH*OW, CinKK] x [CinKK, Cout]
    let mut out_mat = Array2::<f32>::zeros((n * oh * ow, cout));
    general_mat_mul(1.0, &col, &wmat.t(), 0.0, &mut out_mat);
    let mut y = Array4::<f32>::zeros((n, cout, oh, ow));
    {
        let om = out_mat.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let r = ((ni * oh + oy) * ow + ox) * cout;
                    for co in 0..cout {
                        ys[((ni * cout + co) * oh + oy) * ow + ox] = om[r + co];
                    }
                }
            }
        }
    }
    if let Some(bias) = b {
        for ni in 0..n {
            for co in 0..cout {
                let bv = bias[co];
                y.index_axis_mut(ndarray::Axis(0), ni)
                    .index_axis_mut(ndarray::Axis(0), co)
                    .mapv_inplace(|v| v + bv);
            }
        }
    }
    ConvForward { y, col }
}

pub struct ConvBackward {
    pub dx: Array4<f32>,
    pub dw: Array4<f32>,
    pub db: Option<Array1<f32>>,
}

pub fn conv2d_backward(
    col: &Array2<f32>,
    x_dim: (usize, usize, usize, usize),
    w: &ArrayView4<f32>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    dy: &ArrayView4<f32>,
) -> ConvBackward {
    let (n, cin, h, wd) = x_dim;
    let (cout, _, k, _) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    // dy as [N*OH*OW, Cout]
    let mut dy_mat = Array2::<f32>::zeros((n * oh * ow, cout));
    {
        let dys = dy.as_slice().expect("standard layout");
        let dm = dy_mat.as_slice_mut().unwrap();
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dm[(((ni * oh + oy) * ow + ox) * cout) + co] =
                            dys[((ni * cout + co) * oh + oy) * ow + ox];
                    }
                }
            }
        }
    }
    // dW = dyᵀ · col
    let mut dw_mat = Array2::<f32>::zeros((cout, cin * k * k));
    general_mat_mul(1.0, &dy_mat.t(), col, 0.0, &mut dw_mat);
    let dw = dw_mat
        .into_shape_with_order((cout, cin, k, k))
        .expect("dw reshape");
    let db = has_bias.then(|| {
        let mut db = Array1::<f32>::zeros(cout);
        for (r, row) in dy_mat.outer_iter().enumerate() {
            let _ = r;
            for (co, v) in row.iter().enumerate() {
                db[co] += v;
            }
        }
        db
    });
    // dcol = dy · Wmat
    let wmat = w
        .to_shape((cout, cin * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut dcol = Array2::<f32>::zeros((n * oh * ow, cin * k * k));
    general_mat_mul(1.0, &dy_mat, &wmat, 0.0, &mut dcol);
    let dx = col2im(&dcol.view(), n, cin, h, wd, k, stride, pad);
    ConvBackward { dx, dw, db }
}

pub fn upsample_nearest2_forward(x: &ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f32>::zeros((n, c, h * 2, w * 2));
    for ni in 0..n {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x[[ni, ci, iy, ix]];
                    y[[ni, ci, 2 * iy, 2 * ix]] = v;
                    y[[ni, ci, 2 * iy, 2 * ix + 1]] = v;
                    y[[ni, ci, 2 * iy + 1, 2 * ix]] = v;
                    y[[ni, ci, 2 * iy + 1, 2 * ix + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample_nearest2_backward(dy: &ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    dx[[ni, ci, iy, ix]] = dy[[ni, ci, 2 * iy, 2 * ix]]
                        + dy[[ni, ci, 2 * iy, 2 * ix + 1]]
                        + dy[[ni, ci, 2 * iy + 1, 2 * ix]]
                        + dy[[ni, ci, 2 * iy + 1, 2 * ix + 1]];
                }
            }
        }
    }
    dx
}

pub struct GroupNormForward {
    pub y: Array4<f32>,
    pub xhat: Array4<f32>,
    /// `[N, groups]`
    pub inv_std: Array2<f32>,
}

pub fn group_norm_forward(
    x: &ArrayView4<f32>,
    gamma: &Array1<f32>,
    beta: &Array1<f32>,
    groups: usize,
    eps: f32,
) -> GroupNormForward {
    let (n, c, h, w) = x.dim();
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    let cg = c / groups;
    let m = (cg * h * w) as f64;
    let mut xhat = Array4::<f32>::zeros((n, c, h, w));
    let mut inv_std = Array2::<f32>::zeros((n, groups));
    let mut y = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for gi in 0..groups {
            let mut sum = 0.0f64;
            let mut sum2 = 0.0f64;
            for ci in gi * cg..(gi + 1) * cg {
                for iy in 0..h {
                    for ix in 0..w {
                        let v = x[[ni, ci, iy, ix]] as f64;
                        sum += v;
                        sum2 += v * v;
                    }
                }
            }
            let mu = sum / m;
            let var = (sum2 / m - mu * mu).max(0.0);
            let istd = 1.0 / (var + eps as f64).sqrt();
            inv_std[[ni, gi]] = istd as f32;
            for ci in gi * cg..(gi + 1) * cg {
                let (ga, be) = (gamma[ci], beta[ci]);
                for iy in 0..h {
                    for ix in 0..w {
                        let xh = ((x[[ni, ci, iy, ix]] as f64 - mu) * istd) as f32;
                        xhat[[ni, ci, iy, ix]] = xh;
                        y[[ni, ci, iy, ix]] = ga * xh + be;
                    }
                }
            }
        }
    }
    GroupNormForward { y, xhat, inv_std }
}

pub struct GroupNormBackward {
    pub dx: Array4<f32>,
    pub dgamma: Array1<f32>,
    pub dbeta: Array1<f32>,
}

pub fn group_norm_backward(
    xhat: &Array4<f32>,
    inv_std: &Array2<f32>,
    gamma: &Array1<f32>,
    groups: usize,
    dy: &ArrayView4<f32>,
) -> GroupNormBackward {
    let (n, c, h, w) = xhat.dim();
    let cg = c / groups;
    let m = (cg * h * w) as f64;
    let mut dgamma = Array1::<f32>::zeros(c);
    let mut dbeta = Array1::<f32>::zeros(c);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let mut dg = 0.0f64;
            let mut db = 0.0f64;
            for iy in 0..h {
                for ix in 0..w {
                    let d = dy[[ni, ci, iy, ix]] as f64;
                    dg += d * xhat[[ni, ci, iy, ix]] as f64;
                    db += d;
                }
            }
            dgamma[ci] += dg as f32;
            dbeta[ci] += db as f32;
        }
        for gi in 0..groups {
            let mut mean_dxhat = 0.0f64;
            let mut mean_dxhat_xhat = 0.0f64;
            for ci in gi * cg..(gi + 1) * cg {
                let ga = gamma[ci] as f64;
                for iy in 0..h {
                    for ix in 0..w {
                        let dxh = dy[[ni, ci, iy, ix]] as f64 * ga;
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[[ni, ci, iy, ix]] as f64;
                    }
                }
            }
            mean_dxhat /= m;
            mean_dxhat_xhat /= m;
            let istd = inv_std[[ni, gi]] as f64;
            for ci in gi * cg..(gi + 1) * cg {
                let ga = gamma[ci] as f64;
                for iy in 0..h {
                    for ix in 0..w {
                        let dxh = dy[[ni, ci, iy, ix]] as f64 * ga;
                        let xh = xhat[[ni, ci, iy, ix]] as f64;
                        dx[[ni, ci, iy, ix]] =
                            (istd * (dxh - mean_dxhat - xh * mean_dxhat_xhat)) as f32;
                    }
                }
            }
        }
    }
    GroupNormBackward { dx, dgamma, dbeta }
}

/// Backward bilinear warp: `out(p) = src(p + flow(p))`, align-corners
/// normalized offsets, border clamp outside the frame.
pub fn grid_sample_forward(src: &ArrayView4<f32>, flow: &ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h, w) = src.dim();
    let mut y = Array4::<f32>::zeros((n, c, h, w));
    let sx_scale = (w as f32 - 1.0) / 2.0;
    let sy_scale = (h as f32 - 1.0) / 2.0;
    for ni in 0..n {
        for iy in 0..h {
            for ix in 0..w {
                let sx = (ix as f32 + flow[[ni, 0, iy, ix]] * sx_scale).clamp(0.0, w as f32 - 1.0);
                let sy = (iy as f32 + flow[[ni, 1, iy, ix]] * sy_scale).clamp(0.0, h as f32 - 1.0);
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let wx = sx - x0 as f32;
                let wy = sy - y0 as f32;
                for ci in 0..c {
                    let v00 = src[[ni, ci, y0, x0]];
                    let v01 = src[[ni, ci, y0, x1]];
                    let v10 = src[[ni, ci, y1, x0]];
                    let v11 = src[[ni, ci, y1, x1]];
                    y[[ni, ci, iy, ix]] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                        + wy * ((1.0 - wx) * v10 + wx * v11);
                }
            }
        }
    }
    y
}

pub struct GridSampleBackward {
    pub dsrc: Array4<f32>,
    pub dflow: Array4<f32>,
}

pub fn grid_sample_backward(
    src: &ArrayView4<f32>,
    flow: &ArrayView4<f32>,
    dy: &ArrayView4<f32>,
    need_dsrc: bool,
) -> GridSampleBackward {
    let (n, c, h, w) = src.dim();
    let mut dsrc = Array4::<f32>::zeros((n, c, h, w));
    let mut dflow = Array4::<f32>::zeros((n, 2, h, w));
    let sx_scale = (w as f32 - 1.0) / 2.0;
    let sy_scale = (h as f32 - 1.0) / 2.0;
    for ni in 0..n {
        for iy in 0..h {
            for ix in 0..w {
                let rx = ix as f32 + flow[[ni, 0, iy, ix]] * sx_scale;
                let ry = iy as f32 + flow[[ni, 1, iy, ix]] * sy_scale;
                let sx = rx.clamp(0.0, w as f32 - 1.0);
                let sy = ry.clamp(0.0, h as f32 - 1.0);
                let x_active = rx > 0.0 && rx < w as f32 - 1.0;
                let y_active = ry > 0.0 && ry < h as f32 - 1.0;
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let wx = sx - x0 as f32;
                let wy = sy - y0 as f32;
                let mut dsx = 0.0f32;
                let mut dsy = 0.0f32;
                for ci in 0..c {
                    let g = dy[[ni, ci, iy, ix]];
                    if g == 0.0 {
                        continue;
                    }
                    let v00 = src[[ni, ci, y0, x0]];
                    let v01 = src[[ni, ci, y0, x1]];
                    let v10 = src[[ni, ci, y1, x0]];
                    let v11 = src[[ni, ci, y1, x1]];
                    dsx += g * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                    dsy += g * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                    if need_dsrc {
                        dsrc[[ni, ci, y0, x0]] += g * (1.0 - wy) * (1.0 - wx);
                        dsrc[[ni, ci, y0, x1]] += g * (1.0 - wy) * wx;
                        dsrc[[ni, ci, y1, x0]] += g * wy * (1.0 - wx);
                        dsrc[[ni, ci, y1, x1]] += g * wy * wx;
                    }
                }
                if x_active {
                    dflow[[ni, 0, iy, ix]] = dsx * sx_scale;
                }
                if y_active {
                    dflow[[ni, 1, iy, ix]] = dsy * sy_scale;
                }
            }
        }
    }
    GridSampleBackward { dsrc, dflow }
}

/// `[m, k] x [k, n]` into a fresh output.
pub fn matmul2(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((a.dim().0, b.dim().1));
    general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}
