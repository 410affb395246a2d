//! Value-level (non-differentiated) forward math, shared with the graph ops
//! in [`crate::autograd`] so that graph and plain-value execution paths are
//! arithmetically identical.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu_scalar(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn linear(x: &ArrayView2<'_, f64>, w: &ArrayView2<'_, f64>, b: Option<&ArrayView1<'_, f64>>) -> Array2<f64> {
    let y = x.dot(&w.t());
    match b {
        Some(b) => &y + &b.insert_axis(Axis(0)),
        None => y,
    }
}

/// Row-wise layer norm (no affine); also returns per-row 1/std for backward.
pub fn layer_norm_rows_aux(x: &ArrayView2<'_, f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let (n, d) = x.dim();
    let mut xhat = Array2::<f64>::zeros((n, d));
    let mut inv_std = Array1::<f64>::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            xhat[(i, j)] = (row[j] - mean) * is;
        }
    }
    (xhat, inv_std)
}

pub fn layer_norm_rows(x: &ArrayView2<'_, f64>, eps: f64) -> Array2<f64> {
    layer_norm_rows_aux(x, eps).0
}

/// Row softmax with an optional additive mask of 0 / -inf entries.
pub fn softmax_rows(x: &ArrayView2<'_, f64>, mask_bias: Option<&Array2<f64>>) -> Array2<f64> {
    let (n, m) = x.dim();
    let biased = match mask_bias {
        Some(mb) => {
            assert_eq!(mb.dim(), (n, m));
            x + mb
        }
        None => x.to_owned(),
    };
    let mut y = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let row = biased.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..m {
            let e = (row[j] - mx).exp();
            y[(i, j)] = e;
            denom += e;
        }
        for j in 0..m {
            y[(i, j)] /= denom;
        }
    }
    y
}

/// Group norm over `[c,h,w]`; returns (y, xhat, per-group 1/std).
pub fn group_norm_aux(
    x: &ArrayView3<'_, f64>,
    gamma: &ArrayView1<'_, f64>,
    beta: &ArrayView1<'_, f64>,
    groups: usize,
    eps: f64,
) -> (Array3<f64>, Array3<f64>, Vec<f64>) {
    let (c, h, w) = x.dim();
    assert!(c % groups == 0, "channels must divide into groups");
    let gsz = c / groups;
    let m = gsz * h * w;
    let mut xhat = Array3::<f64>::zeros((c, h, w));
    let mut inv_std = vec![0.0; groups];
    for g in 0..groups {
        let sl = x.slice(ndarray::s![g * gsz..(g + 1) * gsz, .., ..]);
        let mean = sl.sum() / m as f64;
        let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[g] = is;
        let mut dst = xhat.slice_mut(ndarray::s![g * gsz..(g + 1) * gsz, .., ..]);
        dst.assign(&sl.mapv(|v| (v - mean) * is));
    }
    let mut y = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        let xh = xhat.index_axis(Axis(0), ci);
        let mut dst = y.index_axis_mut(Axis(0), ci);
        dst.assign(&xh.mapv(|v| v * gamma[ci] + beta[ci]));
    }
    (y, xhat, inv_std)
}

pub(crate) fn im2col(
    x: &ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((hout * wout, cin * kh * kw));
    for oy in 0..hout {
        for ox in 0..wout {
            let row = oy * wout + ox;
            for ci in 0..cin {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, ci * kh * kw + ky * kw + kx)] =
                            x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    gcols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Array3<f64> {
    let mut gx = Array3::<f64>::zeros((cin, h, w));
    for oy in 0..hout {
        for ox in 0..wout {
            let row = oy * wout + ox;
            for ci in 0..cin {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[(ci, iy as usize, ix as usize)] +=
                            gcols[(row, ci * kh * kw + ky * kw + kx)];
                    }
                }
            }
        }
    }
    gx
}

/// im2col convolution; also returns the column matrix for backward reuse.
pub(crate) fn conv2d_with_cols(
    x: &ArrayView3<'_, f64>,
    w: &ArrayView4<'_, f64>,
    b: Option<&ArrayView1<'_, f64>>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array2<f64>) {
    let (cin, h, wdt) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv channel mismatch");
    let hout = (h + 2 * pad - kh) / stride + 1;
    let wout = (wdt + 2 * pad - kw) / stride + 1;
    let cols = im2col(x, kh, kw, stride, pad, hout, wout);
    let wmat = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv weight reshape")
        .to_owned();
    let ymat = cols.dot(&wmat.t());
    let mut y = Array3::<f64>::zeros((cout, hout, wout));
    for co in 0..cout {
        for oy in 0..hout {
            for ox in 0..wout {
                y[(co, oy, ox)] = ymat[(oy * wout + ox, co)];
            }
        }
    }
    if let Some(b) = b {
        for co in 0..cout {
            y.index_axis_mut(Axis(0), co).mapv_inplace(|v| v + b[co]);
        }
    }
    (y, cols)
}

pub fn conv2d(
    x: &ArrayView3<'_, f64>,
    w: &ArrayView4<'_, f64>,
    b: Option<&ArrayView1<'_, f64>>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    conv2d_with_cols(x, w, b, stride, pad).0
}

pub fn upsample_nearest2(x: &ArrayView3<'_, f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<f64>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[(ci, i, j)];
                y[(ci, 2 * i, 2 * j)] = v;
                y[(ci, 2 * i, 2 * j + 1)] = v;
                y[(ci, 2 * i + 1, 2 * j)] = v;
                y[(ci, 2 * i + 1, 2 * j + 1)] = v;
            }
        }
    }
    y
}

/// Corner-aligned bilinear resampling of `[c,h,w]`; identity when the target
/// equals the source shape.
pub fn bilinear(x: &ArrayView3<'_, f64>, h2: usize, w2: usize) -> Array3<f64> {
    let (_, h, w) = x.dim();
    if h2 == h && w2 == w {
        return x.to_owned();
    }
    crate::autograd::BilinearPlan::new(h, w, h2, w2).apply(x)
}
