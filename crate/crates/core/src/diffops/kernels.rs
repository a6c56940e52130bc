//! Forward and backward kernels on raw NCHW buffers.
//!
//! These are the numerical core behind [`super::Graph`]; each backward
//! function is the exact adjoint of its forward twin.

use crate::tensor::{MatRef, Real, Tensor};

pub(crate) fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad).saturating_sub(kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], weight: [usize; 4], stride: usize, pad: usize) -> Self {
        let [batch, c_in, h, w] = x;
        let k = weight[2];
        Self {
            batch,
            c_in,
            h,
            w,
            c_out: weight[0],
            k,
            stride,
            pad,
            ho: conv_out_size(h, k, stride, pad),
            wo: conv_out_size(w, k, stride, pad),
        }
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Writes the patches of one image into columns `[col0, col0 + ho*wo)` of a
/// `patch x row_len` matrix.
fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T], col0: usize, row_len: usize) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    for ci in 0..g.c_in {
        let chan = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * row_len + col0..row * row_len + col0 + g.plane()];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ki as isize - p;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], col0: usize, row_len: usize, img: &mut [T]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    for ci in 0..g.c_in {
        let chan = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * row_len + col0..row * row_len + col0 + g.plane()];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn batched_cols<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let row_len = g.batch * g.plane();
    let mut cols = vec![T::zero(); g.patch() * row_len];
    let img_len = g.c_in * g.h * g.w;
    for n in 0..g.batch {
        im2col(g, &x[n * img_len..(n + 1) * img_len], &mut cols, n * g.plane(), row_len);
    }
    cols
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad);
    let cols = batched_cols(&g, x.data());
    let row_len = g.batch * g.plane();
    let mut flat = vec![T::zero(); g.c_out * row_len];
    T::gemm(
        MatRef::row_major(weight.data(), g.c_out, g.patch()),
        MatRef::row_major(&cols, g.patch(), row_len),
        &mut flat,
        T::zero(),
    );
    let mut out = Tensor::zeros([g.batch, g.c_out, g.ho, g.wo]);
    let plane = g.plane();
    let od = out.data_mut();
    for co in 0..g.c_out {
        let b = bias.map_or(T::zero(), |b| b.data()[co]);
        for n in 0..g.batch {
            let src = &flat[co * row_len + n * plane..co * row_len + (n + 1) * plane];
            let dst = &mut od[(n * g.c_out + co) * plane..(n * g.c_out + co + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad);
    let plane = g.plane();
    let row_len = g.batch * plane;
    // Regroup dout from [B, Cout, P] to [Cout, B*P].
    let mut dflat = vec![T::zero(); g.c_out * row_len];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let src = &dout.data()[(n * g.c_out + co) * plane..(n * g.c_out + co + 1) * plane];
            dflat[co * row_len + n * plane..co * row_len + (n + 1) * plane].copy_from_slice(src);
        }
    }
    let db = need.2.then(|| {
        let v: Vec<T> = (0..g.c_out)
            .map(|co| dflat[co * row_len..(co + 1) * row_len].iter().copied().sum())
            .collect();
        Tensor::from_vec([g.c_out, 1, 1, 1], v).unwrap()
    });
    let dw = need.1.then(|| {
        let cols = batched_cols(&g, x.data());
        let mut dw = Tensor::zeros(weight.shape());
        T::gemm(
            MatRef::row_major(&dflat, g.c_out, row_len),
            MatRef::transposed(&cols, g.patch(), row_len),
            dw.data_mut(),
            T::zero(),
        );
        dw
    });
    let dx = need.0.then(|| {
        let mut dcols = vec![T::zero(); g.patch() * row_len];
        T::gemm(
            MatRef::transposed(weight.data(), g.c_out, g.patch()),
            MatRef::row_major(&dflat, g.c_out, row_len),
            &mut dcols,
            T::zero(),
        );
        let mut dx = Tensor::zeros(x.shape());
        let img_len = g.c_in * g.h * g.w;
        let dxd = dx.data_mut();
        for n in 0..g.batch {
            col2im(&g, &dcols, n * plane, row_len, &mut dxd[n * img_len..(n + 1) * img_len]);
        }
        dx
    });
    ConvGrads { dx, dw, db }
}

/// `y = x W^T + b` with `x` viewed as `[batch, in]` and `W` as `[out, in]`.
pub(crate) fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let batch = x.batch();
    let (n_out, n_in) = (w.shape()[0], w.item_len());
    let mut out = Tensor::zeros([batch, n_out, 1, 1]);
    T::gemm(
        MatRef::row_major(x.data(), batch, n_in),
        MatRef::transposed(w.data(), n_out, n_in),
        out.data_mut(),
        T::zero(),
    );
    if let Some(b) = b {
        for row in out.data_mut().chunks_mut(n_out) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
    }
    out
}

pub(crate) fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let batch = x.batch();
    let (n_out, n_in) = (w.shape()[0], w.item_len());
    let dx = need.0.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            MatRef::row_major(dout.data(), batch, n_out),
            MatRef::row_major(w.data(), n_out, n_in),
            dx.data_mut(),
            T::zero(),
        );
        dx
    });
    let dw = need.1.then(|| {
        let mut dw = Tensor::zeros(w.shape());
        T::gemm(
            MatRef::transposed(dout.data(), batch, n_out),
            MatRef::row_major(x.data(), batch, n_in),
            dw.data_mut(),
            T::zero(),
        );
        dw
    });
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); n_out];
        for row in dout.data().chunks(n_out) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        Tensor::from_vec([n_out, 1, 1, 1], db).unwrap()
    });
    ConvGrads { dx, dw, db }
}

/// Per-channel statistics from a training-mode batch-norm forward pass.
pub(crate) struct BnForward<T> {
    pub out: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) const BN_EPS: f64 = 1e-5;

fn channel_iter<T: Real>(shape: [usize; 4], c: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let [n, cs, h, w] = shape;
    let plane = h * w;
    (0..n).map(move |b| (b * cs + c) * plane..(b * cs + c + 1) * plane)
}

/// Normalizes with the given statistics, or with batch statistics when
/// `stats` is `None`.
pub(crate) fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
) -> BnForward<T> {
    let shape = x.shape();
    let channels = shape[1];
    let count = T::from_usize(shape[0] * shape[2] * shape[3]).unwrap();
    let eps = T::lit(BN_EPS);
    let mut out = Tensor::zeros(shape);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(channels);
    let mut means = Vec::with_capacity(channels);
    let mut vars = Vec::with_capacity(channels);
    let xd = x.data();
    for c in 0..channels {
        let (mean, var) = match stats {
            Some((m, v)) => (m[c], v[c]),
            None => {
                let mut sum = T::zero();
                for r in channel_iter::<T>(shape, c) {
                    sum += xd[r].iter().copied().sum::<T>();
                }
                let mean = sum / count;
                let mut sq = T::zero();
                for r in channel_iter::<T>(shape, c) {
                    sq += xd[r].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                (mean, sq / count)
            }
        };
        let is = T::one() / (var + eps).sqrt();
        for r in channel_iter::<T>(shape, c) {
            for i in r {
                let h = (xd[i] - mean) * is;
                xhat[i] = h;
                out.data_mut()[i] = gamma[c] * h + beta[c];
            }
        }
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    BnForward {
        out,
        xhat,
        inv_std,
        mean: means,
        var: vars,
    }
}

pub(crate) fn batchnorm_backward<T: Real>(
    shape: [usize; 4],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    dout: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let channels = shape[1];
    let count = T::from_usize(shape[0] * shape[2] * shape[3]).unwrap();
    let mut dx = vec![T::zero(); dout.len()];
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for c in 0..channels {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for r in channel_iter::<T>(shape, c) {
            for i in r {
                sg += dout[i];
                sgx += dout[i] * xhat[i];
            }
        }
        dbeta[c] = sg;
        dgamma[c] = sgx;
        let scale = gamma[c] * inv_std[c];
        for r in channel_iter::<T>(shape, c) {
            for i in r {
                dx[i] = if batch_stats {
                    scale * (dout[i] - sg / count - xhat[i] * sgx / count)
                } else {
                    scale * dout[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Source position and weights for corner-aligned 2x linear upsampling.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    let m = 2 * n;
    (0..m)
        .map(|o| {
            if n == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (n - 1) as f64 / (m - 1) as f64;
            let i0 = (pos.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2x_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut out = Tensor::zeros([b, c, 2 * h, 2 * w]);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..b * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut od[p * 4 * h * w..(p + 1) * 4 * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * 2 * w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(shape: [usize; 4], dout: &[T]) -> Vec<T> {
    let [b, c, h, w] = shape;
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut dx = vec![T::zero(); b * c * h * w];
    for p in 0..b * c {
        let g = &dout[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let gv = g[oy * 2 * w + ox];
                dst[y0 * w + x0] += gv * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += gv * (T::one() - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (T::one() - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    dx
}

/// Continuous source position of a normalized coordinate under the
/// corner-aligned convention: -1 is the center of index 0, +1 the center of
/// index `n - 1`.
#[inline]
pub(crate) fn unnormalize<T: Real>(coord: T, n: usize) -> T {
    (coord + T::one()) * T::lit((n as f64 - 1.0) / 2.0)
}

/// Integer tap and fractional weight of a pixel coordinate. Coordinates
/// within a few ulps of a pixel center land exactly on it, so the identity
/// grid reproduces its input bit for bit.
#[inline]
fn split_coord<T: Real>(p: T) -> (isize, T) {
    let r = p.round();
    let tol = T::epsilon() * T::lit(4.0) * p.abs().max(T::one());
    let (base, frac) = if (p - r).abs() <= tol { (r, T::zero()) } else { (p.floor(), p - p.floor()) };
    (base.to_isize().unwrap_or(isize::MIN / 2), frac)
}

#[inline]
fn fetch<T: Real>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

pub(crate) fn bilinear_forward<T: Real>(input: &Tensor<T>, grid: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = input.shape();
    let [_, ho, wo, _] = grid.shape();
    let mut out = Tensor::zeros([b, c, ho, wo]);
    let (id, gd) = (input.data(), grid.data());
    let od = out.data_mut();
    for n in 0..b {
        for p in 0..ho * wo {
            let gx = gd[(n * ho * wo + p) * 2];
            let gy = gd[(n * ho * wo + p) * 2 + 1];
            let px = unnormalize(gx, w);
            let py = unnormalize(gy, h);
            let (x0, fx) = split_coord(px);
            let (y0, fy) = split_coord(py);
            for ch in 0..c {
                let plane = &id[(n * c + ch) * h * w..(n * c + ch + 1) * h * w];
                let v00 = fetch(plane, h, w, y0, x0);
                let v01 = fetch(plane, h, w, y0, x0 + 1);
                let v10 = fetch(plane, h, w, y0 + 1, x0);
                let v11 = fetch(plane, h, w, y0 + 1, x0 + 1);
                let top = v00 * (T::one() - fx) + v01 * fx;
                let bot = v10 * (T::one() - fx) + v11 * fx;
                od[(n * c + ch) * ho * wo + p] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Real>(
    input: &Tensor<T>,
    grid: &Tensor<T>,
    dout: &[T],
    need_input: bool,
    need_grid: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [b, c, h, w] = input.shape();
    let [_, ho, wo, _] = grid.shape();
    let mut din = need_input.then(|| vec![T::zero(); input.len()]);
    let mut dgrid = need_grid.then(|| vec![T::zero(); grid.len()]);
    let (id, gd) = (input.data(), grid.data());
    let sx = T::lit((w as f64 - 1.0) / 2.0);
    let sy = T::lit((h as f64 - 1.0) / 2.0);
    for n in 0..b {
        for p in 0..ho * wo {
            let gi = (n * ho * wo + p) * 2;
            let px = unnormalize(gd[gi], w);
            let py = unnormalize(gd[gi + 1], h);
            let (x0, fx) = split_coord(px);
            let (y0, fy) = split_coord(py);
            let (mut gpx, mut gpy) = (T::zero(), T::zero());
            for ch in 0..c {
                let base = (n * c + ch) * h * w;
                let g = dout[(n * c + ch) * ho * wo + p];
                if g == T::zero() {
                    continue;
                }
                if let Some(din) = din.as_mut() {
                    let taps = [
                        (y0, x0, (T::one() - fy) * (T::one() - fx)),
                        (y0, x0 + 1, (T::one() - fy) * fx),
                        (y0 + 1, x0, fy * (T::one() - fx)),
                        (y0 + 1, x0 + 1, fy * fx),
                    ];
                    for (yy, xx, wt) in taps {
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            din[base + yy as usize * w + xx as usize] += g * wt;
                        }
                    }
                }
                if dgrid.is_some() {
                    let plane = &id[base..base + h * w];
                    let v00 = fetch(plane, h, w, y0, x0);
                    let v01 = fetch(plane, h, w, y0, x0 + 1);
                    let v10 = fetch(plane, h, w, y0 + 1, x0);
                    let v11 = fetch(plane, h, w, y0 + 1, x0 + 1);
                    gpx += g * ((v01 - v00) * (T::one() - fy) + (v11 - v10) * fy);
                    gpy += g * ((v10 - v00) * (T::one() - fx) + (v11 - v01) * fx);
                }
            }
            if let Some(dg) = dgrid.as_mut() {
                dg[gi] += gpx * sx;
                dg[gi + 1] += gpy * sy;
            }
        }
    }
    (din, dgrid)
}

pub(crate) fn avgpool2x_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let xd = x.data();
    Tensor::from_fn([b, c, ho, wo], |[n, ch, y, xx]| {
        let base = (n * c + ch) * h * w;
        let (y2, x2) = (2 * y, 2 * xx);
        (xd[base + y2 * w + x2] + xd[base + y2 * w + x2 + 1] + xd[base + (y2 + 1) * w + x2] + xd[base + (y2 + 1) * w + x2 + 1])
            * quarter
    })
}

pub(crate) fn avgpool2x_backward<T: Real>(shape: [usize; 4], dout: &[T]) -> Vec<T> {
    let [b, c, h, w] = shape;
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); b * c * h * w];
    for p in 0..b * c {
        for y in 0..ho {
            for x in 0..wo {
                let g = dout[p * ho * wo + y * wo + x] * quarter;
                let base = p * h * w;
                dx[base + 2 * y * w + 2 * x] = g;
                dx[base + 2 * y * w + 2 * x + 1] = g;
                dx[base + (2 * y + 1) * w + 2 * x] = g;
                dx[base + (2 * y + 1) * w + 2 * x + 1] = g;
            }
        }
    }
    dx
}
