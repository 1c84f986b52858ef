//! Forward and backward kernels for the image ops recorded on the tape.
//!
//! All kernels are single-threaded and iterate in a fixed order, so results
//! are bit-reproducible for identical inputs.

use crate::real::{gemm, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1, "conv stride must be >= 1");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
        );
        Self {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
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

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `w` is `[cout, cin, kh, kw]`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv input has {cin} channels, weight expects {wcin}");
    let g = ConvGeom::new(cin, h, wd, kh, kw, stride, pad);
    let (rows, ncols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); n * cout * ncols];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ncols] };
    let in_len = cin * h * wd;
    for i in 0..n {
        let xs = &x.data()[i * in_len..(i + 1) * in_len];
        let dst = &mut out[i * cout * ncols..(i + 1) * cout * ncols];
        if let Some(b) = b {
            for (co, chunk) in dst.chunks_mut(ncols).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            gemm(cout, rows, ncols, w.data(), false, xs, false, dst, beta);
        } else {
            im2col(xs, &g, &mut cols);
            gemm(cout, rows, ncols, w.data(), false, &cols, false, dst, beta);
        }
    }
    Tensor::new(vec![n, cout, g.ho, g.wo], out)
}

pub struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Option<Tensor<T>>,
    pub b: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, kh, kw) = w.dims4();
    let g = ConvGeom::new(cin, h, wd, kh, kw, stride, pad);
    let (rows, ncols) = (g.rows(), g.cols());
    let in_len = cin * h * wd;
    let mut gx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.numel()]);
    let mut cols = vec![T::zero(); rows * ncols];
    let mut gcols = if need_x { vec![T::zero(); rows * ncols] } else { Vec::new() };
    for i in 0..n {
        let go = &gout.data()[i * cout * ncols..(i + 1) * cout * ncols];
        if let Some(gw) = gw.as_mut() {
            let xs = &x.data()[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                gemm(cout, ncols, rows, go, false, xs, true, gw, T::one());
            } else {
                im2col(xs, &g, &mut cols);
                gemm(cout, ncols, rows, go, false, &cols, true, gw, T::one());
            }
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                gemm(rows, cout, ncols, w.data(), true, go, false, dst, T::one());
            } else {
                gemm(rows, cout, ncols, w.data(), true, go, false, &mut gcols, T::zero());
                col2im_add(&gcols, &g, dst);
            }
        }
    }
    let gb = need_b.then(|| {
        let mut acc = vec![T::zero(); cout];
        for i in 0..n {
            for (co, a) in acc.iter_mut().enumerate() {
                let start = (i * cout + co) * ncols;
                *a += gout.data()[start..start + ncols].iter().copied().sum::<T>();
            }
        }
        Tensor::new(vec![cout], acc)
    });
    ConvGrads {
        x: gx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        w: gw.map(|d| Tensor::new(w.shape().to_vec(), d)),
        b: gb,
    }
}

/// Integer-factor nearest-neighbour upsampling.
pub fn upsample_nearest_forward<T: Real>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / f) * w + xx / f];
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn upsample_nearest_backward<T: Real>(g: &Tensor<T>, f: usize) -> Tensor<T> {
    let (n, c, ho, wo) = g.dims4();
    let (h, w) = (ho / f, wo / f);
    let mut out = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                dst[(y / f) * w + xx / f] += src[y * wo + xx];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Source taps for half-pixel-centred bilinear 2x upsampling along one axis.
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..len * 2)
        .map(|d| {
            let src = ((d as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear2x_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::lit(ly), T::lit(1.0 - ly));
            for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::lit(lx), T::lit(1.0 - lx));
                dst[y * wo + xx] = hy * (hx * src[y0 * w + x0] + lx * src[y0 * w + x1])
                    + ly * (hx * src[y1 * w + x0] + lx * src[y1 * w + x1]);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn upsample_bilinear2x_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (n, c, ho, wo) = g.dims4();
    let (h, w) = (ho / 2, wo / 2);
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let mut out = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::lit(ly), T::lit(1.0 - ly));
            for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::lit(lx), T::lit(1.0 - lx));
                let gv = src[y * wo + xx];
                dst[y0 * w + x0] += hy * hx * gv;
                dst[y0 * w + x1] += hy * lx * gv;
                dst[y1 * w + x0] += ly * hx * gv;
                dst[y1 * w + x1] += ly * lx * gv;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

pub fn avg_pool2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                out[p * ho * wo + y * wo + xx] = s * quarter;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn avg_pool2_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (n, c, ho, wo) = g.dims4();
    let (h, w) = (ho * 2, wo * 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                out[p * h * w + y * w + xx] = g.data()[p * ho * wo + (y / 2) * wo + xx / 2] * quarter;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// 2x2 max pooling; also returns the flat input index of each maximum
/// (first maximum in row-major window order wins).
pub fn max_pool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let cands = [
                    base + 2 * y * w + 2 * xx,
                    base + 2 * y * w + 2 * xx + 1,
                    base + (2 * y + 1) * w + 2 * xx,
                    base + (2 * y + 1) * w + 2 * xx + 1,
                ];
                let mut best = cands[0];
                for &ci in &cands[1..] {
                    if x.data()[ci] > x.data()[best] {
                        best = ci;
                    }
                }
                out.push(x.data()[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::new(vec![n, c, ho, wo], out), arg)
}

/// Parameter-free standardisation. With `per_sample` the statistics are taken
/// over `(h, w)` for every `(n, c)` (instance norm); otherwise over
/// `(n, h, w)` for every channel (batch norm). The variance is floored at
/// `eps`.
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn norm_groups(shape: (usize, usize, usize, usize), per_sample: bool) -> (usize, usize) {
    let (n, c, h, w) = shape;
    if per_sample {
        (n * c, h * w)
    } else {
        (c, n * h * w)
    }
}

/// Index of element `j` of group `g`.
#[inline]
fn norm_index(shape: (usize, usize, usize, usize), per_sample: bool, g: usize, j: usize) -> usize {
    let (_, c, h, w) = shape;
    let hw = h * w;
    if per_sample {
        g * hw + j
    } else {
        let (n, s) = (j / hw, j % hw);
        (n * c + g) * hw + s
    }
}

pub fn normalize_forward<T: Real>(x: &Tensor<T>, per_sample: bool, eps: T) -> (Tensor<T>, NormStats<T>) {
    let shape = x.dims4();
    let (groups, m) = norm_groups(shape, per_sample);
    let mf = T::lit(m as f64);
    let mut out = vec![T::zero(); x.numel()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(groups),
        var: Vec::with_capacity(groups),
        inv_std: Vec::with_capacity(groups),
    };
    let xd = x.data();
    for g in 0..groups {
        let mut sum = T::zero();
        for j in 0..m {
            sum += xd[norm_index(shape, per_sample, g, j)];
        }
        let mean = sum / mf;
        let mut ss = T::zero();
        for j in 0..m {
            let d = xd[norm_index(shape, per_sample, g, j)] - mean;
            ss += d * d;
        }
        let var = ss / mf;
        let inv = T::one() / var.max(eps).sqrt();
        for j in 0..m {
            let k = norm_index(shape, per_sample, g, j);
            out[k] = (xd[k] - mean) * inv;
        }
        stats.mean.push(mean);
        stats.var.push(var);
        stats.inv_std.push(inv);
    }
    (Tensor::new(x.shape().to_vec(), out), stats)
}

pub fn normalize_backward<T: Real>(
    xhat: &Tensor<T>,
    g: &Tensor<T>,
    per_sample: bool,
    stats: &NormStats<T>,
    eps: T,
) -> Tensor<T> {
    let shape = xhat.dims4();
    let (groups, m) = norm_groups(shape, per_sample);
    let mf = T::lit(m as f64);
    let (xd, gd) = (xhat.data(), g.data());
    let mut out = vec![T::zero(); xhat.numel()];
    for grp in 0..groups {
        let inv = stats.inv_std[grp];
        let floored = stats.var[grp] < eps;
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for j in 0..m {
            let k = norm_index(shape, per_sample, grp, j);
            sg += gd[k];
            sgx += gd[k] * xd[k];
        }
        let (mg, mgx) = (sg / mf, sgx / mf);
        for j in 0..m {
            let k = norm_index(shape, per_sample, grp, j);
            out[k] = if floored {
                inv * (gd[k] - mg)
            } else {
                inv * (gd[k] - mg - xd[k] * mgx)
            };
        }
    }
    Tensor::new(xhat.shape().to_vec(), out)
}
