//! Raw forward/backward kernels over flat `f32` buffers.

use super::NnError;

/// `C = A·B + beta·C` with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |r: usize, cc: usize, rs: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs + 1;
    assert!(c.len() >= span(m, n, rsc, csc), "gemm: C too small");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!(a.len() >= span(m, k, rsa, csa), "gemm: A too small");
    assert!(b.len() >= span(k, n, rsb, csb), "gemm: B too small");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Shapes of a cubic-kernel 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub dims: [usize; 3],
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out: [usize; 3],
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self, NnError> {
        if x.len() != 5 || w.len() != 5 {
            return Err(NnError::Shape(format!(
                "conv3d expects 5-d input and weight, got {x:?} and {w:?}"
            )));
        }
        if w[1] != x[1] || w[2] != w[3] || w[3] != w[4] || stride == 0 {
            return Err(NnError::Shape(format!(
                "conv3d weight {w:?} incompatible with input {x:?} (stride {stride})"
            )));
        }
        let k = w[2];
        let mut out = [0usize; 3];
        for a in 0..3 {
            let span = x[2 + a] + 2 * pad;
            if span < k {
                return Err(NnError::Shape(format!(
                    "conv3d kernel {k} larger than padded input {x:?}"
                )));
            }
            out[a] = (span - k) / stride + 1;
        }
        Ok(ConvGeom {
            batch: x[0],
            cin: x[1],
            dims: [x[2], x[3], x[4]],
            cout: w[0],
            k,
            stride,
            pad,
            out,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.out[0], self.out[1], self.out[2]]
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn in_vol(&self) -> usize {
        self.dims.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }
}

/// Valid output range along one axis for kernel tap `t`, stride 1:
/// `ox` such that `0 <= ox + t - pad < n`.
#[inline]
fn tap_range(t: usize, pad: usize, n: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(t).min(out);
    let hi = (n + pad).saturating_sub(t).min(out).max(lo);
    (lo, hi)
}

/// Gathers the receptive fields of output plane `oz` into `col` (`K × plane`).
fn im2col_plane(x: &[f32], g: &ConvGeom, oz: usize, col: &mut [f32]) {
    let [d, h, w] = g.dims;
    let [_, oh, ow] = g.out;
    let p = g.plane();
    let (k, s, pad) = (g.k, g.stride, g.pad);
    for c in 0..g.cin {
        for kz in 0..k {
            let iz = (oz * s + kz) as isize - pad as isize;
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    if iz < 0 || iz >= d as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let base = (c * d + iz as usize) * h;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        let seg = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let src = &x[(base + iy as usize) * w..(base + iy as usize + 1) * w];
                        if s == 1 {
                            let (lo, hi) = tap_range(kx, pad, w, ow);
                            seg.fill(0.0);
                            if hi > lo {
                                seg[lo..hi].copy_from_slice(&src[lo + kx - pad..hi + kx - pad]);
                            }
                        } else {
                            for (ox, v) in seg.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - pad as isize;
                                *v = if ix >= 0 && (ix as usize) < w { src[ix as usize] } else { 0.0 };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into the input gradient (adjoint of `im2col_plane`).
fn col2im_plane(col: &[f32], g: &ConvGeom, oz: usize, dx: &mut [f32]) {
    let [d, h, w] = g.dims;
    let [_, oh, ow] = g.out;
    let p = g.plane();
    let (k, s, pad) = (g.k, g.stride, g.pad);
    for c in 0..g.cin {
        for kz in 0..k {
            let iz = (oz * s + kz) as isize - pad as isize;
            if iz < 0 || iz >= d as isize {
                continue;
            }
            let base = (c * d + iz as usize) * h;
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let src_row = &col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let seg = &src_row[oy * ow..(oy + 1) * ow];
                        let dst = &mut dx[(base + iy as usize) * w..(base + iy as usize + 1) * w];
                        if s == 1 {
                            let (lo, hi) = tap_range(kx, pad, w, ow);
                            if hi == lo {
                                continue;
                            }
                            for (o, v) in dst[lo + kx - pad..hi + kx - pad].iter_mut().zip(&seg[lo..hi]) {
                                *o += v;
                            }
                        } else {
                            for (ox, v) in seg.iter().enumerate() {
                                let ix = (ox * s + kx) as isize - pad as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    dst[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let (ov, iv) = (g.out_vol(), g.in_vol());
    let mut out = vec![0.0f32; g.batch * g.cout * ov];
    let kr = g.col_rows();
    if g.is_pointwise() {
        for b in 0..g.batch {
            gemm(
                g.cout,
                g.cin,
                iv,
                w,
                (g.cin, 1),
                &x[b * g.cin * iv..],
                (iv, 1),
                0.0,
                &mut out[b * g.cout * ov..],
                (ov, 1),
            );
        }
    } else {
        let p = g.plane();
        let mut col = vec![0.0f32; kr * p];
        for b in 0..g.batch {
            let xb = &x[b * g.cin * iv..(b + 1) * g.cin * iv];
            for oz in 0..g.out[0] {
                im2col_plane(xb, g, oz, &mut col);
                gemm(
                    g.cout,
                    kr,
                    p,
                    w,
                    (kr, 1),
                    &col,
                    (p, 1),
                    0.0,
                    &mut out[b * g.cout * ov + oz * p..],
                    (ov, 1),
                );
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (o, &bv) in bias.iter().enumerate() {
                let s = (b * g.cout + o) * ov;
                out[s..s + ov].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a convolution. Each output is computed only when requested.
pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(crate) fn conv3d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads {
    let (ov, iv) = (g.out_vol(), g.in_vol());
    let kr = g.col_rows();
    let mut dx = want.0.then(|| vec![0.0f32; x.len()]);
    let mut dw = want.1.then(|| vec![0.0f32; w.len()]);
    let db = want.2.then(|| {
        let mut db = vec![0.0f32; g.cout];
        for b in 0..g.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let s = (b * g.cout + o) * ov;
                *acc += dy[s..s + ov].iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        db
    });
    if g.is_pointwise() {
        for b in 0..g.batch {
            let dyb = &dy[b * g.cout * ov..];
            if let Some(dw) = dw.as_mut() {
                gemm(g.cout, iv, g.cin, dyb, (ov, 1), &x[b * g.cin * iv..], (1, iv), 1.0, dw, (g.cin, 1));
            }
            if let Some(dx) = dx.as_mut() {
                gemm(g.cin, g.cout, iv, w, (1, g.cin), dyb, (ov, 1), 0.0, &mut dx[b * g.cin * iv..], (iv, 1));
            }
        }
    } else if want.0 || want.1 {
        let p = g.plane();
        let mut col = vec![0.0f32; kr * p];
        for b in 0..g.batch {
            let xb = &x[b * g.cin * iv..(b + 1) * g.cin * iv];
            for oz in 0..g.out[0] {
                let dyp = &dy[b * g.cout * ov + oz * p..];
                if let Some(dw) = dw.as_mut() {
                    im2col_plane(xb, g, oz, &mut col);
                    gemm(g.cout, p, kr, dyp, (ov, 1), &col, (1, p), 1.0, dw, (kr, 1));
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(kr, g.cout, p, w, (1, kr), dyp, (ov, 1), 0.0, &mut col, (p, 1));
                    col2im_plane(&col, g, oz, &mut dx[b * g.cin * iv..(b + 1) * g.cin * iv]);
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-(sample, group) statistics used by group norm.
pub(crate) struct GroupStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub(crate) fn group_norm_forward(
    x: &[f32],
    shape: &[usize],
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, GroupStats) {
    let (b, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let cpg = c / groups;
    let n = cpg * spatial;
    let mut out = vec![0.0f32; x.len()];
    let mut mean = vec![0.0f32; b * groups];
    let mut rstd = vec![0.0f32; b * groups];
    for bi in 0..b {
        for gi in 0..groups {
            let start = (bi * c + gi * cpg) * spatial;
            let seg = &x[start..start + n];
            let m = seg.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = seg.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps as f64).sqrt();
            mean[bi * groups + gi] = m as f32;
            rstd[bi * groups + gi] = r as f32;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let (ga, be) = (gamma[ch], beta[ch]);
                let s = start + ci * spatial;
                for (o, &v) in out[s..s + spatial].iter_mut().zip(&x[s..s + spatial]) {
                    *o = ((v as f64 - m) * r) as f32 * ga + be;
                }
            }
        }
    }
    (out, GroupStats { mean, rstd })
}

pub(crate) fn group_norm_backward(
    x: &[f32],
    shape: &[usize],
    groups: usize,
    gamma: &[f32],
    stats: &GroupStats,
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (b, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let cpg = c / groups;
    let n = (cpg * spatial) as f64;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for bi in 0..b {
        for gi in 0..groups {
            let m = stats.mean[bi * groups + gi] as f64;
            let r = stats.rstd[bi * groups + gi] as f64;
            let mut sum_d = 0.0f64;
            let mut sum_dx = 0.0f64;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let s = (bi * c + ch) * spatial;
                for i in s..s + spatial {
                    let xh = (x[i] as f64 - m) * r;
                    let d = dy[i] as f64;
                    dgamma[ch] += d * xh;
                    dbeta[ch] += d;
                    let dxh = d * gamma[ch] as f64;
                    sum_d += dxh;
                    sum_dx += dxh * xh;
                }
            }
            let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let s = (bi * c + ch) * spatial;
                for i in s..s + spatial {
                    let xh = (x[i] as f64 - m) * r;
                    let dxh = dy[i] as f64 * gamma[ch] as f64;
                    dx[i] = (r * (dxh - mean_d - xh * mean_dx)) as f32;
                }
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(|v| v as f32).collect(),
        dbeta.into_iter().map(|v| v as f32).collect(),
    )
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[j] = x[src(j)]` where output axis `a` is input axis `perm[a]`.
pub(crate) fn permute(x: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0f32; x.len()];
    if x.is_empty() {
        return (out, out_shape);
    }
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut o = 0;
    loop {
        let mut base = 0;
        for a in 0..nd - 1 {
            base += idx[a] * src_strides[a];
        }
        if inner_stride == 1 {
            out[o..o + inner].copy_from_slice(&x[base..base + inner]);
        } else {
            for i in 0..inner {
                out[o + i] = x[base + i * inner_stride];
            }
        }
        o += inner;
        // Advance the multi-index over all but the last axis.
        let mut a = nd - 1;
        loop {
            if a == 0 {
                return (out, out_shape);
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn softmax_rows(x: &[f32], row: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (o, r) in out.chunks_mut(row).zip(x.chunks(row)) {
        let max = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        for (ov, &v) in o.iter_mut().zip(r) {
            let e = ((v - max) as f64).exp();
            *ov = e as f32;
            z += e;
        }
        let inv = (1.0 / z) as f32;
        o.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub(crate) fn softmax_rows_backward(y: &[f32], dy: &[f32], row: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    for ((d, yr), gr) in dx.chunks_mut(row).zip(y.chunks(row)).zip(dy.chunks(row)) {
        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
        for ((dv, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
            *dv = yv * (gv - dot as f32);
        }
    }
    dx
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn upsample_nearest2(x: &[f32], shape: &[usize]) -> Vec<f32> {
    let (bc, d, h, w) = (shape[0] * shape[1], shape[2], shape[3], shape[4]);
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0f32; bc * d2 * h2 * w2];
    for n in 0..bc {
        for z in 0..d2 {
            for y in 0..h2 {
                let src = &x[((n * d + z / 2) * h + y / 2) * w..][..w];
                let dst = &mut out[((n * d2 + z) * h2 + y) * w2..][..w2];
                for (i, v) in dst.iter_mut().enumerate() {
                    *v = src[i / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest2_backward(dy: &[f32], in_shape: &[usize]) -> Vec<f32> {
    let (bc, d, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut dx = vec![0.0f32; bc * d * h * w];
    for n in 0..bc {
        for z in 0..d2 {
            for y in 0..h2 {
                let src = &dy[((n * d2 + z) * h2 + y) * w2..][..w2];
                let dst = &mut dx[((n * d + z / 2) * h + y / 2) * w..][..w];
                for (i, v) in src.iter().enumerate() {
                    dst[i / 2] += v;
                }
            }
        }
    }
    dx
}
