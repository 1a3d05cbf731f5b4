//! Forward and vector-Jacobian kernels on raw slices.
//!
//! Every function here is shape-checked by its caller (the tape); kernels
//! only assert internal consistency.

use crate::error::{Error, Result};

/// Row-major `c = alpha * op(a) * op(b) + beta * c` for an `m×k` by `k×n`
/// product. `ta`/`tb` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover every index the strides address, as asserted above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0
            || !self.cin.is_multiple_of(self.groups)
            || !self.cout.is_multiple_of(self.groups)
        {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "groups {} must divide C_in {} and C_out {}",
                    self.groups, self.cin, self.cout
                ),
            ));
        }
        if self.stride == 0 || self.k == 0 {
            return Err(Error::shape("conv2d", "kernel and stride must be positive"));
        }
        if self.h + 2 * self.pad < self.k || self.w + 2 * self.pad < self.k {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {} larger than padded input H {} W {}",
                    self.k, self.h, self.w
                ),
            ));
        }
        Ok(())
    }

    fn depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin && self.groups > 1
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0 && self.groups == 1
    }

    pub fn weight_len(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.k * self.k
    }
}

/// Unfold one group of one image into a `[cg*k*k, ho*wo]` column matrix.
fn im2col(x: &[f32], g: &ConvGeom, cg: usize, col: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for ci in 0..cg {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], g: &ConvGeom, cg: usize, dx: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for ci in 0..cg {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Range of output positions `o` for which `o*s + kk - p` lands in `[0, len)`.
fn valid_range(len: usize, out: usize, s: usize, kk: usize, p: usize) -> (usize, usize) {
    // o*s + kk >= p  and  o*s + kk - p < len
    let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
    let hi = if len + p > kk {
        ((len + p - kk - 1) / s + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn depthwise_forward(x: &[f32], w: &[f32], g: &ConvGeom, y: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let (k, s) = (g.k, g.stride);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let out = &mut y[c * ho * wo..(c + 1) * ho * wo];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(g.h, ho, s, ky, g.pad);
            for kx in 0..k {
                let wv = w[(c * k + ky) * k + kx];
                let (ox0, ox1) = valid_range(g.w, wo, s, kx, g.pad);
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        let off = ox0 + kx - g.pad;
                        for (d, v) in dst[ox0..ox1].iter_mut().zip(&src[off..]) {
                            *d += wv * v;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] += wv * src[ox * s + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    x: &[f32],
    w: &[f32],
    gy: &[f32],
    g: &ConvGeom,
    dx: &mut [f32],
    dw: &mut [f32],
) {
    let (ho, wo) = g.out_hw();
    let (k, s) = (g.k, g.stride);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dplane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        let go = &gy[c * ho * wo..(c + 1) * ho * wo];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(g.h, ho, s, ky, g.pad);
            for kx in 0..k {
                let wi = (c * k + ky) * k + kx;
                let wv = w[wi];
                let (ox0, ox1) = valid_range(g.w, wo, s, kx, g.pad);
                let mut acc = 0.0f32;
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dsrc = &mut dplane[iy * g.w..(iy + 1) * g.w];
                    let grow = &go[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        let off = ox0 + kx - g.pad;
                        for ((gv, v), d) in grow[ox0..ox1]
                            .iter()
                            .zip(&src[off..])
                            .zip(dsrc[off..].iter_mut())
                        {
                            acc += gv * v;
                            *d += gv * wv;
                        }
                    } else {
                        for (&gv, ox) in grow[ox0..ox1].iter().zip(ox0..) {
                            let ix = ox * s + kx - g.pad;
                            acc += gv * src[ix];
                            dsrc[ix] += gv * wv;
                        }
                    }
                }
                dw[wi] += acc;
            }
        }
    }
}

pub fn conv2d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let (in_sz, out_sz) = (g.cin * g.h * g.w, g.cout * ho * wo);
    let mut y = vec![0.0f32; g.n * out_sz];
    let cg = g.cin / g.groups;
    let og = g.cout / g.groups;
    let kk = cg * g.k * g.k;
    let mut col = if g.pointwise() || g.depthwise() {
        Vec::new()
    } else {
        vec![0.0f32; kk * ho * wo]
    };
    for n in 0..g.n {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let yn = &mut y[n * out_sz..(n + 1) * out_sz];
        if g.depthwise() {
            depthwise_forward(xn, w, g, yn);
        } else {
            for gi in 0..g.groups {
                let xg = &xn[gi * cg * g.h * g.w..];
                let wg = &w[gi * og * kk..(gi + 1) * og * kk];
                let yg = &mut yn[gi * og * ho * wo..(gi + 1) * og * ho * wo];
                if g.pointwise() {
                    gemm(og, kk, ho * wo, wg, false, xg, false, 0.0, yg);
                } else {
                    im2col(xg, g, cg, &mut col);
                    gemm(og, kk, ho * wo, wg, false, &col, false, 0.0, yg);
                }
            }
        }
        if let Some(b) = bias {
            for (c, bv) in b.iter().enumerate() {
                yn[c * ho * wo..(c + 1) * ho * wo]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`; `db` is summed over batch and space.
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    gy: &[f32],
    g: &ConvGeom,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (ho, wo) = g.out_hw();
    let (in_sz, out_sz) = (g.cin * g.h * g.w, g.cout * ho * wo);
    let mut dx = vec![0.0f32; g.n * in_sz];
    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; g.cout];
    let cg = g.cin / g.groups;
    let og = g.cout / g.groups;
    let kk = cg * g.k * g.k;
    let needs_col = !(g.pointwise() || g.depthwise());
    let mut col = vec![0.0f32; if needs_col { kk * ho * wo } else { 0 }];
    let mut dcol = vec![0.0f32; if needs_col { kk * ho * wo } else { 0 }];
    for n in 0..g.n {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let gn = &gy[n * out_sz..(n + 1) * out_sz];
        let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
        for (c, d) in db.iter_mut().enumerate() {
            *d += gn[c * ho * wo..(c + 1) * ho * wo].iter().sum::<f32>();
        }
        if g.depthwise() {
            depthwise_backward(xn, w, gn, g, dxn, &mut dw);
            continue;
        }
        for gi in 0..g.groups {
            let xg = &xn[gi * cg * g.h * g.w..(gi + 1) * cg * g.h * g.w];
            let wg = &w[gi * og * kk..(gi + 1) * og * kk];
            let gg = &gn[gi * og * ho * wo..(gi + 1) * og * ho * wo];
            let dwg = &mut dw[gi * og * kk..(gi + 1) * og * kk];
            let dxg = &mut dxn[gi * cg * g.h * g.w..(gi + 1) * cg * g.h * g.w];
            if g.pointwise() {
                gemm(og, ho * wo, kk, gg, false, xg, true, 1.0, dwg);
                gemm(kk, og, ho * wo, wg, true, gg, false, 1.0, dxg);
            } else {
                im2col(xg, g, cg, &mut col);
                gemm(og, ho * wo, kk, gg, false, &col, true, 1.0, dwg);
                gemm(kk, og, ho * wo, wg, true, gg, false, 0.0, &mut dcol);
                col2im(&dcol, g, cg, dxg);
            }
        }
    }
    (dx, dw, db)
}

/// Bilinear read of one `h×w` plane at real `(y, x)`; zero outside.
/// Returns the value and its partial derivatives in `y` and `x`.
#[inline]
pub fn bilinear(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> (f32, f32, f32) {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (iy, ix) = (y0 as isize, x0 as isize);
    let px = |r: isize, c: isize| -> f32 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            plane[r as usize * w + c as usize]
        }
    };
    let v00 = px(iy, ix);
    let v01 = px(iy, ix + 1);
    let v10 = px(iy + 1, ix);
    let v11 = px(iy + 1, ix + 1);
    let val = (1.0 - ly) * ((1.0 - lx) * v00 + lx * v01) + ly * ((1.0 - lx) * v10 + lx * v11);
    let dy = (1.0 - lx) * (v10 - v00) + lx * (v11 - v01);
    let dx = (1.0 - ly) * (v01 - v00) + ly * (v11 - v10);
    (val, dy, dx)
}

/// Adjoint of [`bilinear`] with respect to the plane.
#[inline]
pub fn bilinear_scatter(dplane: &mut [f32], h: usize, w: usize, y: f32, x: f32, g: f32) {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (iy, ix) = (y0 as isize, x0 as isize);
    let mut put = |r: isize, c: isize, wt: f32| {
        if r >= 0 && c >= 0 && r < h as isize && c < w as isize {
            dplane[r as usize * w + c as usize] += g * wt;
        }
    };
    put(iy, ix, (1.0 - ly) * (1.0 - lx));
    put(iy, ix + 1, (1.0 - ly) * lx);
    put(iy + 1, ix, ly * (1.0 - lx));
    put(iy + 1, ix + 1, ly * lx);
}

/// `x: [n,c,h,w]`, `coords: [n,2,ho,wo]` (row then column plane).
pub fn bilinear_sample_forward(
    x: &[f32],
    coords: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<f32> {
    let p = ho * wo;
    let mut out = vec![0.0f32; n * c * p];
    for b in 0..n {
        let cy = &coords[b * 2 * p..b * 2 * p + p];
        let cx = &coords[b * 2 * p + p..(b + 1) * 2 * p];
        for ch in 0..c {
            let plane = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let dst = &mut out[(b * c + ch) * p..(b * c + ch + 1) * p];
            for i in 0..p {
                dst[i] = bilinear(plane, h, w, cy[i], cx[i]).0;
            }
        }
    }
    out
}

pub fn bilinear_sample_backward(
    x: &[f32],
    coords: &[f32],
    gy: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    (ho, wo): (usize, usize),
) -> (Vec<f32>, Vec<f32>) {
    let p = ho * wo;
    let mut dx = vec![0.0f32; x.len()];
    let mut dc = vec![0.0f32; coords.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for i in 0..p {
                let (y, xx) = (coords[b * 2 * p + i], coords[b * 2 * p + p + i]);
                let g = gy[(b * c + ch) * p + i];
                let (_, dy, ddx) = bilinear(&x[base..base + h * w], h, w, y, xx);
                dc[b * 2 * p + i] += g * dy;
                dc[b * 2 * p + p + i] += g * ddx;
                bilinear_scatter(&mut dx[base..base + h * w], h, w, y, xx, g);
            }
        }
    }
    (dx, dc)
}

/// Geometry of a modulated deformable convolution with stride 1 and
/// "same" padding. The offset tensor has `3*k*k` channels: `(dy, dx)`
/// pairs for each kernel point, then one modulation scalar per point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
}

impl DeformGeom {
    pub fn points(&self) -> usize {
        self.k * self.k
    }

    #[inline]
    fn sample_pos(&self, off: &[f32], pt: usize, oy: usize, ox: usize) -> (f32, f32, f32) {
        let p = self.h * self.w;
        let i = oy * self.w + ox;
        let pad = (self.k / 2) as f32;
        let (ky, kx) = ((pt / self.k) as f32, (pt % self.k) as f32);
        let y = oy as f32 - pad + ky + off[2 * pt * p + i];
        let x = ox as f32 - pad + kx + off[(2 * pt + 1) * p + i];
        let m = off[(2 * self.points() + pt) * p + i];
        (y, x, m)
    }
}

/// Returns the output and the unmodulated sampled columns
/// (`[n, cin*k*k, h*w]`), which the backward pass reuses.
pub fn deform_conv_forward(
    x: &[f32],
    off: &[f32],
    w: &[f32],
    g: &DeformGeom,
) -> (Vec<f32>, Vec<f32>) {
    let p = g.h * g.w;
    let kp = g.points();
    let rows = g.cin * kp;
    let mut raw = vec![0.0f32; g.n * rows * p];
    let mut col = vec![0.0f32; rows * p];
    let mut y = vec![0.0f32; g.n * g.cout * p];
    for b in 0..g.n {
        let offb = &off[b * 3 * kp * p..(b + 1) * 3 * kp * p];
        let rawb = &mut raw[b * rows * p..(b + 1) * rows * p];
        for pt in 0..kp {
            for oy in 0..g.h {
                for ox in 0..g.w {
                    let (sy, sx, m) = g.sample_pos(offb, pt, oy, ox);
                    let i = oy * g.w + ox;
                    for c in 0..g.cin {
                        let plane = &x[(b * g.cin + c) * p..(b * g.cin + c + 1) * p];
                        let v = bilinear(plane, g.h, g.w, sy, sx).0;
                        rawb[(c * kp + pt) * p + i] = v;
                        col[(c * kp + pt) * p + i] = v * m;
                    }
                }
            }
        }
        gemm(
            g.cout,
            rows,
            p,
            w,
            false,
            &col,
            false,
            0.0,
            &mut y[b * g.cout * p..(b + 1) * g.cout * p],
        );
    }
    (y, raw)
}

/// Returns `(dx, doffset, dweight)`.
pub fn deform_conv_backward(
    x: &[f32],
    off: &[f32],
    w: &[f32],
    raw: &[f32],
    gy: &[f32],
    g: &DeformGeom,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let p = g.h * g.w;
    let kp = g.points();
    let rows = g.cin * kp;
    let mut dx = vec![0.0f32; x.len()];
    let mut doff = vec![0.0f32; off.len()];
    let mut dw = vec![0.0f32; w.len()];
    let mut col = vec![0.0f32; rows * p];
    let mut dcol = vec![0.0f32; rows * p];
    for b in 0..g.n {
        let offb = &off[b * 3 * kp * p..(b + 1) * 3 * kp * p];
        let rawb = &raw[b * rows * p..(b + 1) * rows * p];
        let gb = &gy[b * g.cout * p..(b + 1) * g.cout * p];
        for pt in 0..kp {
            let mplane = &offb[(2 * kp + pt) * p..(2 * kp + pt + 1) * p];
            for c in 0..g.cin {
                let r = (c * kp + pt) * p;
                for i in 0..p {
                    col[r + i] = rawb[r + i] * mplane[i];
                }
            }
        }
        gemm(g.cout, p, rows, gb, false, &col, true, 1.0, &mut dw);
        gemm(rows, g.cout, p, w, true, gb, false, 0.0, &mut dcol);
        let doffb = &mut doff[b * 3 * kp * p..(b + 1) * 3 * kp * p];
        for pt in 0..kp {
            for oy in 0..g.h {
                for ox in 0..g.w {
                    let (sy, sx, m) = g.sample_pos(offb, pt, oy, ox);
                    let i = oy * g.w + ox;
                    let (mut gdy, mut gdx, mut gm) = (0.0f32, 0.0f32, 0.0f32);
                    for c in 0..g.cin {
                        let r = (c * kp + pt) * p + i;
                        let gc = dcol[r];
                        if gc == 0.0 {
                            continue;
                        }
                        gm += gc * rawb[r];
                        let gs = gc * m;
                        let base = (b * g.cin + c) * p;
                        let (_, vy, vx) = bilinear(&x[base..base + p], g.h, g.w, sy, sx);
                        gdy += gs * vy;
                        gdx += gs * vx;
                        bilinear_scatter(&mut dx[base..base + p], g.h, g.w, sy, sx, gs);
                    }
                    doffb[2 * pt * p + i] += gdy;
                    doffb[(2 * pt + 1) * p + i] += gdx;
                    doffb[(2 * kp + pt) * p + i] += gm;
                }
            }
        }
    }
    (dx, doff, dw)
}

/// Non-overlapping or strided average pooling without padding.
pub fn avg_pool_forward(
    x: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    s: usize,
) -> Vec<f32> {
    let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
    let inv = 1.0 / (k * k) as f32;
    let mut y = vec![0.0f32; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f32;
                for ky in 0..k {
                    let row = &src[(oy * s + ky) * w + ox * s..][..k];
                    acc += row.iter().sum::<f32>();
                }
                dst[oy * wo + ox] = acc * inv;
            }
        }
    }
    y
}

pub fn avg_pool_backward(
    gy: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    s: usize,
) -> Vec<f32> {
    let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
    let inv = 1.0 / (k * k) as f32;
    let mut dx = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        let src = &gy[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = src[oy * wo + ox] * inv;
                for ky in 0..k {
                    dst[(oy * s + ky) * w + ox * s..][..k]
                        .iter_mut()
                        .for_each(|v| *v += g);
                }
            }
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Hardswish,
    Sigmoid,
    HardSigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Hardswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
            Activation::Sigmoid => sigmoid(x),
            Activation::HardSigmoid => (x + 3.0).clamp(0.0, 6.0) / 6.0,
        }
    }

    /// Derivative at `x`, given `y = apply(x)`. One-sided conventions at the
    /// kinks: zero at the lower kink, the interior slope at the upper one.
    #[inline]
    pub fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Hardswish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::HardSigmoid => {
                if x > -3.0 && x < 3.0 {
                    1.0 / 6.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Non-differentiable points of the activation.
    pub fn kinks(self) -> &'static [f32] {
        match self {
            Activation::Relu => &[0.0],
            Activation::Hardswish | Activation::HardSigmoid => &[-3.0, 3.0],
            Activation::Sigmoid => &[],
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean cross-entropy over rows of `logits: [n, k]`; returns the loss and the
/// row-wise softmax.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[usize], k: usize) -> (f32, Vec<f32>) {
    let n = labels.len();
    let mut probs = vec![0.0f32; n * k];
    let mut loss = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
        let lse = max as f64 + sum.ln();
        loss += lse - row[label] as f64;
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = ((v as f64 - lse).exp()) as f32;
        }
    }
    ((loss / n as f64) as f32, probs)
}
