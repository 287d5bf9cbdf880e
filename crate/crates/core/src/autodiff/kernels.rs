//! Raw forward/adjoint kernels over row-major `[B, C, H, W]` buffers.
//!
//! Convolutions go through im2col + SGEMM, except depthwise convolutions
//! (one filter per channel), which use direct loops.

use super::real::Real;
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Output extent of a sliding window; `None` if the window does not fit.
pub fn window_out(input: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    if stride == 0 || input + 2 * pad < span {
        return None;
    }
    Some((input + 2 * pad - span) / stride + 1)
}

/// Shapes of a convolution, resolved and validated.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub p: ConvParams,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], p: ConvParams) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::dim(format!("conv2d expects 4-D input and weight, got {x:?} and {w:?}")));
        }
        let (b, c, h, wd) = (x[0], x[1], x[2], x[3]);
        let (o, cg, kh, kw) = (w[0], w[1], w[2], w[3]);
        if kh != kw {
            return Err(Error::dim(format!("square kernels only, got {kh}x{kw}")));
        }
        if p.groups == 0 || c % p.groups != 0 || o % p.groups != 0 {
            return Err(Error::dim(format!("groups {} do not divide channels {c}->{o}", p.groups)));
        }
        if c / p.groups != cg {
            return Err(Error::dim(format!(
                "input has {c} channels but weight expects {} ({} groups of {cg})",
                cg * p.groups,
                p.groups
            )));
        }
        let ho = window_out(h, kh, p.stride, p.padding, p.dilation);
        let wo = window_out(wd, kw, p.stride, p.padding, p.dilation);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok(Self {
                batch: b,
                in_c: c,
                h,
                w: wd,
                out_c: o,
                k: kh,
                ho,
                wo,
                p,
            }),
            _ => Err(Error::dim(format!("kernel {kh} does not fit input {h}x{wd} with padding {}", p.padding))),
        }
    }

    fn cg(&self) -> usize {
        self.in_c / self.p.groups
    }

    fn og(&self) -> usize {
        self.out_c / self.p.groups
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.p.stride == 1 && self.p.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.p.groups == self.in_c && self.in_c == self.out_c && self.p.groups > 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_c, self.ho, self.wo]
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_c, self.h, self.w]
    }
}

/// Row-major `c = a · b + beta · c` with optional transposition of either
/// operand. `a` is `m × k` after transposition, `b` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, a_t, b, b_t, beta, c);
    } else {
        blocked_gemm(m, k, n, a, a_t, b, b_t, beta, c);
    }
}

#[allow(clippy::too_many_arguments)]
fn blocked_gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool, beta: T, c: &mut [T]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the extents described by the strides above.
    unsafe {
        T::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize);
    }
}

/// Below this many multiply-adds, packing dominates the blocked GEMM and
/// direct loops are faster.
const SMALL_GEMM: usize = 1 << 16;

#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool, beta: T, c: &mut [T]) {
    let c = &mut c[..m * n];
    if beta == T::zero() {
        c.fill(T::zero());
    } else if beta != T::one() {
        c.iter_mut().for_each(|v| *v *= beta);
    }
    let a_at = |i: usize, p: usize| if a_t { a[p * m + i] } else { a[i * k + p] };
    if !b_t {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a_at(i, p);
                for (v, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *v += av * bv;
                }
            }
        }
    } else if !a_t {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc += a[p * m + i] * b[j * k + p];
                }
                c[i * n + j] += acc;
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorises.
#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail = xc.remainder().iter().zip(yc.remainder()).fold(T::zero(), |s, (&a, &b)| s + a * b);
    for (xs, ys) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Output positions `[lo, hi)` whose tap at offset `off` (kernel index
/// times dilation) lands inside `[0, extent)`.
#[inline]
fn out_range(n_out: usize, off: usize, s: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(s) } else { 0 };
    let hi = if extent + pad > off { ((extent - 1 + pad - off) / s + 1).min(n_out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], c: usize, g: &ConvGeom, cols: &mut [T]) {
    let (h, w, k, ho, wo) = (g.h, g.w, g.k, g.ho, g.wo);
    let (s, d, pad) = (g.p.stride, g.p.dilation, g.p.padding);
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = out_range(ho, ky * d, s, pad, h);
            for kx in 0..k {
                let (ox0, ox1) = out_range(wo, kx * d, s, pad, w);
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst[..oy0 * wo].fill(T::zero());
                dst[oy1 * wo..].fill(T::zero());
                for oy in oy0..oy1 {
                    let iy = oy * s + ky * d - pad;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    drow[..ox0].fill(T::zero());
                    drow[ox1..].fill(T::zero());
                    if ox0 == ox1 {
                        continue;
                    }
                    let ix0 = ox0 * s + kx * d - pad;
                    let srow = &src[iy * w..(iy + 1) * w];
                    if s == 1 {
                        drow[ox0..ox1].copy_from_slice(&srow[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for (v, &x) in drow[ox0..ox1].iter_mut().zip(srow[ix0..].iter().step_by(s)) {
                            *v = x;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, g: &ConvGeom, x: &mut [T]) {
    let (h, w, k, ho, wo) = (g.h, g.w, g.k, g.ho, g.wo);
    let (s, d, pad) = (g.p.stride, g.p.dilation, g.p.padding);
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = out_range(ho, ky * d, s, pad, h);
            for kx in 0..k {
                let (ox0, ox1) = out_range(wo, kx * d, s, pad, w);
                if ox0 == ox1 {
                    continue;
                }
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky * d - pad;
                    let ix0 = ox0 * s + kx * d - pad;
                    let drow = &mut dst[iy * w..(iy + 1) * w];
                    let srow = &src[oy * wo + ox0..oy * wo + ox1];
                    if s == 1 {
                        for (v, &g) in drow[ix0..ix0 + srow.len()].iter_mut().zip(srow) {
                            *v += g;
                        }
                    } else {
                        for (v, &g) in drow[ix0..].iter_mut().step_by(s).zip(srow) {
                            *v += g;
                        }
                    }
                }
            }
        }
    }
}

/// Valid kernel-tap range `[lo, hi)` for output coordinate `o`.
#[inline]
fn tap_range(o: usize, k: usize, s: usize, d: usize, pad: usize, extent: usize) -> (usize, usize) {
    let base = (o * s) as isize - pad as isize;
    let mut lo = 0usize;
    while lo < k && base + ((lo * d) as isize) < 0 {
        lo += 1;
    }
    let mut hi = k;
    while hi > lo && base + ((hi - 1) * d) as isize >= extent as isize {
        hi -= 1;
    }
    (lo, hi)
}

pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_c * g.ho * g.wo];
    let (cg, og) = (g.cg(), g.og());
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let kk = g.k * g.k;
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
        return out;
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); cg * kk * out_plane] };
    for b in 0..g.batch {
        for grp in 0..g.p.groups {
            let xg = &x[(b * g.in_c + grp * cg) * in_plane..][..cg * in_plane];
            let wg = &w[grp * og * cg * kk..][..og * cg * kk];
            let og_out = &mut out[(b * g.out_c + grp * og) * out_plane..][..og * out_plane];
            if g.is_pointwise() {
                gemm(og, cg, out_plane, wg, false, xg, false, T::zero(), og_out);
            } else {
                im2col(xg, cg, g, &mut cols);
                gemm(og, cg * kk, out_plane, wg, false, &cols, false, T::zero(), og_out);
            }
        }
    }
    out
}

pub fn conv2d_backward_input<T: Real>(gy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut gx = vec![T::zero(); g.batch * g.in_c * g.h * g.w];
    let (cg, og) = (g.cg(), g.og());
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let kk = g.k * g.k;
    if g.is_depthwise() {
        depthwise_backward_input(gy, w, g, &mut gx);
        return gx;
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); cg * kk * out_plane] };
    for b in 0..g.batch {
        for grp in 0..g.p.groups {
            let gyg = &gy[(b * g.out_c + grp * og) * out_plane..][..og * out_plane];
            let wg = &w[grp * og * cg * kk..][..og * cg * kk];
            let gxg = &mut gx[(b * g.in_c + grp * cg) * in_plane..][..cg * in_plane];
            if g.is_pointwise() {
                gemm(cg, og, out_plane, wg, true, gyg, false, T::zero(), gxg);
            } else {
                gemm(cg * kk, og, out_plane, wg, true, gyg, false, T::zero(), &mut cols);
                col2im(&cols, cg, g, gxg);
            }
        }
    }
    gx
}

pub fn conv2d_backward_weight<T: Real>(gy: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let (cg, og) = (g.cg(), g.og());
    let kk = g.k * g.k;
    let mut gw = vec![T::zero(); g.out_c * cg * kk];
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    if g.is_depthwise() {
        depthwise_backward_weight(gy, x, g, &mut gw);
        return gw;
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); cg * kk * out_plane] };
    for b in 0..g.batch {
        for grp in 0..g.p.groups {
            let gyg = &gy[(b * g.out_c + grp * og) * out_plane..][..og * out_plane];
            let xg = &x[(b * g.in_c + grp * cg) * in_plane..][..cg * in_plane];
            let gwg = &mut gw[grp * og * cg * kk..][..og * cg * kk];
            if g.is_pointwise() {
                gemm(og, out_plane, cg, gyg, false, xg, true, T::one(), gwg);
            } else {
                im2col(xg, cg, g, &mut cols);
                gemm(og, out_plane, cg * kk, gyg, false, &cols, true, T::one(), gwg);
            }
        }
    }
    gw
}

/// Visits every valid `(output row slice, input row slice, tap)` triple of
/// a depthwise plane: `f(out_offset, in_offset, len, tap)` where the output
/// run is contiguous and the input run has stride `s`.
#[inline]
fn depthwise_taps(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (h, wd, k, ho, wo) = (g.h, g.w, g.k, g.ho, g.wo);
    let (s, d, pad) = (g.p.stride, g.p.dilation, g.p.padding);
    for ky in 0..k {
        let (oy0, oy1) = out_range(ho, ky * d, s, pad, h);
        for kx in 0..k {
            let (ox0, ox1) = out_range(wo, kx * d, s, pad, wd);
            if ox0 == ox1 {
                continue;
            }
            for oy in oy0..oy1 {
                let iy = oy * s + ky * d - pad;
                f(oy * wo + ox0, iy * wd + ox0 * s + kx * d - pad, ox1 - ox0, ky * k + kx);
            }
        }
    }
}

/// Stride-1 depthwise layout: the input plane zero-padded to `hp × wp` and
/// the output addressed with the padded row stride `wp`, so each kernel tap
/// is one contiguous run of `span` elements starting at its offset.
struct PaddedPlane {
    wp: usize,
    hp: usize,
    span: usize,
    offsets: Vec<usize>,
}

impl PaddedPlane {
    fn new(g: &ConvGeom) -> Self {
        let (pad, d) = (g.p.padding, g.p.dilation);
        let (wp, hp) = (g.w + 2 * pad, g.h + 2 * pad);
        let offsets = (0..g.k).flat_map(|ky| (0..g.k).map(move |kx| ky * d * wp + kx * d)).collect();
        Self {
            wp,
            hp,
            span: (g.ho - 1) * wp + g.wo,
            offsets,
        }
    }

    /// Copies an `h × w` plane into the interior of a zero-bordered buffer.
    fn pad<T: Real>(&self, g: &ConvGeom, src: &[T], dst: &mut [T]) {
        let pad = g.p.padding;
        for y in 0..g.h {
            dst[(y + pad) * self.wp + pad..][..g.w].copy_from_slice(&src[y * g.w..(y + 1) * g.w]);
        }
    }

    /// Lays an `ho × wo` plane out with row stride `wp`; gap columns stay as they are.
    fn spread<T: Real>(&self, g: &ConvGeom, src: &[T], dst: &mut [T]) {
        for oy in 0..g.ho {
            dst[oy * self.wp..][..g.wo].copy_from_slice(&src[oy * g.wo..(oy + 1) * g.wo]);
        }
    }
}

fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (v, &u) in y.iter_mut().zip(x) {
        *v += a * u;
    }
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    if g.p.stride != 1 {
        return depthwise_forward_strided(x, w, g, out);
    }
    let (hw, howo, kk) = (g.h * g.w, g.ho * g.wo, g.k * g.k);
    let pp = PaddedPlane::new(g);
    let mut xp = vec![T::zero(); pp.hp * pp.wp];
    let mut acc = vec![T::zero(); pp.span];
    for plane in 0..g.batch * g.in_c {
        let ker = &w[(plane % g.in_c) * kk..][..kk];
        pp.pad(g, &x[plane * hw..][..hw], &mut xp);
        acc.fill(T::zero());
        for (&kv, &off) in ker.iter().zip(&pp.offsets) {
            axpy(&mut acc, kv, &xp[off..off + pp.span]);
        }
        let dst = &mut out[plane * howo..][..howo];
        for oy in 0..g.ho {
            dst[oy * g.wo..(oy + 1) * g.wo].copy_from_slice(&acc[oy * pp.wp..][..g.wo]);
        }
    }
}

fn depthwise_backward_input<T: Real>(gy: &[T], w: &[T], g: &ConvGeom, gx: &mut [T]) {
    if g.p.stride != 1 {
        return depthwise_backward_input_strided(gy, w, g, gx);
    }
    let (hw, howo, kk, pad) = (g.h * g.w, g.ho * g.wo, g.k * g.k, g.p.padding);
    let pp = PaddedPlane::new(g);
    let mut gfull = vec![T::zero(); pp.span];
    let mut gxp = vec![T::zero(); pp.hp * pp.wp];
    for plane in 0..g.batch * g.in_c {
        let ker = &w[(plane % g.in_c) * kk..][..kk];
        pp.spread(g, &gy[plane * howo..][..howo], &mut gfull);
        gxp.fill(T::zero());
        for (&kv, &off) in ker.iter().zip(&pp.offsets) {
            axpy(&mut gxp[off..off + pp.span], kv, &gfull);
        }
        let dst = &mut gx[plane * hw..][..hw];
        for y in 0..g.h {
            add_row(&mut dst[y * g.w..(y + 1) * g.w], &gxp[(y + pad) * pp.wp + pad..][..g.w]);
        }
    }
}

fn add_row<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

fn depthwise_backward_weight<T: Real>(gy: &[T], x: &[T], g: &ConvGeom, gw: &mut [T]) {
    if g.p.stride != 1 {
        return depthwise_backward_weight_strided(gy, x, g, gw);
    }
    let (hw, howo, kk) = (g.h * g.w, g.ho * g.wo, g.k * g.k);
    let pp = PaddedPlane::new(g);
    let mut xp = vec![T::zero(); pp.hp * pp.wp];
    let mut gfull = vec![T::zero(); pp.span];
    for plane in 0..g.batch * g.in_c {
        let ker = &mut gw[(plane % g.in_c) * kk..][..kk];
        pp.pad(g, &x[plane * hw..][..hw], &mut xp);
        pp.spread(g, &gy[plane * howo..][..howo], &mut gfull);
        for (kv, &off) in ker.iter_mut().zip(&pp.offsets) {
            *kv += dot(&gfull, &xp[off..off + pp.span]);
        }
    }
}

fn depthwise_forward_strided<T: Real>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let (hw, howo, kk, s) = (g.h * g.w, g.ho * g.wo, g.k * g.k, g.p.stride);
    for b in 0..g.batch {
        for c in 0..g.in_c {
            let src = &x[(b * g.in_c + c) * hw..][..hw];
            let ker = &w[c * kk..][..kk];
            let dst = &mut out[(b * g.in_c + c) * howo..][..howo];
            depthwise_taps(g, |o, i, n, t| {
                let kv = ker[t];
                let dst = &mut dst[o..o + n];
                if s == 1 {
                    for (v, &x) in dst.iter_mut().zip(&src[i..i + n]) {
                        *v += kv * x;
                    }
                } else {
                    for (v, &x) in dst.iter_mut().zip(src[i..].iter().step_by(s)) {
                        *v += kv * x;
                    }
                }
            });
        }
    }
}

fn depthwise_backward_input_strided<T: Real>(gy: &[T], w: &[T], g: &ConvGeom, gx: &mut [T]) {
    let (hw, howo, kk, s) = (g.h * g.w, g.ho * g.wo, g.k * g.k, g.p.stride);
    for b in 0..g.batch {
        for c in 0..g.in_c {
            let src = &gy[(b * g.in_c + c) * howo..][..howo];
            let ker = &w[c * kk..][..kk];
            let dst = &mut gx[(b * g.in_c + c) * hw..][..hw];
            depthwise_taps(g, |o, i, n, t| {
                let kv = ker[t];
                let src = &src[o..o + n];
                if s == 1 {
                    for (v, &gv) in dst[i..i + n].iter_mut().zip(src) {
                        *v += kv * gv;
                    }
                } else {
                    for (v, &gv) in dst[i..].iter_mut().step_by(s).zip(src) {
                        *v += kv * gv;
                    }
                }
            });
        }
    }
}

fn depthwise_backward_weight_strided<T: Real>(gy: &[T], x: &[T], g: &ConvGeom, gw: &mut [T]) {
    let (hw, howo, kk, s) = (g.h * g.w, g.ho * g.wo, g.k * g.k, g.p.stride);
    for b in 0..g.batch {
        for c in 0..g.in_c {
            let src = &x[(b * g.in_c + c) * hw..][..hw];
            let gys = &gy[(b * g.in_c + c) * howo..][..howo];
            let ker = &mut gw[c * kk..][..kk];
            depthwise_taps(g, |o, i, n, t| {
                let gys = &gys[o..o + n];
                let acc = if s == 1 {
                    gys.iter().zip(&src[i..i + n]).fold(T::zero(), |a, (&gv, &x)| a + gv * x)
                } else {
                    gys.iter().zip(src[i..].iter().step_by(s)).fold(T::zero(), |a, (&gv, &x)| a + gv * x)
                };
                ker[t] += acc;
            });
        }
    }
}

/// Pooling window geometry (square window, symmetric zero padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub fn pool_out_shape(x: &[usize], p: &PoolParams) -> Result<Vec<usize>> {
    if x.len() != 4 {
        return Err(Error::dim(format!("pooling expects 4-D input, got {x:?}")));
    }
    if p.padding * 2 > p.kernel {
        return Err(Error::dim("pool padding larger than half the window"));
    }
    let ho = window_out(x[2], p.kernel, p.stride, p.padding, 1);
    let wo = window_out(x[3], p.kernel, p.stride, p.padding, 1);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(vec![x[0], x[1], ho, wo]),
        _ => Err(Error::dim(format!("pool window {} does not fit {x:?}", p.kernel))),
    }
}

/// Max pooling; returns the output and the flat input index of each maximum.
pub fn max_pool_forward<T: Real>(x: &[T], xs: &[usize], os: &[usize], p: &PoolParams) -> (Vec<T>, Vec<u32>) {
    if p.stride == 1 {
        return max_pool_separable(x, xs, os, p);
    }
    max_pool_windows(x, xs, os, p)
}

fn max_pool_windows<T: Real>(x: &[T], xs: &[usize], os: &[usize], p: &PoolParams) -> (Vec<T>, Vec<u32>) {
    let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
    let (ho, wo) = (os[2], os[3]);
    let mut out = vec![T::zero(); bc * ho * wo];
    let mut arg = vec![0u32; bc * ho * wo];
    for plane in 0..bc {
        let base = plane * h * w;
        for oy in 0..ho {
            let (ky0, ky1) = tap_range(oy, p.kernel, p.stride, 1, p.padding, h);
            for ox in 0..wo {
                let (kx0, kx1) = tap_range(ox, p.kernel, p.stride, 1, p.padding, w);
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for ky in ky0..ky1 {
                    let iy = oy * p.stride + ky - p.padding;
                    for kx in kx0..kx1 {
                        let i = base + iy * w + ox * p.stride + kx - p.padding;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

/// Average pooling that divides by the number of in-bounds taps.
pub fn avg_pool_forward<T: Real>(x: &[T], xs: &[usize], os: &[usize], p: &PoolParams) -> Vec<T> {
    if p.stride == 1 {
        return avg_pool_separable(x, xs, os, p);
    }
    avg_pool_windows(x, xs, os, p)
}

fn avg_pool_windows<T: Real>(x: &[T], xs: &[usize], os: &[usize], p: &PoolParams) -> Vec<T> {
    let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
    let (ho, wo) = (os[2], os[3]);
    let mut out = vec![T::zero(); bc * ho * wo];
    for plane in 0..bc {
        let base = plane * h * w;
        for oy in 0..ho {
            let (ky0, ky1) = tap_range(oy, p.kernel, p.stride, 1, p.padding, h);
            for ox in 0..wo {
                let (kx0, kx1) = tap_range(ox, p.kernel, p.stride, 1, p.padding, w);
                let mut acc = T::zero();
                for ky in ky0..ky1 {
                    let iy = oy * p.stride + ky - p.padding;
                    for kx in kx0..kx1 {
                        acc += x[base + iy * w + ox * p.stride + kx - p.padding];
                    }
                }
                let count = T::of(((ky1 - ky0) * (kx1 - kx0)) as f64);
                out[(plane * ho + oy) * wo + ox] = acc / count;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Real>(gy: &[T], xs: &[usize], os: &[usize], p: &PoolParams) -> Vec<T> {
    if p.stride == 1 {
        return avg_pool_backward_separable(gy, xs, os, p);
    }
    avg_pool_backward_windows(gy, xs, os, p)
}

fn avg_pool_backward_windows<T: Real>(gy: &[T], xs: &[usize], os: &[usize], p: &PoolParams) -> Vec<T> {
    let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
    let (ho, wo) = (os[2], os[3]);
    let mut gx = vec![T::zero(); bc * h * w];
    for plane in 0..bc {
        let base = plane * h * w;
        for oy in 0..ho {
            let (ky0, ky1) = tap_range(oy, p.kernel, p.stride, 1, p.padding, h);
            for ox in 0..wo {
                let (kx0, kx1) = tap_range(ox, p.kernel, p.stride, 1, p.padding, w);
                let count = T::of(((ky1 - ky0) * (kx1 - kx0)) as f64);
                let gv = gy[(plane * ho + oy) * wo + ox] / count;
                for ky in ky0..ky1 {
                    let iy = oy * p.stride + ky - p.padding;
                    for kx in kx0..kx1 {
                        gx[base + iy * w + ox * p.stride + kx - p.padding] += gv;
                    }
                }
            }
        }
    }
    gx
}

/// In-bounds tap ranges of every output coordinate along one stride-1 axis.
fn axis_taps(n_out: usize, p: &PoolParams, extent: usize) -> Vec<(usize, usize)> {
    (0..n_out).map(|o| tap_range(o, p.kernel, 1, 1, p.padding, extent)).collect()
}

// Stride-1 pools are separable: a horizontal pass along rows, then a
// vertical pass that combines whole rows.

fn max_pool_separable<T: Real>(x: &[T], xs: &[usize], os: &[usize], p: &PoolParams) -> (Vec<T>, Vec<u32>) {
    let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
    let (ho, wo) = (os[2], os[3]);
    let (rows, cols) = (axis_taps(ho, p, h), axis_taps(wo, p, w));
    let mut out = vec![T::zero(); bc * ho * wo];
    let mut arg = vec![0u32; bc * ho * wo];
    let mut hm = vec![T::zero(); h * wo];
    let mut ha = vec![0u32; h * wo];
    for plane in 0..bc {
        let base = plane * h * w;
        for y in 0..h {
            let src = &x[base + y * w..][..w];
            for (ox, &(k0, k1)) in cols.iter().enumerate() {
                let (mut best, mut bi) = (T::neg_infinity(), 0usize);
                for kx in k0..k1 {
                    let ix = ox + kx - p.padding;
                    if src[ix] > best {
                        best = src[ix];
                        bi = base + y * w + ix;
                    }
                }
                hm[y * wo + ox] = best;
                ha[y * wo + ox] = bi as u32;
            }
        }
        for (oy, &(k0, k1)) in rows.iter().enumerate() {
            let o = (plane * ho + oy) * wo;
            let (dst, da) = (&mut out[o..o + wo], &mut arg[o..o + wo]);
            dst.fill(T::neg_infinity());
            for ky in k0..k1 {
                let iy = oy + ky - p.padding;
                let (src, sa) = (&hm[iy * wo..][..wo], &ha[iy * wo..][..wo]);
                for i in 0..wo {
                    if src[i] > dst[i] {
                        dst[i] = src[i];
                        da[i] = sa[i];
                    }
                }
            }
        }
    }
    (out, arg)
}

fn avg_pool_separable<T: Real>(x: &[T], xs: &[usize], os: &[usize], p: &PoolParams) -> Vec<T> {
    let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
    let (ho, wo) = (os[2], os[3]);
    let (rows, cols) = (axis_taps(ho, p, h), axis_taps(wo, p, w));
    let inv_cols: Vec<T> = cols.iter().map(|&(a, b)| T::one() / T::of((b - a) as f64)).collect();
    let mut out = vec![T::zero(); bc * ho * wo];
    let mut hs = vec![T::zero(); h * wo];
    for plane in 0..bc {
        let base = plane * h * w;
        for y in 0..h {
            let src = &x[base + y * w..][..w];
            for (ox, &(k0, k1)) in cols.iter().enumerate() {
                let acc = src[ox + k0 - p.padding..ox + k1 - p.padding].iter().fold(T::zero(), |a, &v| a + v);
                hs[y * wo + ox] = acc;
            }
        }
        for (oy, &(k0, k1)) in rows.iter().enumerate() {
            let dst = &mut out[(plane * ho + oy) * wo..][..wo];
            for ky in k0..k1 {
                add_row(dst, &hs[(oy + ky - p.padding) * wo..][..wo]);
            }
            let inv_rows = T::one() / T::of((k1 - k0) as f64);
            for (v, &ic) in dst.iter_mut().zip(&inv_cols) {
                *v *= inv_rows * ic;
            }
        }
    }
    out
}

fn avg_pool_backward_separable<T: Real>(gy: &[T], xs: &[usize], os: &[usize], p: &PoolParams) -> Vec<T> {
    let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
    let (ho, wo) = (os[2], os[3]);
    let (rows, cols) = (axis_taps(ho, p, h), axis_taps(wo, p, w));
    let inv_cols: Vec<T> = cols.iter().map(|&(a, b)| T::one() / T::of((b - a) as f64)).collect();
    let mut gx = vec![T::zero(); bc * h * w];
    let mut gh = vec![T::zero(); h * wo];
    let mut scaled = vec![T::zero(); wo];
    for plane in 0..bc {
        gh.fill(T::zero());
        for (oy, &(k0, k1)) in rows.iter().enumerate() {
            let inv_rows = T::one() / T::of((k1 - k0) as f64);
            for ((s, &g), &ic) in scaled.iter_mut().zip(&gy[(plane * ho + oy) * wo..][..wo]).zip(&inv_cols) {
                *s = g * inv_rows * ic;
            }
            for ky in k0..k1 {
                add_row(&mut gh[(oy + ky - p.padding) * wo..][..wo], &scaled);
            }
        }
        let base = plane * h * w;
        for y in 0..h {
            let dst = &mut gx[base + y * w..][..w];
            for (ox, &(k0, k1)) in cols.iter().enumerate() {
                let g = gh[y * wo + ox];
                for v in &mut dst[ox + k0 - p.padding..ox + k1 - p.padding] {
                    *v += g;
                }
            }
        }
    }
    gx
}
