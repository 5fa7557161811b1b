//! 2D convolution kernels (im2col + GEMM) shared by the tape.

use crate::error::{invalid, mismatch, Result};
use crate::Scalar;

/// Stride, zero padding and channel grouping of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const fn same3x3() -> Self {
        Self {
            stride: 1,
            padding: 1,
            groups: 1,
        }
    }

    pub const fn pointwise() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }

    pub const fn depthwise3x3(channels: usize) -> Self {
        Self {
            stride: 1,
            padding: 1,
            groups: channels,
        }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self::pointwise()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let (&[n, c, h, wd], &[k, cg, kh, kw]) = (x, w) else {
            return Err(mismatch("conv2d", x, w));
        };
        if spec.stride == 0 || spec.groups == 0 {
            return Err(invalid("conv2d", "stride and groups must be positive"));
        }
        if kh == 0 || kw == 0 {
            return Err(invalid("conv2d", format!("empty kernel in weight shape {w:?}")));
        }
        if c % spec.groups != 0 || k % spec.groups != 0 || cg != c / spec.groups {
            return Err(mismatch("conv2d", x, w));
        }
        if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
            return Err(invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {x:?}"),
            ));
        }
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            k,
            kh,
            kw,
            ho: (h + 2 * spec.padding - kh) / spec.stride + 1,
            wo: (wd + 2 * spec.padding - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
            groups: spec.groups,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.k, self.ho, self.wo]
    }

    fn cg(&self) -> usize {
        self.c / self.groups
    }

    fn kg(&self) -> usize {
        self.k / self.groups
    }

    fn patch(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.cg() == 1 && self.kg() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns whose input column `ox*stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        // ix < w  <=>  ox*stride < w + pad - kx
        let limit = (self.w + self.pad).saturating_sub(kx);
        let hi = limit.div_ceil(self.stride).min(self.wo);
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }
}

/// Unfolds `cg` channels of one image into a `[cg*kh*kw, ho*wo]` matrix.
fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cg() {
        let chan = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.input_row(oy, ky) else {
                        out.fill(T::zero());
                        continue;
                    };
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let src = &chan[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (accumulates) columns back onto the image.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cg() {
        let chan = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let Some(iy) = g.input_row(oy, ky) else {
                        continue;
                    };
                    let dst = &mut chan[iy * g.w..(iy + 1) * g.w];
                    let row = &src[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        dst[start..start + (hi - lo)]
                            .iter_mut()
                            .zip(&row[lo..hi])
                            .for_each(|(d, &v)| *d += v);
                    } else {
                        for ox in lo..hi {
                            dst[ox * g.stride + kx - g.pad] += row[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    if g.is_depthwise() {
        return depthwise_forward(x, w, b, g);
    }
    let (plane_in, plane_out) = (g.h * g.w, g.ho * g.wo);
    let (cg, kg, patch) = (g.cg(), g.kg(), g.patch());
    let mut out = vec![T::zero(); g.n * g.k * plane_out];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane_out]
    };
    for n in 0..g.n {
        for grp in 0..g.groups {
            let img = &x[(n * g.c + grp * cg) * plane_in..(n * g.c + (grp + 1) * cg) * plane_in];
            let cols: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, &mut col);
                &col
            };
            let wg = &w[grp * kg * patch..(grp + 1) * kg * patch];
            let dst = &mut out[(n * g.k + grp * kg) * plane_out..(n * g.k + (grp + 1) * kg) * plane_out];
            T::gemm(kg, patch, plane_out, wg, (patch, 1), cols, (plane_out, 1), T::zero(), dst, plane_out);
        }
        if let Some(b) = b {
            for (k, &bk) in b.iter().enumerate() {
                let dst = &mut out[(n * g.k + k) * plane_out..(n * g.k + k + 1) * plane_out];
                dst.iter_mut().for_each(|v| *v += bk);
            }
        }
    }
    out
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Visits every in-bounds `(ky, kx, oy, iy, lo, hi)` of one plane, where
/// output columns `lo..hi` read input row `iy`.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let (lo, hi) = g.valid_cols(kx);
            for oy in 0..g.ho {
                if let Some(iy) = g.input_row(oy, ky) {
                    f(ky, kx, oy, iy, lo, hi);
                }
            }
        }
    }
}

/// Direct loops for one-filter-per-channel convolution; GEMM on
/// single-row matrices is far slower here.
fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (plane_in, plane_out, taps) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    let mut out = vec![T::zero(); g.n * g.k * plane_out];
    for (i, dst) in out.chunks_exact_mut(plane_out).enumerate() {
        let c = i % g.c;
        let src = &x[i * plane_in..(i + 1) * plane_in];
        let wc = &w[c * taps..(c + 1) * taps];
        if let Some(b) = b {
            dst.fill(b[c]);
        }
        for_each_tap(g, |ky, kx, oy, iy, lo, hi| {
            let wv = wc[ky * g.kw + kx];
            let row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
            let base = iy * g.w + kx;
            if g.stride == 1 {
                let s = &src[base + lo - g.pad..base + hi - g.pad];
                row[lo..hi].iter_mut().zip(s).for_each(|(o, &v)| *o += wv * v);
            } else {
                for ox in lo..hi {
                    row[ox] += wv * src[base + ox * g.stride - g.pad];
                }
            }
        });
    }
    out
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (plane_in, plane_out, taps) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for (i, go) in dout.chunks_exact(plane_out).enumerate() {
        let c = i % g.c;
        let src = &x[i * plane_in..(i + 1) * plane_in];
        let wc = &w[c * taps..(c + 1) * taps];
        let mut dwc = vec![T::zero(); taps];
        let mut dxi = dx.as_deref_mut().map(|d| &mut d[i * plane_in..(i + 1) * plane_in]);
        let want_dw = dw.is_some();
        for_each_tap(g, |ky, kx, oy, iy, lo, hi| {
            let t = ky * g.kw + kx;
            let grow = &go[oy * g.wo..(oy + 1) * g.wo];
            let base = iy * g.w + kx;
            if g.stride == 1 {
                let (gs, span) = (&grow[lo..hi], base + lo - g.pad..base + hi - g.pad);
                if want_dw {
                    dwc[t] += dot(gs, &src[span.clone()]);
                }
                if let Some(d) = dxi.as_deref_mut() {
                    let wv = wc[t];
                    d[span].iter_mut().zip(gs).for_each(|(o, &gv)| *o += wv * gv);
                }
                return;
            }
            if want_dw {
                let mut acc = T::zero();
                for ox in lo..hi {
                    acc += grow[ox] * src[base + ox * g.stride - g.pad];
                }
                dwc[t] += acc;
            }
            if let Some(d) = dxi.as_deref_mut() {
                let wv = wc[t];
                for ox in lo..hi {
                    d[base + ox * g.stride - g.pad] += wv * grow[ox];
                }
            }
        });
        if let Some(dw) = dw.as_deref_mut() {
            for (a, v) in dw[c * taps..(c + 1) * taps].iter_mut().zip(&dwc) {
                *a += *v;
            }
        }
    }
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let (plane_in, plane_out) = (g.h * g.w, g.ho * g.wo);
    let (cg, kg, patch) = (g.cg(), g.kg(), g.patch());
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.k];
        for n in 0..g.n {
            for (k, acc) in db.iter_mut().enumerate() {
                let s = (n * g.k + k) * plane_out;
                *acc += dout[s..s + plane_out].iter().copied().sum::<T>();
            }
        }
        db
    });
    if !need_dx && !need_dw {
        return ConvGrads { dx, dw, db };
    }
    if g.is_depthwise() {
        depthwise_backward(x, w, dout, g, dx.as_deref_mut(), dw.as_deref_mut());
        return ConvGrads { dx, dw, db };
    }
    let mut col = vec![T::zero(); patch * plane_out];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let in_range = (n * g.c + grp * cg) * plane_in..(n * g.c + (grp + 1) * cg) * plane_in;
            let go = &dout[(n * g.k + grp * kg) * plane_out..(n * g.k + (grp + 1) * kg) * plane_out];
            let w_range = grp * kg * patch..(grp + 1) * kg * patch;
            if let Some(dw) = dw.as_mut() {
                let img = &x[in_range.clone()];
                let cols: &[T] = if g.is_pointwise() {
                    img
                } else {
                    im2col(img, g, &mut col);
                    &col
                };
                // dW[kg, patch] += dOut[kg, plane] * cols^T
                T::gemm(kg, plane_out, patch, go, (plane_out, 1), cols, (1, plane_out), T::one(), &mut dw[w_range.clone()], patch);
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &w[w_range];
                if g.is_pointwise() {
                    T::gemm(patch, kg, plane_out, wg, (1, patch), go, (plane_out, 1), T::one(), &mut dx[in_range], plane_out);
                } else {
                    T::gemm(patch, kg, plane_out, wg, (1, patch), go, (plane_out, 1), T::zero(), &mut col, plane_out);
                    col2im(&col, g, &mut dx[in_range]);
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}
