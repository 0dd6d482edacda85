//! Raw forward/backward kernels for the heavier primitives. All loops
//! accumulate in `f64` and run in a fixed order, so results are bitwise
//! reproducible.

use super::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Output indices `lo..hi` along one axis whose input tap `out*stride + tap - pad`
    /// stays inside `0..extent`.
    #[inline]
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent-1
        let top = extent as isize - 1 - off;
        if top < 0 {
            return (0, 0);
        }
        let hi = (top / s + 1).min(out_extent as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T]) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = Vec::with_capacity(g.n * g.o * plane_out);
    let mut acc = vec![0f64; plane_out];
    for n in 0..g.n {
        for o in 0..g.o {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..g.c {
                let src = &input[(n * g.c + c) * plane_in..][..plane_in];
                for ky in 0..g.k {
                    let (y0, y1) = g.valid_range(ky, g.h, g.ho);
                    for kx in 0..g.k {
                        let wv = kernel[((o * g.c + c) * g.k + ky) * g.k + kx].into_f64();
                        let (x0, x1) = g.valid_range(kx, g.w, g.wo);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &src[iy * g.w..][..g.w];
                            let dst = &mut acc[oy * g.wo..][..g.wo];
                            if g.stride == 1 {
                                let base = kx as isize - g.pad as isize;
                                for ox in x0..x1 {
                                    dst[ox] += wv * row[(ox as isize + base) as usize].into_f64();
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = ox * g.stride + kx - g.pad;
                                    dst[ox] += wv * row[ix].into_f64();
                                }
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&v| T::of_f64(v)));
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel)`; either may be skipped.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gin = want_input.then(|| vec![0f64; g.n * g.c * plane_in]);
    let mut gk = want_kernel.then(|| vec![0f64; kernel.len()]);
    for n in 0..g.n {
        for o in 0..g.o {
            let go = &grad_out[(n * g.o + o) * plane_out..][..plane_out];
            for c in 0..g.c {
                let src = &input[(n * g.c + c) * plane_in..][..plane_in];
                for ky in 0..g.k {
                    let (y0, y1) = g.valid_range(ky, g.h, g.ho);
                    for kx in 0..g.k {
                        let (x0, x1) = g.valid_range(kx, g.w, g.wo);
                        let kidx = ((o * g.c + c) * g.k + ky) * g.k + kx;
                        let wv = kernel[kidx].into_f64();
                        let mut kacc = 0f64;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &go[oy * g.wo..][..g.wo];
                            let row = &src[iy * g.w..][..g.w];
                            if let Some(gin) = gin.as_mut() {
                                let dst = &mut gin[(n * g.c + c) * plane_in + iy * g.w..][..g.w];
                                for ox in x0..x1 {
                                    let ix = ox * g.stride + kx - g.pad;
                                    dst[ix] += wv * grow[ox].into_f64();
                                }
                            }
                            if gk.is_some() {
                                for ox in x0..x1 {
                                    let ix = ox * g.stride + kx - g.pad;
                                    kacc += grow[ox].into_f64() * row[ix].into_f64();
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[kidx] += kacc;
                        }
                    }
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::of_f64).collect::<Vec<T>>();
    (gin.map(cast), gk.map(cast))
}

/// Bilinear corner indices and weights for one continuous coordinate,
/// clamped to the border. `inside` is false when clamping was active, in
/// which case the coordinate derivative is zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
    pub inside: bool,
}

#[inline]
pub(crate) fn tap(coord: f64, extent: usize) -> Tap {
    let max = (extent - 1) as f64;
    let inside = (0.0..=max).contains(&coord);
    let c = coord.clamp(0.0, max);
    if extent == 1 {
        return Tap {
            i0: 0,
            i1: 0,
            frac: 0.0,
            inside: false,
        };
    }
    let mut i0 = c.floor() as usize;
    if i0 >= extent - 1 {
        i0 = extent - 2;
    }
    Tap {
        i0,
        i1: i0 + 1,
        frac: c - i0 as f64,
        inside,
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SampleGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn bilinear_forward<T: Scalar>(g: &SampleGeom, input: &[T], coords: &[T]) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.c * plane_out];
    for n in 0..g.n {
        let cx = &coords[(n * 2) * plane_out..][..plane_out];
        let cy = &coords[(n * 2 + 1) * plane_out..][..plane_out];
        for p in 0..plane_out {
            let tx = tap(cx[p].into_f64(), g.w);
            let ty = tap(cy[p].into_f64(), g.h);
            let (fx, fy) = (tx.frac, ty.frac);
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w01 = fx * (1.0 - fy);
            let w10 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            let (r0, r1) = (ty.i0 * g.w, ty.i1 * g.w);
            for c in 0..g.c {
                let src = &input[(n * g.c + c) * plane_in..][..plane_in];
                let v = w00 * src[r0 + tx.i0].into_f64()
                    + w01 * src[r0 + tx.i1].into_f64()
                    + w10 * src[r1 + tx.i0].into_f64()
                    + w11 * src[r1 + tx.i1].into_f64();
                out[(n * g.c + c) * plane_out + p] = T::of_f64(v);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Scalar>(
    g: &SampleGeom,
    input: &[T],
    coords: &[T],
    grad_out: &[T],
    want_input: bool,
    want_coords: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gin = want_input.then(|| vec![0f64; input.len()]);
    let mut gc = want_coords.then(|| vec![0f64; coords.len()]);
    for n in 0..g.n {
        let cx = &coords[(n * 2) * plane_out..][..plane_out];
        let cy = &coords[(n * 2 + 1) * plane_out..][..plane_out];
        for p in 0..plane_out {
            let tx = tap(cx[p].into_f64(), g.w);
            let ty = tap(cy[p].into_f64(), g.h);
            let (fx, fy) = (tx.frac, ty.frac);
            let (r0, r1) = (ty.i0 * g.w, ty.i1 * g.w);
            let mut dx = 0f64;
            let mut dy = 0f64;
            for c in 0..g.c {
                let go = grad_out[(n * g.c + c) * plane_out + p].into_f64();
                let base = (n * g.c + c) * plane_in;
                if let Some(gin) = gin.as_mut() {
                    gin[base + r0 + tx.i0] += go * (1.0 - fx) * (1.0 - fy);
                    gin[base + r0 + tx.i1] += go * fx * (1.0 - fy);
                    gin[base + r1 + tx.i0] += go * (1.0 - fx) * fy;
                    gin[base + r1 + tx.i1] += go * fx * fy;
                }
                if gc.is_some() {
                    let src = &input[base..][..plane_in];
                    let v00 = src[r0 + tx.i0].into_f64();
                    let v01 = src[r0 + tx.i1].into_f64();
                    let v10 = src[r1 + tx.i0].into_f64();
                    let v11 = src[r1 + tx.i1].into_f64();
                    dx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                    dy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            if let Some(gc) = gc.as_mut() {
                if tx.inside {
                    gc[(n * 2) * plane_out + p] += dx;
                }
                if ty.inside {
                    gc[(n * 2 + 1) * plane_out + p] += dy;
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::of_f64).collect::<Vec<T>>();
    (gin.map(cast), gc.map(cast))
}
