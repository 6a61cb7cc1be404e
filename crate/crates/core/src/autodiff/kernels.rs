//! Slice-level forward and backward kernels for the volumetric primitives.
//!
//! Layouts are channel-major and row-major: activations `[C, D, H, W]`,
//! convolution kernels `[C_out, C_in, k, k, k]`, transposed-convolution
//! kernels `[C_in, C_out, k, k, k]`. Every output element is accumulated in
//! a fixed loop order, so results are bitwise reproducible.

use std::ops::Range;

use super::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vol {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Vol {
    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.c * self.spatial()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c, self.d, self.h, self.w]
    }
}

/// Output positions `o` for which `o * stride + tap - pad` lands inside `[0, n_in)`.
#[inline]
fn valid(n_out: usize, n_in: usize, stride: usize, tap: usize, pad: usize) -> Range<usize> {
    let start = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    if n_in + pad < tap + 1 {
        return 0..0;
    }
    let end = ((n_in - 1 + pad - tap) / stride + 1).min(n_out);
    start.min(end)..end
}

#[inline]
fn src(o: usize, stride: usize, tap: usize, pad: usize) -> usize {
    o * stride + tap - pad
}

pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k || stride == 0 || (padded - k) % stride != 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub fn conv3d_forward<T: Real>(
    x: &[T],
    xv: Vol,
    w: &[T],
    k: usize,
    bias: &[T],
    yv: Vol,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); yv.len()];
    let k3 = k * k * k;
    for (co, out) in y.chunks_mut(yv.spatial()).enumerate() {
        out.fill(bias[co]);
        for ci in 0..xv.c {
            let xin = &x[ci * xv.spatial()..(ci + 1) * xv.spatial()];
            let wk = &w[(co * xv.c + ci) * k3..(co * xv.c + ci + 1) * k3];
            for kz in 0..k {
                let rz = valid(yv.d, xv.d, stride, kz, pad);
                for ky in 0..k {
                    let ry = valid(yv.h, xv.h, stride, ky, pad);
                    for kx in 0..k {
                        let rx = valid(yv.w, xv.w, stride, kx, pad);
                        let wv = wk[(kz * k + ky) * k + kx];
                        for oz in rz.clone() {
                            let iz = src(oz, stride, kz, pad);
                            for oy in ry.clone() {
                                let iy = src(oy, stride, ky, pad);
                                let orow = &mut out[(oz * yv.h + oy) * yv.w..][..yv.w];
                                let irow = &xin[(iz * xv.h + iy) * xv.w..][..xv.w];
                                if stride == 1 {
                                    let off = rx.start + kx - pad;
                                    let n = rx.len();
                                    for (o, &i) in orow[rx.start..rx.end]
                                        .iter_mut()
                                        .zip(&irow[off..off + n])
                                    {
                                        *o = *o + wv * i;
                                    }
                                } else {
                                    for ox in rx.clone() {
                                        orow[ox] = orow[ox] + wv * irow[src(ox, stride, kx, pad)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Real>(
    x: &[T],
    xv: Vol,
    w: &[T],
    k: usize,
    gy: &[T],
    yv: Vol,
    stride: usize,
    pad: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k3 = k * k * k;
    let mut gx = vec![T::zero(); xv.len()];
    for (ci, gin) in gx.chunks_mut(xv.spatial()).enumerate() {
        for co in 0..yv.c {
            let g = &gy[co * yv.spatial()..(co + 1) * yv.spatial()];
            let wk = &w[(co * xv.c + ci) * k3..(co * xv.c + ci + 1) * k3];
            for kz in 0..k {
                let rz = valid(yv.d, xv.d, stride, kz, pad);
                for ky in 0..k {
                    let ry = valid(yv.h, xv.h, stride, ky, pad);
                    for kx in 0..k {
                        let rx = valid(yv.w, xv.w, stride, kx, pad);
                        let wv = wk[(kz * k + ky) * k + kx];
                        for oz in rz.clone() {
                            let iz = src(oz, stride, kz, pad);
                            for oy in ry.clone() {
                                let iy = src(oy, stride, ky, pad);
                                let grow = &g[(oz * yv.h + oy) * yv.w..][..yv.w];
                                let irow = &mut gin[(iz * xv.h + iy) * xv.w..][..xv.w];
                                if stride == 1 {
                                    let off = rx.start + kx - pad;
                                    let n = rx.len();
                                    for (i, &o) in irow[off..off + n]
                                        .iter_mut()
                                        .zip(&grow[rx.start..rx.end])
                                    {
                                        *i = *i + wv * o;
                                    }
                                } else {
                                    for ox in rx.clone() {
                                        let ix = src(ox, stride, kx, pad);
                                        irow[ix] = irow[ix] + wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut gw = vec![T::zero(); yv.c * xv.c * k3];
    for (co, gwc) in gw.chunks_mut(xv.c * k3).enumerate() {
        let g = &gy[co * yv.spatial()..(co + 1) * yv.spatial()];
        for ci in 0..xv.c {
            let xin = &x[ci * xv.spatial()..(ci + 1) * xv.spatial()];
            for kz in 0..k {
                let rz = valid(yv.d, xv.d, stride, kz, pad);
                for ky in 0..k {
                    let ry = valid(yv.h, xv.h, stride, ky, pad);
                    for kx in 0..k {
                        let rx = valid(yv.w, xv.w, stride, kx, pad);
                        let mut acc = T::zero();
                        for oz in rz.clone() {
                            let iz = src(oz, stride, kz, pad);
                            for oy in ry.clone() {
                                let iy = src(oy, stride, ky, pad);
                                let grow = &g[(oz * yv.h + oy) * yv.w..][..yv.w];
                                let irow = &xin[(iz * xv.h + iy) * xv.w..][..xv.w];
                                if stride == 1 {
                                    let off = rx.start + kx - pad;
                                    let n = rx.len();
                                    acc = acc
                                        + grow[rx.start..rx.end]
                                            .iter()
                                            .zip(&irow[off..off + n])
                                            .fold(T::zero(), |a, (&o, &i)| a + o * i);
                                } else {
                                    for ox in rx.clone() {
                                        acc = acc + grow[ox] * irow[src(ox, stride, kx, pad)];
                                    }
                                }
                            }
                        }
                        gwc[ci * k3 + (kz * k + ky) * k + kx] = acc;
                    }
                }
            }
        }
    }

    let gb = gy
        .chunks(yv.spatial())
        .map(|c| c.iter().fold(T::zero(), |a, &v| a + v))
        .collect();
    (gx, gw, gb)
}

pub fn conv_transpose3d_forward<T: Real>(
    x: &[T],
    xv: Vol,
    w: &[T],
    k: usize,
    bias: &[T],
    yv: Vol,
    stride: usize,
) -> Vec<T> {
    let k3 = k * k * k;
    let mut y = vec![T::zero(); yv.len()];
    for (co, out) in y.chunks_mut(yv.spatial()).enumerate() {
        out.fill(bias[co]);
        for ci in 0..xv.c {
            let xin = &x[ci * xv.spatial()..(ci + 1) * xv.spatial()];
            let wk = &w[(ci * yv.c + co) * k3..(ci * yv.c + co + 1) * k3];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wk[(kz * k + ky) * k + kx];
                        for iz in 0..xv.d {
                            let oz = iz * stride + kz;
                            for iy in 0..xv.h {
                                let oy = iy * stride + ky;
                                let irow = &xin[(iz * xv.h + iy) * xv.w..][..xv.w];
                                let orow = &mut out[(oz * yv.h + oy) * yv.w..][..yv.w];
                                for (ix, &v) in irow.iter().enumerate() {
                                    let ox = ix * stride + kx;
                                    orow[ox] = orow[ox] + wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv_transpose3d_backward<T: Real>(
    x: &[T],
    xv: Vol,
    w: &[T],
    k: usize,
    gy: &[T],
    yv: Vol,
    stride: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k3 = k * k * k;
    let mut gx = vec![T::zero(); xv.len()];
    let mut gw = vec![T::zero(); xv.c * yv.c * k3];
    for ci in 0..xv.c {
        let xin = &x[ci * xv.spatial()..(ci + 1) * xv.spatial()];
        let gin = &mut gx[ci * xv.spatial()..(ci + 1) * xv.spatial()];
        for co in 0..yv.c {
            let g = &gy[co * yv.spatial()..(co + 1) * yv.spatial()];
            let base = (ci * yv.c + co) * k3;
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let tap = (kz * k + ky) * k + kx;
                        let wv = w[base + tap];
                        let mut acc = T::zero();
                        for iz in 0..xv.d {
                            let oz = iz * stride + kz;
                            for iy in 0..xv.h {
                                let oy = iy * stride + ky;
                                let row = (iz * xv.h + iy) * xv.w;
                                let grow = &g[(oz * yv.h + oy) * yv.w..][..yv.w];
                                for ix in 0..xv.w {
                                    let go = grow[ix * stride + kx];
                                    gin[row + ix] = gin[row + ix] + wv * go;
                                    acc = acc + xin[row + ix] * go;
                                }
                            }
                        }
                        gw[base + tap] = acc;
                    }
                }
            }
        }
    }
    let gb = gy
        .chunks(yv.spatial())
        .map(|c| c.iter().fold(T::zero(), |a, &v| a + v))
        .collect();
    (gx, gw, gb)
}

/// Max pooling; returns the pooled values and, per output element, the flat
/// input index of the first maximum in scan order.
pub fn maxpool3d_forward<T: Real>(
    x: &[T],
    xv: Vol,
    window: usize,
    stride: usize,
    yv: Vol,
) -> (Vec<T>, Vec<usize>) {
    let mut y = Vec::with_capacity(yv.len());
    let mut arg = Vec::with_capacity(yv.len());
    for c in 0..xv.c {
        let base = c * xv.spatial();
        for oz in 0..yv.d {
            for oy in 0..yv.h {
                for ox in 0..yv.w {
                    let mut best = base + ((oz * stride) * xv.h + oy * stride) * xv.w + ox * stride;
                    for dz in 0..window {
                        for dy in 0..window {
                            let row = base
                                + ((oz * stride + dz) * xv.h + oy * stride + dy) * xv.w
                                + ox * stride;
                            for dx in 0..window {
                                if x[row + dx] > x[best] {
                                    best = row + dx;
                                }
                            }
                        }
                    }
                    y.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (y, arg)
}
