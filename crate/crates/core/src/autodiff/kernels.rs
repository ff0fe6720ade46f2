//! Dense loops behind the differentiable ops. All layouts are row-major;
//! feature maps are `[channels, height, width]`.

use super::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Output index range whose input index `o * stride + tap - pad` is in `[0, n)`.
    fn valid(&self, tap: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        // o * s + off >= 0  and  o * s + off <= n - 1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (n as isize - 1 - off).div_euclid(s) + 1;
        (lo.max(0) as usize, hi.clamp(0, n_out as isize) as usize)
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for co in 0..g.c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (y0, y1) = g.valid(ky, g.h, oh);
                for kx in 0..g.k {
                    let wv = w[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (x0, x1) = g.valid(kx, g.w, ow);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut o[oy * ow + x0..oy * ow + x1];
                        let ibase = iy * g.w + x0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            let irow = &xin[ibase..ibase + (x1 - x0)];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        } else {
                            for (j, ov) in orow.iter_mut().enumerate() {
                                *ov += wv * xin[ibase + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates gradients for input, weight and bias given the output gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    if let Some(gb) = gb {
        for co in 0..g.c_out {
            gb[co] += gout[co * plane..(co + 1) * plane].iter().copied().sum();
        }
    }
    if let Some(gw) = gw {
        for co in 0..g.c_out {
            let go = &gout[co * plane..(co + 1) * plane];
            for ci in 0..g.c_in {
                let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(ky, g.h, oh);
                    for kx in 0..g.k {
                        let (x0, x1) = g.valid(kx, g.w, ow);
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &go[oy * ow + x0..oy * ow + x1];
                            let ibase = iy * g.w + x0 * g.stride + kx - g.pad;
                            if g.stride == 1 {
                                let irow = &xin[ibase..ibase + (x1 - x0)];
                                for (&gv, &iv) in grow.iter().zip(irow) {
                                    acc += gv * iv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    acc += gv * xin[ibase + j * g.stride];
                                }
                            }
                        }
                        gw[((co * g.c_in + ci) * g.k + ky) * g.k + kx] += acc;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        for co in 0..g.c_out {
            let go = &gout[co * plane..(co + 1) * plane];
            for ci in 0..g.c_in {
                let gin = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(ky, g.h, oh);
                    for kx in 0..g.k {
                        let wv = w[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                        let (x0, x1) = g.valid(kx, g.w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &go[oy * ow + x0..oy * ow + x1];
                            let ibase = iy * g.w + x0 * g.stride + kx - g.pad;
                            if g.stride == 1 {
                                let irow = &mut gin[ibase..ibase + (x1 - x0)];
                                for (iv, &gv) in irow.iter_mut().zip(grow) {
                                    *iv += wv * gv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    gin[ibase + j * g.stride] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 transposed convolution: `[c_in, h, w] -> [c_out, 2h, 2w]`,
/// weight layout `[c_in, c_out, 2, 2]`.
pub fn conv_t2x_forward<T: Scalar>(
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    x: &[T],
    wt: &[T],
    b: &[T],
    out: &mut [T],
) {
    let (oh, ow) = (2 * h, 2 * w);
    for co in 0..c_out {
        out[co * oh * ow..(co + 1) * oh * ow]
            .iter_mut()
            .for_each(|v| *v = b[co]);
    }
    for ci in 0..c_in {
        let xin = &x[ci * h * w..(ci + 1) * h * w];
        for co in 0..c_out {
            let o = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for a in 0..2 {
                for bb in 0..2 {
                    let wv = wt[((ci * c_out + co) * 2 + a) * 2 + bb];
                    for y in 0..h {
                        let orow = &mut o[(2 * y + a) * ow..(2 * y + a + 1) * ow];
                        for (xx, &iv) in xin[y * w..(y + 1) * w].iter().enumerate() {
                            orow[2 * xx + bb] += wv * iv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_t2x_backward<T: Scalar>(
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    x: &[T],
    wt: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let (oh, ow) = (2 * h, 2 * w);
    if let Some(gb) = gb {
        for co in 0..c_out {
            gb[co] += gout[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum();
        }
    }
    for ci in 0..c_in {
        let xin = &x[ci * h * w..(ci + 1) * h * w];
        for co in 0..c_out {
            let go = &gout[co * oh * ow..(co + 1) * oh * ow];
            for a in 0..2 {
                for bb in 0..2 {
                    let widx = ((ci * c_out + co) * 2 + a) * 2 + bb;
                    let wv = wt[widx];
                    let mut acc = T::zero();
                    for y in 0..h {
                        let grow = &go[(2 * y + a) * ow..(2 * y + a + 1) * ow];
                        for xx in 0..w {
                            let gv = grow[2 * xx + bb];
                            acc += gv * xin[y * w + xx];
                            if let Some(gx) = gx.as_deref_mut() {
                                gx[ci * h * w + y * w + xx] += wv * gv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// `out[m, n] = a[m, k] * b[k, n]`
pub fn matmul<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// Gradients of `a * b` given `g = d out`: `ga += g b^T`, `gb += a^T g`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    g: &[T],
    ga: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    if let Some(ga) = ga {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                ga[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
            }
        }
    }
    if let Some(gb) = gb {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
}
