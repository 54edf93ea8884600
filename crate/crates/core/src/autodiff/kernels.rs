//! Raw NCHW kernels shared by the graph ops.
//!
//! Work is split by output plane, so each plane is accumulated in one
//! fixed loop order regardless of whether the `parallel` feature is on.

use crate::parallel::for_each_chunk;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Output columns `ox` whose tap `kx` reads an in-bounds input column.
    #[inline]
    fn col_range(&self, kx: usize, wo: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride, self.padding, self.w);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        // ix = ox*s + kx - p <= w - 1
        let hi = if w + p < kx + 1 { 0 } else { ((w + p - kx - 1) / s + 1).min(wo) };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        if iy < 0 || iy as usize >= self.h {
            None
        } else {
            Some(iy as usize)
        }
    }

    fn work(&self) -> usize {
        self.batch * self.cout * self.cin * self.kh * self.kw * self.out_h() * self.out_w()
    }
}

pub fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let mut out = vec![0.0; g.batch * g.cout * plane];
    for_each_chunk(&mut out, plane, g.work(), |idx, dst| {
        let (b, co) = (idx / g.cout, idx % g.cout);
        if let Some(bias) = bias {
            dst.fill(bias[co]);
        }
        for ci in 0..g.cin {
            let src = &input[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = weight[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    let (lo, hi) = g.col_range(kx, wo);
                    for oy in 0..ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row_out = &mut dst[oy * wo..(oy + 1) * wo];
                        let row_in = &src[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let off = kx as isize - g.padding as isize;
                            let start = (lo as isize + off) as usize;
                            let row_in = &row_in[start..start + (hi - lo)];
                            for (o, &i) in row_out[lo..hi].iter_mut().zip(row_in) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.padding;
                                row_out[ox] += wv * row_in[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_backward_input(g: &ConvGeom, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = g.h * g.w;
    let mut gin = vec![0.0; g.batch * g.cin * plane];
    for_each_chunk(&mut gin, plane, g.work(), |idx, dst| {
        let (b, ci) = (idx / g.cin, idx % g.cin);
        for co in 0..g.cout {
            let go = &grad_out[(b * g.cout + co) * ho * wo..][..ho * wo];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = weight[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    let (lo, hi) = g.col_range(kx, wo);
                    for oy in 0..ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row_go = &go[oy * wo..(oy + 1) * wo];
                        let row_in = &mut dst[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let start = (lo as isize + kx as isize - g.padding as isize) as usize;
                            let row_in = &mut row_in[start..start + (hi - lo)];
                            for (i, &o) in row_in.iter_mut().zip(&row_go[lo..hi]) {
                                *i += wv * o;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.padding;
                                row_in[ix] += wv * row_go[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

pub fn conv2d_backward_weight(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let per_co = g.cin * g.kh * g.kw;
    let mut gw = vec![0.0; g.cout * per_co];
    for_each_chunk(&mut gw, per_co, g.work(), |co, dst| {
        for ci in 0..g.cin {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi) = g.col_range(kx, wo);
                    let mut acc = 0.0;
                    for b in 0..g.batch {
                        let go = &grad_out[(b * g.cout + co) * ho * wo..][..ho * wo];
                        let src = &input[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                        for oy in 0..ho {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let row_go = &go[oy * wo..(oy + 1) * wo];
                            let row_in = &src[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let start = (lo as isize + kx as isize - g.padding as isize) as usize;
                                let row_in = &row_in[start..start + (hi - lo)];
                                acc += row_go[lo..hi].iter().zip(row_in).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                for ox in lo..hi {
                                    acc += row_go[ox] * row_in[ox * g.stride + kx - g.padding];
                                }
                            }
                        }
                    }
                    dst[(ci * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    gw
}

pub fn conv2d_backward_bias(g: &ConvGeom, grad_out: &[f64]) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let mut gb = vec![0.0; g.cout];
    for b in 0..g.batch {
        for (co, acc) in gb.iter_mut().enumerate() {
            *acc += grad_out[(b * g.cout + co) * plane..][..plane].iter().sum::<f64>();
        }
    }
    gb
}

/// Places band `i` of each `[C,H,W]` cube at column offset `shifts[i]` and sums
/// into a `[1,H,W+max_shift]` measurement.
pub fn disperse_sum(x: &[f64], batch: usize, c: usize, h: usize, w: usize, shifts: &[usize]) -> Vec<f64> {
    let wm = w + shifts.iter().copied().max().unwrap_or(0);
    let mut y = vec![0.0; batch * h * wm];
    for b in 0..batch {
        let yb = &mut y[b * h * wm..(b + 1) * h * wm];
        for (band, &d) in shifts.iter().enumerate().take(c) {
            let xb = &x[(b * c + band) * h * w..][..h * w];
            for r in 0..h {
                let dst = &mut yb[r * wm + d..r * wm + d + w];
                for (o, &v) in dst.iter_mut().zip(&xb[r * w..(r + 1) * w]) {
                    *o += v;
                }
            }
        }
    }
    y
}

/// Linear adjoint of [`disperse_sum`]: band `i` reads columns `[d_i, d_i + w)`.
pub fn disperse_adjoint(y: &[f64], batch: usize, c: usize, h: usize, w: usize, shifts: &[usize]) -> Vec<f64> {
    let wm = w + shifts.iter().copied().max().unwrap_or(0);
    let mut x = vec![0.0; batch * c * h * w];
    for b in 0..batch {
        for (band, &d) in shifts.iter().enumerate().take(c) {
            let xb = &mut x[(b * c + band) * h * w..][..h * w];
            for r in 0..h {
                xb[r * w..(r + 1) * w].copy_from_slice(&y[(b * h + r) * wm + d..][..w]);
            }
        }
    }
    x
}
