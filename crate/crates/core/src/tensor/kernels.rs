// Dense NCHW kernels. Plain loops; the inner loop always walks a contiguous
// output row so the compiler can vectorize it.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if x.len() != 4 || weight.len() != 4 || x[1] != weight[1] || stride == 0 {
            return None;
        }
        let (h, w, kh, kw) = (x[2], x[3], weight[2], weight[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            n: x[0],
            c_in: x[1],
            h,
            w,
            c_out: weight[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output columns `[lo, hi)` whose input column `ow*stride + k - pad` is in range.
    fn col_range(&self, k: usize) -> (usize, usize) {
        span(k, self.pad, self.stride, self.w, self.ow)
    }

    fn row_range(&self, k: usize) -> (usize, usize) {
        span(k, self.pad, self.stride, self.h, self.oh)
    }
}

fn span(k: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < extent
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.c_out * plane_out];
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let o_plane = &mut out[(n * g.c_out + oc) * plane_out..][..plane_out];
            o_plane.fill(bias[oc]);
            for ic in 0..g.c_in {
                let x_plane = &x[(n * g.c_in + ic) * plane_in..][..plane_in];
                let w_base = ((oc * g.c_in) + ic) * g.kh * g.kw;
                for ki in 0..g.kh {
                    let (r_lo, r_hi) = g.row_range(ki);
                    for kj in 0..g.kw {
                        let wv = weight[w_base + ki * g.kw + kj];
                        let (c_lo, c_hi) = g.col_range(kj);
                        if c_lo >= c_hi {
                            continue;
                        }
                        for orow in r_lo..r_hi {
                            let irow = orow * g.stride + ki - g.pad;
                            let o_row = &mut o_plane[orow * g.ow..][..g.ow];
                            let x_row = &x_plane[irow * g.w..][..g.w];
                            if g.stride == 1 {
                                let off = c_lo + kj - g.pad;
                                let len = c_hi - c_lo;
                                for (o, xv) in o_row[c_lo..c_hi].iter_mut().zip(&x_row[off..off + len]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for oc_i in c_lo..c_hi {
                                    o_row[oc_i] += wv * x_row[oc_i * g.stride + kj - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates into whichever of `gx`, `gw`, `gb` are provided.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let g_plane = &gout[(n * g.c_out + oc) * plane_out..][..plane_out];
            if let Some(gb) = gb.as_deref_mut() {
                gb[oc] += g_plane.iter().sum::<f64>();
            }
            for ic in 0..g.c_in {
                let x_off = (n * g.c_in + ic) * plane_in;
                let w_base = ((oc * g.c_in) + ic) * g.kh * g.kw;
                for ki in 0..g.kh {
                    let (r_lo, r_hi) = g.row_range(ki);
                    for kj in 0..g.kw {
                        let (c_lo, c_hi) = g.col_range(kj);
                        if c_lo >= c_hi {
                            continue;
                        }
                        let wv = weight[w_base + ki * g.kw + kj];
                        let mut acc = 0.0;
                        for orow in r_lo..r_hi {
                            let irow = orow * g.stride + ki - g.pad;
                            let g_row = &g_plane[orow * g.ow..][..g.ow];
                            let row_start = x_off + irow * g.w;
                            if g.stride == 1 {
                                let off = c_lo + kj - g.pad;
                                let len = c_hi - c_lo;
                                let gs = &g_row[c_lo..c_hi];
                                if gw.is_some() {
                                    let xs = &x[row_start + off..row_start + off + len];
                                    acc += gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(gx) = gx.as_deref_mut() {
                                    let gxs = &mut gx[row_start + off..row_start + off + len];
                                    for (d, gv) in gxs.iter_mut().zip(gs) {
                                        *d += wv * gv;
                                    }
                                }
                            } else {
                                for ocol in c_lo..c_hi {
                                    let icol = ocol * g.stride + kj - g.pad;
                                    acc += g_row[ocol] * x[row_start + icol];
                                    if let Some(gx) = gx.as_deref_mut() {
                                        gx[row_start + icol] += wv * g_row[ocol];
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[w_base + ki * g.kw + kj] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pool (floor on odd extents). Returns values and, per output,
/// the flat input index that won; ties go to the first element in scan order.
pub(crate) fn maxpool2_forward(shape: &[usize], x: &[f64]) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = base + (2 * i) * w + 2 * j;
                let mut best = x[best_idx];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, vec![n, c, oh, ow])
}

pub(crate) fn linear_forward(n: usize, d_in: usize, d_out: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * d_out];
    for r in 0..n {
        let xr = &x[r * d_in..][..d_in];
        for o in 0..d_out {
            let wr = &w[o * d_in..][..d_in];
            out[r * d_out + o] = b[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    n: usize,
    d_in: usize,
    d_out: usize,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    for r in 0..n {
        let xr = &x[r * d_in..][..d_in];
        for o in 0..d_out {
            let gv = gout[r * d_out + o];
            if gv == 0.0 {
                continue;
            }
            if let Some(gb) = gb.as_deref_mut() {
                gb[o] += gv;
            }
            if let Some(gw) = gw.as_deref_mut() {
                for (d, xv) in gw[o * d_in..][..d_in].iter_mut().zip(xr) {
                    *d += gv * xv;
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                for (d, wv) in gx[r * d_in..][..d_in].iter_mut().zip(&w[o * d_in..][..d_in]) {
                    *d += gv * wv;
                }
            }
        }
    }
}

/// Row-wise softmax over the last axis of an `(rows, k)` buffer.
/// Row-wise softmax of a row-major `(n, k)` matrix.
pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

/// log-softmax of one row.
pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.c_out * g.oh * g.ow];
        for n in 0..g.n {
            for oc in 0..g.c_out {
                for i in 0..g.oh {
                    for j in 0..g.ow {
                        let mut acc = b[oc];
                        for ic in 0..g.c_in {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let r = (i * g.stride + ki) as isize - g.pad as isize;
                                    let c = (j * g.stride + kj) as isize - g.pad as isize;
                                    if r < 0 || c < 0 || r >= g.h as isize || c >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x[((n * g.c_in + ic) * g.h + r as usize) * g.w + c as usize];
                                    acc += xv * w[((oc * g.c_in + ic) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out[((n * g.c_out + oc) * g.oh + i) * g.ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, pad, h, w) in &[(1, 0, 5, 6), (1, 1, 4, 4), (2, 1, 7, 5), (2, 0, 6, 6), (3, 2, 5, 8)] {
            let xs = [2, 3, h, w];
            let ws = [4, 3, 3, 3];
            let g = ConvGeom::new(&xs, &ws, stride, pad).unwrap();
            let x: Vec<f64> = (0..xs.iter().product::<usize>()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..ws.iter().product::<usize>()).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect();
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&g, &x, &wt, &b);
            let slow = naive_conv(&g, &x, &wt, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn ones_kernel_over_ones_image() {
        let g = ConvGeom::new(&[1, 1, 5, 5], &[1, 1, 3, 3], 1, 0).unwrap();
        let out = conv2d_forward(&g, &[1.0; 25], &[1.0; 9], &[0.0]);
        assert_eq!((g.oh, g.ow), (3, 3));
        assert_eq!(out, vec![9.0; 9]);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = [2.0, 2.0, 2.0, 2.0];
        let (out, arg, shape) = maxpool2_forward(&[1, 1, 2, 2], &x);
        assert_eq!(out, vec![2.0]);
        assert_eq!(arg, vec![0]);
        assert_eq!(shape, vec![1, 1, 1, 1]);
    }
}
