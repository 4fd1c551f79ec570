//! Dense numeric kernels behind the graph operations.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1×1, stride 1, no padding: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major matrices.
///
/// `op(a)` is `m×k`, `op(b)` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are asserted above and the strides describe
    // exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Unfold one `C×H×W` image into a `(C·k·k) × (H_out·W_out)` column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let n = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let out = &mut col[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * s + ki) as isize - p;
                    let dst = &mut out[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
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

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let n = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &col[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &src_row[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched 2D convolution. `w` is `c_out × c_in × k × k`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
) -> Vec<f64> {
    let in_sz = g.c_in * g.h * g.w;
    let n = g.col_cols();
    let kk = g.col_rows();
    let mut out = vec![0.0; batch * c_out * n];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * n] };
    for b in 0..batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let ob = &mut out[b * c_out * n..(b + 1) * c_out * n];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(n).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let cols: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        gemm(c_out, kk, n, 1.0, w, false, cols, false, 1.0, ob);
    }
    out
}

/// Gradients of [`conv2d_forward`]; each output is produced only when asked for.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    c_out: usize,
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let in_sz = g.c_in * g.h * g.w;
    let n = g.col_cols();
    let kk = g.col_rows();
    let mut col = vec![0.0; kk * n];
    for b in 0..batch {
        let dyb = &dy[b * c_out * n..(b + 1) * c_out * n];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in dyb.chunks(n).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let cols: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            gemm(c_out, n, kk, 1.0, dyb, false, cols, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                gemm(kk, c_out, n, 1.0, w, true, dyb, false, 1.0, dxb);
            } else {
                gemm(kk, c_out, n, 1.0, w, true, dyb, false, 0.0, &mut col);
                col2im(&col, g, dxb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64], c_out: usize) -> Vec<f64> {
        let mut out = vec![0.0; c_out * g.h_out * g.w_out];
        for co in 0..c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = 0.0;
                    for c in 0..g.c_in {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[(c * g.h + iy as usize) * g.w + ix as usize]
                                    * w[((co * g.c_in + c) * g.k + ki) * g.k + kj];
                            }
                        }
                    }
                    out[(co * g.h_out + oy) * g.w_out + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (4, 2, 1), (1, 1, 0), (7, 1, 3), (4, 1, 1)] {
            let g = ConvGeom::new(2, 7, 6, k, s, p).unwrap();
            let x: Vec<f64> = (0..2 * 7 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..3 * g.col_rows()).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
            let fast = conv2d_forward(&x, 1, &g, &w, None, 3);
            let slow = naive_conv(&x, &g, &w, 3);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
