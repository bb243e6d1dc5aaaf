//! Raw numeric kernels on flat slices. No shape validation happens here; the
//! callers in `autograd` own that.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // (row stride, col stride) of op(a) and op(b) inside their buffers.
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length asserts above guarantee every index reachable through
    // these strides lies inside the respective buffers.
    unsafe {
        matrixmultiply::dgemm(
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

/// Geometry of a 2-D convolution on a single image.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Lays out the receptive fields of one `[Cin, H, W]` image as the columns of
/// a `[Cin*kh*kw, oh*ow]` matrix. Out-of-range taps are zero.
pub fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let n = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into the image buffer.
pub fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// One axis of a half-pixel (align-corners=false) bilinear resampling:
/// destination index -> (lower source, upper source, lower weight, upper weight).
#[derive(Debug, Clone)]
pub struct LerpAxis {
    pub taps: Vec<(usize, usize, f64, f64)>,
}

impl LerpAxis {
    pub fn new(src_len: usize, factor: usize) -> Self {
        let taps = (0..src_len * factor)
            .map(|dst| {
                let s = ((dst as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(src_len - 1);
                let i1 = (i0 + 1).min(src_len - 1);
                let t = s - i0 as f64;
                (i0, i1, 1.0 - t, t)
            })
            .collect();
        Self { taps }
    }
}

/// Bilinear upsampling of `planes` stacked `[h, w]` planes.
pub fn upsample_planes(x: &[f64], planes: usize, h: usize, w: usize, factor: usize, out: &mut [f64]) {
    let ys = LerpAxis::new(h, factor);
    let xs = LerpAxis::new(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ys.taps.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, wx0, wx1)) in xs.taps.iter().enumerate() {
                drow[ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
}

/// Transpose of [`upsample_planes`].
pub fn upsample_planes_backward(g: &[f64], planes: usize, h: usize, w: usize, factor: usize, dx: &mut [f64]) {
    let ys = LerpAxis::new(h, factor);
    let xs = LerpAxis::new(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ys.taps.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in xs.taps.iter().enumerate() {
                let v = src[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * v;
                dst[y0 * w + x1] += wy0 * wx1 * v;
                dst[y1 * w + x0] += wy1 * wx0 * v;
                dst[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
}

/// `[B, C, H, W]` -> `[B*H*W, C]`.
pub fn nchw_to_pixels(x: &[f64], b: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                out[(bi * hw + p) * c + ci] = v;
            }
        }
    }
    out
}

/// `[B*H*W, C]` -> `[B, C, H, W]`.
pub fn pixels_to_nchw(x: &[f64], b: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for p in 0..hw {
            let px = &x[(bi * hw + p) * c..(bi * hw + p + 1) * c];
            for (ci, &v) in px.iter().enumerate() {
                out[(bi * c + ci) * hw + p] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lerp_axis_is_partition_of_unity() {
        for factor in [2, 4] {
            for len in [1, 2, 5] {
                for &(i0, i1, w0, w1) in &LerpAxis::new(len, factor).taps {
                    assert!(i0 < len && i1 < len);
                    assert!((w0 + w1 - 1.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn layout_roundtrip() {
        let x: Vec<f64> = (0..2 * 3 * 4).map(|v| v as f64).collect();
        let p = nchw_to_pixels(&x, 2, 3, 4);
        assert_eq!(p[1], 4.0);
        assert_eq!(pixels_to_nchw(&p, 2, 3, 4), x);
    }
}
