//! Raw slice kernels shared by the tape's forward and backward passes.

/// Describes how a row-major operand is read by [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Use the stored matrix as is.
    Normal,
    /// Use the transpose of the stored matrix.
    Transposed,
}

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// All buffers are row-major. When `beta == 0` the previous content of `c`
/// is ignored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the strides above describe exactly the m*k, k*n and m*n
    // row-major buffers whose lengths were asserted.
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

/// Spatial geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output spatial size, or `None` when the kernel does not fit.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        if self.stride == 0 || self.kernel == 0 {
            return None;
        }
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unrolls patches into a `(C*k*k) x (Ho*Wo)` matrix.
pub(crate) fn im2col(x: &[f64], g: ConvGeometry) -> Vec<f64> {
    let (ho, wo) = g.output_hw().expect("im2col: invalid geometry");
    let cols = ho * wo;
    let mut out = vec![0.0; g.rows() * cols];
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating into `x`.
pub(crate) fn col2im(cols_buf: &[f64], g: ConvGeometry, x: &mut [f64]) {
    let (ho, wo) = g.output_hw().expect("col2im: invalid geometry");
    let cols = ho * wo;
    assert_eq!(cols_buf.len(), g.rows() * cols);
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            plane[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear tap positions for one normalised coordinate along an axis of
/// `size` pixels, using the align-corners convention with border clamping.
///
/// Returns `(i0, i1, frac, dpos_dcoord)`; the sample is
/// `(1 - frac) * v[i0] + frac * v[i1]`. The derivative is zero when the
/// coordinate was clamped.
pub(crate) fn bilinear_taps(coord: f64, size: usize) -> (usize, usize, f64, f64) {
    if size == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let clamped = coord.clamp(-1.0, 1.0);
    let scale = (size - 1) as f64 / 2.0;
    let dpos = if !(-1.0..=1.0).contains(&coord) { 0.0 } else { scale };
    let pos = (clamped + 1.0) * scale;
    let i0 = (pos.floor() as usize).min(size - 2);
    let frac = pos - i0 as f64;
    (i0, i0 + 1, frac, dpos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_layouts_match_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, la) in [(&a, Layout::Normal), (&at, Layout::Transposed)] {
            for (bb, lb) in [(&b, Layout::Normal), (&bt, Layout::Transposed)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, la, bb, lb, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let cols = im2col(&x, g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 40];
        col2im(&y, g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn taps_hit_pixel_centres() {
        assert_eq!(bilinear_taps(-1.0, 5), (0, 1, 0.0, 2.0));
        let (i0, _, f, _) = bilinear_taps(1.0, 5);
        assert_eq!((i0, f), (3, 1.0));
        let (i0, _, f, d) = bilinear_taps(3.0, 5);
        assert_eq!((i0, f, d), (3, 1.0, 0.0));
    }
}
