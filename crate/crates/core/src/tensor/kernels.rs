//! Loop kernels behind the tape primitives. All matrices are row-major and
//! every routine accumulates into its output (`c += ...`).

use crate::scalar::Scalar;

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    if n == 1 {
        for i in 0..m {
            c[i] += dot(&a[i * k..(i + 1) * k], b);
        }
        return;
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    if k == 1 {
        // outer product
        for i in 0..m {
            axpy(a[i], &b[..n], &mut c[i * n..(i + 1) * n]);
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    if n == 1 {
        for p in 0..k {
            axpy(b[p], &a[p * m..(p + 1) * m], &mut c[..m]);
        }
        return;
    }
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            axpy(av, brow, &mut c[i * n..(i + 1) * n]);
        }
    }
}

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `input[C×H×W]` into `[(C·k·k) × (OH·OW)]`.
pub(crate) fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.col_cols();
    let mut col = vec![T::zero(); g.col_rows() * cols];
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.padding as isize;
                    if y < 0 || y >= h {
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.padding as isize;
                        if x >= 0 && x < w {
                            *d = src[x as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds columns back onto `out[C×H×W]`, accumulating.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, out: &mut [T]) {
    let cols = g.col_cols();
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.padding as isize;
                    if y < 0 || y >= h {
                        continue;
                    }
                    let prow = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - g.padding as isize;
                        if x >= 0 && x < w {
                            prow[x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 average pooling with stride 2 over `[C×H×W]`; H and W must be even.
pub(crate) fn avg_pool2<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = (2 * oy, 2 * ox);
                let s = plane[y * w + x] + plane[y * w + x + 1] + plane[(y + 1) * w + x] + plane[(y + 1) * w + x + 1];
                out[ch * oh * ow + oy * ow + ox] = s * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Scalar>(grad_out: &[T], c: usize, h: usize, w: usize, grad_in: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[ch * oh * ow + oy * ow + ox] * quarter;
                let base = ch * h * w;
                let (y, x) = (2 * oy, 2 * ox);
                grad_in[base + y * w + x] += g;
                grad_in[base + y * w + x + 1] += g;
                grad_in[base + (y + 1) * w + x] += g;
                grad_in[base + (y + 1) * w + x + 1] += g;
            }
        }
    }
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
    fn gemm_variants_agree_with_naive_product() {
        for &(m, k, n) in &[(3, 4, 2), (5, 1, 7), (4, 9, 1), (1, 17, 3), (6, 11, 13)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 + 1) % 13) as f64 * 0.5 - 3.0).collect();
            let want = naive(m, k, n, &a, &b);

            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c);
            assert_eq!(c, want);

            let bt = transpose(k, n, &b);
            let mut c = vec![0.0; m * n];
            gemm_nt(m, k, n, &a, &bt, &mut c);
            assert_eq!(c, want);

            let at = transpose(m, k, &a);
            let mut c = vec![0.0; m * n];
            gemm_tn(m, k, n, &at, &b, &mut c);
            assert_eq!(c, want);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 6,
            kernel: 3,
            stride: 2,
            padding: 1,
            out_h: 3,
            out_w: 3,
        };
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 60];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
