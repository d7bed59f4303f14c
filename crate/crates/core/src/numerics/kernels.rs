//! Raw slice kernels shared by the tape forward and backward passes.

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` and `b` are dense row-major buffers of their *stored* shape; the
/// transpose flags select which view is multiplied.
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
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths are asserted above and the strides describe
    // exactly an m×k, k×n and m×n view into them.
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

/// Geometry of a strided 1-D convolution over time-major `[len × channels]`
/// buffers.
///
/// `long_len` is the length of the un-strided side (convolution input,
/// transposed-convolution output) and `short_len` the strided side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub long_len: usize,
    pub short_len: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Geometry for a forward convolution over an input of `len` frames.
    pub fn conv(len: usize, channels: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if len + 2 * pad < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            long_len: len,
            short_len: (len + 2 * pad - kernel) / stride + 1,
            channels,
            kernel,
            stride,
            pad,
        })
    }

    /// Geometry for a transposed convolution over an input of `len` frames.
    pub fn transposed(len: usize, channels: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let out = ((len.checked_sub(1)?) * stride + kernel).checked_sub(2 * pad)?;
        Some(Self {
            long_len: out,
            short_len: len,
            channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn col_width(&self) -> usize {
        self.kernel * self.channels
    }

    fn source(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.long_len).then_some(pos as usize)
    }

    /// `[long_len × C] -> [short_len × K·C]`
    pub fn im2col(&self, x: &[f64], out: &mut [f64]) {
        let c = self.channels;
        let w = self.col_width();
        for t in 0..self.short_len {
            for k in 0..self.kernel {
                if let Some(src) = self.source(t, k) {
                    out[t * w + k * c..t * w + (k + 1) * c].copy_from_slice(&x[src * c..(src + 1) * c]);
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add `[short_len × K·C]`
    /// back into `[long_len × C]`.
    pub fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let c = self.channels;
        let w = self.col_width();
        for t in 0..self.short_len {
            for k in 0..self.kernel {
                if let Some(dst) = self.source(t, k) {
                    let src = &cols[t * w + k * c..t * w + (k + 1) * c];
                    for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable in-place softmax of one row; `mask[j] == false`
/// entries get probability exactly zero.
pub fn softmax_row(row: &mut [f64], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry_lengths() {
        let g = ConvGeom::conv(88, 4, 3, 2, 1).unwrap();
        assert_eq!(g.short_len, 44);
        let g = ConvGeom::conv(89, 4, 3, 2, 1).unwrap();
        assert_eq!(g.short_len, 45);
        let t = ConvGeom::transposed(22, 4, 4, 2, 1).unwrap();
        assert_eq!(t.long_len, 44);
        assert!(ConvGeom::conv(1, 1, 5, 1, 1).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::conv(7, 2, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..14).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.short_len * g.col_width()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        g.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        // aᵀ b = [[1,3],[2,4]]·b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
