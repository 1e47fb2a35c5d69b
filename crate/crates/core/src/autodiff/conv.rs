//! 2-D convolution kernels.
//!
//! A convolution, its input gradient and its weight gradient are the three
//! bilinear maps of one trilinear form `<conv(x, w), g>`; each is the
//! derivative of the other two, so the family is closed under differentiation.
//! A transposed convolution is the input-gradient map used in the forward
//! direction.

use super::array::Array;

/// Geometry of a convolution from "input space" `[B, Ci, Hi, Wi]` to
/// "output space" `[B, Co, Ho, Wo]` with weights `[Co, Ci, Kh, Kw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_hw: [usize; 2],
    pub out_hw: [usize; 2],
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

/// Output length of a convolution along one axis, if the window fits.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output length of a transposed convolution along one axis:
/// `S·(L−1) + K − 2P + OP`.
pub fn conv_transpose_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    if input == 0 || stride == 0 || output_padding >= stride {
        return None;
    }
    let full = stride * (input - 1) + kernel + output_padding;
    full.checked_sub(2 * padding).filter(|&n| n > 0)
}

impl ConvGeom {
    pub fn x_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_ch, self.in_hw[0], self.in_hw[1]]
    }

    pub fn y_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_hw[0], self.out_hw[1]]
    }

    pub fn w_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.kernel[0], self.kernel[1]]
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel[0] * self.kernel[1]
    }

    fn col_cols(&self) -> usize {
        self.out_hw[0] * self.out_hw[1]
    }

    /// Input coordinate touched by output position `o` and kernel tap `k`.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[axis] + k) as isize - self.padding[axis] as isize;
        if pos < 0 || pos as usize >= self.in_hw[axis] {
            None
        } else {
            Some(pos as usize)
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let [kh, kw] = self.kernel;
        let [oh, ow] = self.out_hw;
        let [ih, iw] = self.in_hw;
        let p = oh * ow;
        for c in 0..self.in_ch {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oi in 0..oh {
                        let src_i = self.src(0, oi, ki);
                        for oj in 0..ow {
                            dst[oi * ow + oj] = match (src_i, self.src(1, oj, kj)) {
                                (Some(i), Some(j)) => x[(c * ih + i) * iw + j],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let [kh, kw] = self.kernel;
        let [oh, ow] = self.out_hw;
        let [ih, iw] = self.in_hw;
        let p = oh * ow;
        for c in 0..self.in_ch {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oi in 0..oh {
                        let Some(i) = self.src(0, oi, ki) else { continue };
                        for oj in 0..ow {
                            if let Some(j) = self.src(1, oj, kj) {
                                x[(c * ih + i) * iw + j] += src[oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `y = conv(x, w)`.
    pub fn forward(&self, x: &Array, w: &Array) -> Array {
        let (k, p) = (self.col_rows(), self.col_cols());
        let x_step = self.in_ch * self.in_hw[0] * self.in_hw[1];
        let y_step = self.out_ch * p;
        let mut y = vec![0.0; self.batch * y_step];
        let mut cols = vec![0.0; k * p];
        for b in 0..self.batch {
            self.im2col(&x.data()[b * x_step..(b + 1) * x_step], &mut cols);
            gemm(
                self.out_ch,
                k,
                p,
                w.data(),
                false,
                &cols,
                false,
                &mut y[b * y_step..(b + 1) * y_step],
                0.0,
            );
        }
        Array::from_parts(self.y_shape(), y)
    }

    /// `dx = conv_input_grad(g, w)`, the adjoint of `forward` in `x`.
    pub fn input_grad(&self, g: &Array, w: &Array) -> Array {
        let (k, p) = (self.col_rows(), self.col_cols());
        let x_step = self.in_ch * self.in_hw[0] * self.in_hw[1];
        let y_step = self.out_ch * p;
        let mut x = vec![0.0; self.batch * x_step];
        let mut cols = vec![0.0; k * p];
        for b in 0..self.batch {
            gemm(
                k,
                self.out_ch,
                p,
                w.data(),
                true,
                &g.data()[b * y_step..(b + 1) * y_step],
                false,
                &mut cols,
                0.0,
            );
            self.col2im(&cols, &mut x[b * x_step..(b + 1) * x_step]);
        }
        Array::from_parts(self.x_shape(), x)
    }

    /// `dw = conv_weight_grad(x, g)`, the adjoint of `forward` in `w`.
    pub fn weight_grad(&self, x: &Array, g: &Array) -> Array {
        let (k, p) = (self.col_rows(), self.col_cols());
        let x_step = self.in_ch * self.in_hw[0] * self.in_hw[1];
        let y_step = self.out_ch * p;
        let mut w = vec![0.0; self.out_ch * k];
        let mut cols = vec![0.0; k * p];
        for b in 0..self.batch {
            self.im2col(&x.data()[b * x_step..(b + 1) * x_step], &mut cols);
            gemm(
                self.out_ch,
                p,
                k,
                &g.data()[b * y_step..(b + 1) * y_step],
                false,
                &cols,
                true,
                &mut w,
                1.0,
            );
        }
        Array::from_parts(self.w_shape(), w)
    }
}

/// `c = a·b + beta·c` for row-major operands; `ta`/`tb` read the stored
/// matrix transposed. `a` is `m×k` after transposition, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold at least the element counts asserted above and
    // the strides address exactly those elements.
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
