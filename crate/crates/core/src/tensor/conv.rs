//! im2col lowering and GEMM for 3x3 convolutions.

pub(crate) const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Output extent of a 3x3 convolution, `None` if it would be empty.
pub fn conv_output_size(input: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < KERNEL {
        return None;
    }
    Some((padded - KERNEL) / stride + 1)
}

/// Output extent of a 3x3 transposed convolution.
pub fn conv_transpose_output_size(
    input: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    if input == 0 || stride == 0 || output_padding >= stride {
        return None;
    }
    ((input - 1) * stride + KERNEL + output_padding).checked_sub(2 * padding)
}

/// Geometry of a 3x3 sliding window over a `[channels, height, width]` image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * TAPS
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Image position read by output `(oy, ox)` through tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }
}

/// Unfolds `image` into a `[channels * 9, out_h * out_w]` matrix.
pub(crate) fn im2col(image: &[f64], win: &Window) -> Vec<f64> {
    let plane = win.height * win.width;
    let ncols = win.cols();
    let mut cols = vec![0.0; win.rows() * ncols];
    for c in 0..win.channels {
        let src = &image[c * plane..(c + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * TAPS + ky * KERNEL + kx) * ncols;
                let dst = &mut cols[row..row + ncols];
                for oy in 0..win.out_h {
                    for ox in 0..win.out_w {
                        if let Some(s) = win.source(oy, ox, ky, kx) {
                            dst[oy * win.out_w + ox] = src[s];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back and accumulates into `image`.
pub(crate) fn col2im(cols: &[f64], win: &Window, image: &mut [f64]) {
    let plane = win.height * win.width;
    let ncols = win.cols();
    for c in 0..win.channels {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * TAPS + ky * KERNEL + kx) * ncols;
                let src = &cols[row..row + ncols];
                for oy in 0..win.out_h {
                    for ox in 0..win.out_w {
                        if let Some(s) = win.source(oy, ox, ky, kx) {
                            dst[s] += src[oy * win.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = op(a) * op(b) + beta * c` on row-major matrices, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
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
    // SAFETY: the asserts above pin every buffer to exactly the extent the
    // strides address.
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn output_sizes() {
        assert_eq!(conv_output_size(64, 2, 1), Some(32));
        assert_eq!(conv_output_size(32, 1, 1), Some(32));
        assert_eq!(conv_output_size(8, 2, 1), Some(4));
        assert_eq!(conv_output_size(1, 1, 0), None);
        assert_eq!(conv_transpose_output_size(4, 2, 1, 1), Some(8));
        assert_eq!(conv_transpose_output_size(4, 2, 1, 2), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let win = Window {
            channels: 2,
            height: 5,
            width: 4,
            stride: 2,
            padding: 1,
            out_h: conv_output_size(5, 2, 1).unwrap(),
            out_w: conv_output_size(4, 2, 1).unwrap(),
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..win.rows() * win.cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let lhs: f64 = im2col(&x, &win).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 40];
        col2im(&y, &win, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
