//! im2col / col2im convolution kernels over raw NCHW buffers.
//!
//! Both convolution flavors share one geometry: a transposed convolution
//! is laid out as the convolution whose *input* is the transposed output,
//! which keeps the two exact adjoints of each other.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Sliding-window geometry of a convolution over one `[C, H, W]` image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    /// Returns `None` when the padded image is smaller than the kernel.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if kernel == 0 || stride == 0 {
            return None;
        }
        let ph = height + 2 * padding;
        let pw = width + 2 * padding;
        if ph < kernel || pw < kernel {
            return None;
        }
        Some(Geometry {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Source pixel for output position `o` and kernel offset `k` along an
    /// axis of length `len`, or `None` inside the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

pub(crate) fn im2col(image: &[f32], g: &Geometry, cols: &mut [f32]) {
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let hw = g.height * g.width;
    let n = g.col_cols();
    for c in 0..g.channels {
        let plane = &image[c * hw..(c + 1) * hw];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oh in 0..g.out_h {
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    match g.source(oh, ki, g.height) {
                        None => line.iter_mut().for_each(|v| *v = 0.0),
                        Some(ih) => {
                            let src = &plane[ih * g.width..(ih + 1) * g.width];
                            for (ow, v) in line.iter_mut().enumerate() {
                                *v = g.source(ow, kj, g.width).map_or(0.0, |iw| src[iw]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into `image` (which is not cleared first).
pub(crate) fn col2im(cols: &[f32], g: &Geometry, image: &mut [f32]) {
    debug_assert_eq!(image.len(), g.image_len());
    let hw = g.height * g.width;
    let n = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * hw..(c + 1) * hw];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oh in 0..g.out_h {
                    let Some(ih) = g.source(oh, ki, g.height) else {
                        continue;
                    };
                    let line = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    let dst = &mut plane[ih * g.width..(ih + 1) * g.width];
                    for (ow, v) in line.iter().enumerate() {
                        if let Some(iw) = g.source(ow, kj, g.width) {
                            dst[iw] += v;
                        }
                    }
                }
            }
        }
    }
}

fn view(data: &[f32], rows: usize, cols: usize) -> ArrayView2<'_, f32> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view matches buffer")
}

fn view_mut(data: &mut [f32], rows: usize, cols: usize) -> ArrayViewMut2<'_, f32> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view matches buffer")
}

/// Dimensions shared by the conv entry points: batch, input channels,
/// output channels, and the geometry of the convolution-direction map.
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: Geometry,
}

/// Direct convolution. `kernel` is `[Cout, Cin, K, K]`; `geom` describes the
/// input image.
pub(crate) fn conv2d_forward(input: &[f32], kernel: &[f32], bias: Option<&[f32]>, d: &ConvDims) -> Vec<f32> {
    let g = &d.geom;
    let (rows, n) = (g.col_rows(), g.col_cols());
    let in_len = g.image_len();
    let out_len = d.out_channels * n;
    let mut out = vec![0.0; d.batch * out_len];
    let mut cols = vec![0.0; rows * n];
    let w = view(kernel, d.out_channels, rows);
    for b in 0..d.batch {
        im2col(&input[b * in_len..(b + 1) * in_len], g, &mut cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        general_mat_mul(1.0, &w, &view(&cols, rows, n), 0.0, &mut view_mut(dst, d.out_channels, n));
        if let Some(bias) = bias {
            for (co, plane) in dst.chunks_mut(n).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]: `(d_input, d_kernel, d_bias)`; each is
/// computed only when requested.
pub(crate) fn conv2d_backward(
    input: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    d: &ConvDims,
    want: [bool; 3],
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let g = &d.geom;
    let (rows, n) = (g.col_rows(), g.col_cols());
    let in_len = g.image_len();
    let out_len = d.out_channels * n;
    let w = view(kernel, d.out_channels, rows);
    let mut d_input = want[0].then(|| vec![0.0; d.batch * in_len]);
    let mut d_kernel = want[1].then(|| vec![0.0; kernel.len()]);
    let mut cols = vec![0.0; rows * n];
    for b in 0..d.batch {
        let go = view(&grad_out[b * out_len..(b + 1) * out_len], d.out_channels, n);
        if let Some(dk) = d_kernel.as_mut() {
            im2col(&input[b * in_len..(b + 1) * in_len], g, &mut cols);
            general_mat_mul(1.0, &go, &view(&cols, rows, n).t(), 1.0, &mut view_mut(dk, d.out_channels, rows));
        }
        if let Some(di) = d_input.as_mut() {
            general_mat_mul(1.0, &w.t(), &go, 0.0, &mut view_mut(&mut cols, rows, n));
            col2im(&cols, g, &mut di[b * in_len..(b + 1) * in_len]);
        }
    }
    let d_bias = want[2].then(|| channel_sums(grad_out, d.batch, d.out_channels, n));
    (d_input, d_kernel, d_bias)
}

/// Transposed convolution. `kernel` is `[Cin, Cout, K, K]`; `geom` describes
/// the *output* image (channels = Cout) as seen by the adjoint convolution.
pub(crate) fn conv_transpose2d_forward(
    input: &[f32],
    kernel: &[f32],
    bias: Option<&[f32]>,
    d: &ConvDims,
) -> Vec<f32> {
    let g = &d.geom;
    let (rows, n) = (g.col_rows(), g.col_cols());
    let in_len = d.in_channels * n;
    let out_len = g.image_len();
    let mut out = vec![0.0; d.batch * out_len];
    let mut cols = vec![0.0; rows * n];
    let w = view(kernel, d.in_channels, rows);
    for b in 0..d.batch {
        let x = view(&input[b * in_len..(b + 1) * in_len], d.in_channels, n);
        general_mat_mul(1.0, &w.t(), &x, 0.0, &mut view_mut(&mut cols, rows, n));
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        col2im(&cols, g, dst);
        if let Some(bias) = bias {
            let hw = g.height * g.width;
            for (co, plane) in dst.chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    input: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    d: &ConvDims,
    want: [bool; 3],
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let g = &d.geom;
    let (rows, n) = (g.col_rows(), g.col_cols());
    let in_len = d.in_channels * n;
    let out_len = g.image_len();
    let w = view(kernel, d.in_channels, rows);
    let mut d_input = want[0].then(|| vec![0.0; d.batch * in_len]);
    let mut d_kernel = want[1].then(|| vec![0.0; kernel.len()]);
    let mut cols = vec![0.0; rows * n];
    for b in 0..d.batch {
        im2col(&grad_out[b * out_len..(b + 1) * out_len], g, &mut cols);
        let gc = view(&cols, rows, n);
        if let Some(di) = d_input.as_mut() {
            let dst = &mut di[b * in_len..(b + 1) * in_len];
            general_mat_mul(1.0, &w, &gc, 0.0, &mut view_mut(dst, d.in_channels, n));
        }
        if let Some(dk) = d_kernel.as_mut() {
            let x = view(&input[b * in_len..(b + 1) * in_len], d.in_channels, n);
            general_mat_mul(1.0, &x, &gc.t(), 1.0, &mut view_mut(dk, d.in_channels, rows));
        }
    }
    let d_bias = want[2].then(|| channel_sums(grad_out, d.batch, g.channels, g.height * g.width));
    (d_input, d_kernel, d_bias)
}

fn channel_sums(data: &[f32], batch: usize, channels: usize, plane: usize) -> Vec<f32> {
    let mut sums = vec![0.0f64; channels];
    for b in 0..batch {
        for (c, s) in sums.iter_mut().enumerate() {
            let start = (b * channels + c) * plane;
            *s += data[start..start + plane].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    sums.into_iter().map(|s| s as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_output_size() {
        let g = Geometry::new(3, 8, 8, 4, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
        let g = Geometry::new(1, 3, 3, 3, 1, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (1, 1));
        assert!(Geometry::new(1, 2, 2, 5, 1, 1).is_none());
        assert!(Geometry::new(1, 2, 2, 1, 0, 0).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = Geometry::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f32> = (0..g.image_len()).map(|i| (i as f32 * 0.37).sin()).collect();
        let c: Vec<f32> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
