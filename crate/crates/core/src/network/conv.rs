//! 2-D convolution over `(time, freq, channels)` feature maps with
//! symmetric "same" zero padding, lowered to a matrix product via im2col.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

/// Output length and leading pad for "same" padding along one axis:
/// `out = ceil(len / stride)`, with the total pad split as evenly as
/// possible and the extra cell on the trailing side.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let needed = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, needed / 2)
}

/// Geometry of one convolution applied to a given input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_time: usize,
    pub in_freq: usize,
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub out_time: usize,
    pub out_freq: usize,
    pad_time: usize,
    pad_freq: usize,
}

impl ConvGeometry {
    pub fn new(
        in_time: usize,
        in_freq: usize,
        channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Self {
        let (out_time, pad_time) = same_padding(in_time, kernel.0, stride.0);
        let (out_freq, pad_freq) = same_padding(in_freq, kernel.1, stride.1);
        Self {
            in_time,
            in_freq,
            channels,
            kernel,
            stride,
            out_time,
            out_freq,
            pad_time,
            pad_freq,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.channels
    }

    /// Calls `f(patch_row, patch_col, t, f)` for every in-bounds input cell
    /// touched by the kernel; out-of-bounds cells are implicit zeros.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (kh, kw) = self.kernel;
        for ot in 0..self.out_time {
            for of in 0..self.out_freq {
                let row = ot * self.out_freq + of;
                for i in 0..kh {
                    let t = (ot * self.stride.0 + i) as isize - self.pad_time as isize;
                    if t < 0 || t as usize >= self.in_time {
                        continue;
                    }
                    for j in 0..kw {
                        let fr = (of * self.stride.1 + j) as isize - self.pad_freq as isize;
                        if fr < 0 || fr as usize >= self.in_freq {
                            continue;
                        }
                        f(row, (i * kw + j) * self.channels, t as usize, fr as usize);
                    }
                }
            }
        }
    }
}

/// Patch matrix of shape `(out_time * out_freq, kh * kw * channels)`.
pub fn im2col(input: ArrayView3<f64>, geom: &ConvGeometry) -> Array2<f64> {
    let mut patches = Array2::zeros((geom.out_time * geom.out_freq, geom.patch_len()));
    let c = geom.channels;
    geom.for_each_tap(|row, col, t, f| {
        for ch in 0..c {
            patches[[row, col + ch]] = input[[t, f, ch]];
        }
    });
    patches
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im(dpatches: ArrayView2<f64>, geom: &ConvGeometry) -> Array3<f64> {
    let mut dx = Array3::zeros((geom.in_time, geom.in_freq, geom.channels));
    let c = geom.channels;
    geom.for_each_tap(|row, col, t, f| {
        for ch in 0..c {
            dx[[t, f, ch]] += dpatches[[row, col + ch]];
        }
    });
    dx
}

/// Kernel `(kh, kw, in, out)` flattened to `(kh * kw * in, out)`.
pub fn kernel_matrix(kernel: ArrayView4<f64>) -> ArrayView2<f64> {
    let (kh, kw, cin, cout) = kernel.dim();
    kernel
        .into_shape_with_order((kh * kw * cin, cout))
        .expect("kernel is contiguous")
}

/// Plain convolution (no normalization or activation).
pub fn conv2d_forward(
    input: ArrayView3<f64>,
    kernel: ArrayView4<f64>,
    bias: ArrayView1<f64>,
    stride: (usize, usize),
) -> Array3<f64> {
    let (t, f, c) = input.dim();
    let (kh, kw, _, cout) = kernel.dim();
    let geom = ConvGeometry::new(t, f, c, (kh, kw), stride);
    let out = im2col(input, &geom).dot(&kernel_matrix(kernel)) + &bias;
    out.into_shape_with_order((geom.out_time, geom.out_freq, cout))
        .expect("row-major conv output")
}

/// Gradients of [`conv2d_forward`] given `dout` of shape `(out_time, out_freq, out)`.
pub fn conv2d_backward(
    input: ArrayView3<f64>,
    kernel: ArrayView4<f64>,
    stride: (usize, usize),
    dout: ArrayView3<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (t, f, c) = input.dim();
    let (kh, kw, cin, cout) = kernel.dim();
    let geom = ConvGeometry::new(t, f, c, (kh, kw), stride);
    let patches = im2col(input, &geom);
    let dz = dout
        .to_owned()
        .into_shape_with_order((geom.out_time * geom.out_freq, cout))
        .expect("row-major conv output");
    let (dx, dk, db) = matrix_backward(&patches, kernel, dz.view(), &geom);
    (dx, dk.into_shape_with_order((kh, kw, cin, cout)).unwrap(), db)
}

/// Backward of `Z = P · K + b` in patch form.
pub(crate) fn matrix_backward(
    patches: &Array2<f64>,
    kernel: ArrayView4<f64>,
    dz: ArrayView2<f64>,
    geom: &ConvGeometry,
) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
    let db = dz.sum_axis(Axis(0));
    let dk = patches.t().dot(&dz);
    let dpatches = dz.dot(&kernel_matrix(kernel).t());
    (col2im(dpatches.view(), geom), dk, db)
}
