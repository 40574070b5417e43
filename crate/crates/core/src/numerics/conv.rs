//! 2-D cross-correlation ("convolution" in the deep-learning sense; the kernel
//! is not flipped) lowered to im2col + GEMM.

use crate::{Error, Result, Tensor};

/// Geometry of one convolution, validated once and shared by forward/backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [n, c, h, w] = input_shape[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [N,C,H,W], got {input_shape:?}"),
            ));
        };
        let [o, kc, kh, kw] = kernel_shape[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [O,C,k,k], got {kernel_shape:?}"),
            ));
        };
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("channel axis: input has C={c}, kernel has C={kc}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel axes k_h={kh} and k_w={kw} differ"),
            ));
        }
        if kh % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel size {kh} is even")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let out_extent = |extent: usize, axis: &str| -> Result<usize> {
            let padded = extent + 2 * padding;
            if padded < kh || !(padded - kh).is_multiple_of(stride) {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "{axis} axis: ({extent} + 2*{padding} - {kh}) / {stride} + 1 is not a positive integer"
                    ),
                ));
            }
            Ok((padded - kh) / stride + 1)
        };
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: kh,
            stride,
            padding,
            out_height: out_extent(h, "height")?,
            out_width: out_extent(w, "width")?,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Unfolds one image `[C,H,W]` into `cols[C*k*k, H'*W']`.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (h, w) = (self.height as isize, self.width as isize);
        let positions = self.positions();
        for c in 0..self.in_channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_height {
                        let y = (oy * s + ki) as isize - p;
                        let line = &mut dst[oy * self.out_width..(oy + 1) * self.out_width];
                        if y < 0 || y >= h {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let x = (ox * s + kj) as isize - p;
                            *v = if x < 0 || x >= w { 0.0 } else { src[x as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters `cols` back into an image.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (h, w) = (self.height as isize, self.width as isize);
        let positions = self.positions();
        for c in 0..self.in_channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_height {
                        let y = (oy * s + ki) as isize - p;
                        if y < 0 || y >= h {
                            continue;
                        }
                        let dst =
                            &mut plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for ox in 0..self.out_width {
                            let x = (ox * s + kj) as isize - p;
                            if x >= 0 && x < w {
                                dst[x as usize] += src[oy * self.out_width + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] = beta*c + a[m,k] * b[k,n]`, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices sized for the given extents and strides.
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

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let (patch, positions) = (g.patch_len(), g.positions());
    let mut out = Tensor::zeros(&g.output_shape());
    if positions == 0 || g.batch == 0 {
        return Ok(out);
    }
    let mut cols = vec![0.0; patch * positions];
    let image_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * positions;
    for n in 0..g.batch {
        g.im2col(&input.data()[n * image_len..(n + 1) * image_len], &mut cols);
        gemm(
            g.out_channels,
            patch,
            positions,
            kernel.data(),
            (patch as isize, 1),
            &cols,
            (positions as isize, 1),
            0.0,
            &mut out.data_mut()[n * out_len..(n + 1) * out_len],
        );
    }
    out.debug_check_finite("conv2d");
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let (gi, gk) = conv2d_backward_parts(grad_out, input, kernel, stride, padding, true)?;
    Ok((gi.expect("input gradient requested"), gk))
}

/// Like [`conv2d_backward`], optionally skipping the input gradient (first layers).
pub fn conv2d_backward_parts(
    grad_out: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out shape {:?} does not match output shape {:?}",
                grad_out.shape(),
                g.output_shape()
            ),
        ));
    }
    let (patch, positions) = (g.patch_len(), g.positions());
    let mut grad_kernel = Tensor::zeros(kernel.shape());
    let mut grad_input = need_input_grad.then(|| Tensor::zeros(input.shape()));
    if positions == 0 || g.batch == 0 {
        return Ok((grad_input, grad_kernel));
    }
    let image_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * positions;
    let mut cols = vec![0.0; patch * positions];
    for n in 0..g.batch {
        let go = &grad_out.data()[n * out_len..(n + 1) * out_len];
        g.im2col(&input.data()[n * image_len..(n + 1) * image_len], &mut cols);
        // grad_kernel[O, patch] += go[O, positions] * cols^T
        gemm(
            g.out_channels,
            positions,
            patch,
            go,
            (positions as isize, 1),
            &cols,
            (1, positions as isize),
            1.0,
            grad_kernel.data_mut(),
        );
        if let Some(gi) = grad_input.as_mut() {
            // cols = kernel^T[patch, O] * go[O, positions]
            gemm(
                patch,
                g.out_channels,
                positions,
                kernel.data(),
                (1, patch as isize),
                go,
                (positions as isize, 1),
                0.0,
                &mut cols,
            );
            g.col2im(&cols, &mut gi.data_mut()[n * image_len..(n + 1) * image_len]);
        }
    }
    grad_kernel.debug_check_finite("conv2d_backward");
    Ok((grad_input, grad_kernel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop reference.
    fn naive_conv(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Tensor {
        let (n, c, h, w) = input.dims4("t").unwrap();
        let (o, _, k, _) = kernel.dims4("t").unwrap();
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        let at = |t: &Tensor, i: [usize; 4]| {
            let s = t.shape();
            t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
        };
        for b in 0..n {
            for oc in 0..o {
                for y in 0..ho {
                    for x in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for i in 0..k {
                                for j in 0..k {
                                    let iy = (y * stride + i) as isize - padding as isize;
                                    let ix = (x * stride + j) as isize - padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += at(input, [b, ic, iy as usize, ix as usize])
                                            * at(kernel, [oc, ic, i, j]);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * o + oc) * ho + y) * wo + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 6, 5], &mut rng);
        for k in [1usize, 3, 5] {
            let mut kern = Tensor::zeros(&[3, 3, k, k]);
            for c in 0..3 {
                let center = ((c * 3 + c) * k + k / 2) * k + k / 2;
                kern.data_mut()[center] = 1.0;
            }
            let y = conv2d(&x, &kern, 1, (k - 1) / 2).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1), (1, 2)] {
            let fast = conv2d(&x, &k, stride, padding).unwrap();
            let slow = naive_conv(&x, &k, stride, padding);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "stride {stride} pad {padding}");
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Tensor::zeros(&[1, 2, 6, 6]);
        let err = conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("channel axis"));
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), 1, 1).is_err());
        // (6 + 2 - 3) / 2 is not integral
        let err = conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), 2, 1).unwrap_err();
        assert!(err.to_string().contains("height axis"));
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 2, 4, 4], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let (gi, gk) = conv2d_backward(&Tensor::zeros(&[2, 3, 4, 4]), &x, &k, 1, 1).unwrap();
        assert_eq!(gi.max_abs(), 0.0);
        assert_eq!(gk.max_abs(), 0.0);
    }

    #[test]
    fn identity_kernel_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 1, 5, 5], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let go = random(&[1, 1, 5, 5], &mut rng);
        let (gi, _) = conv2d_backward(&go, &x, &k, 1, 1).unwrap();
        assert!(gi.max_abs_diff(&go) < 1e-15);
        // valid convolution: gradient lands on the interior only
        let go = random(&[1, 1, 3, 3], &mut rng);
        let (gi, _) = conv2d_backward(&go, &x, &k, 1, 0).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let v = gi.data()[y * 5 + x];
                if (1..4).contains(&y) && (1..4).contains(&x) {
                    assert_eq!(v, go.data()[(y - 1) * 3 + x - 1]);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}
