//! 2-D cross-correlation (no kernel flip) realized as im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor, Trans};

/// Upper bound on im2col buffer elements; larger batches are processed in chunks.
const COLS_BUDGET: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    /// Drop trailing rows/columns that do not fill a whole stride instead of
    /// rejecting the geometry.
    pub truncate: bool,
}

impl ConvSpec {
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding: 0,
            truncate: false,
        }
    }

    /// Output spatial extent for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        let extent = |input: usize, kernel: usize, axis: &str| -> Result<usize> {
            let padded = input + 2 * self.padding;
            if kernel == 0 || kernel > padded {
                return Err(Error::Config(format!(
                    "kernel {kernel} does not fit padded {axis} extent {padded}"
                )));
            }
            if !self.truncate && !(padded - kernel).is_multiple_of(self.stride) {
                return Err(Error::Config(format!(
                    "non-integral output {axis}: ({padded} - {kernel}) / {} ",
                    self.stride
                )));
            }
            Ok((padded - kernel) / self.stride + 1)
        };
        Ok((
            extent(h, self.kernel_h, "height")?,
            extent(w, self.kernel_w, "width")?,
        ))
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

pub struct ConvGrads<T> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
    pub input: Option<Tensor<T>>,
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn of<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, spec: &ConvSpec) -> Result<Self> {
        if x.rank() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("input must be N×C×H×W, got {:?}", x.shape()),
            ));
        }
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        if c != spec.in_channels {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c} channels, spec expects {}", spec.in_channels),
            ));
        }
        k.expect_shape("conv2d kernels", &spec.kernel_shape())?;
        let (ho, wo) = spec.output_hw(h, w)?;
        Ok(Geometry { n, h, w, ho, wo })
    }

    fn chunk(&self, spec: &ConvSpec) -> usize {
        let per_sample = spec.patch_len() * self.ho * self.wo;
        (COLS_BUDGET / per_sample.max(1)).clamp(1, self.n)
    }
}

/// Gathers patches of samples `n0..n0+count` into a `(C·kh·kw) × (count·Ho·Wo)` matrix.
fn im2col<T: Scalar>(
    x: &[T],
    g: &Geometry,
    spec: &ConvSpec,
    n0: usize,
    count: usize,
    cols: &mut [T],
) {
    let (kh, kw, s, pad) = (
        spec.kernel_h,
        spec.kernel_w,
        spec.stride,
        spec.padding as isize,
    );
    let plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let width = count * out_plane;
    for c in 0..spec.in_channels {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                let dst = &mut cols[row * width..(row + 1) * width];
                for local in 0..count {
                    let src = &x[((n0 + local) * spec.in_channels + c) * plane..][..plane];
                    for oy in 0..g.ho {
                        let iy = (oy * s + dy) as isize - pad;
                        let base = local * out_plane + oy * g.wo;
                        if iy < 0 || iy >= g.h as isize {
                            dst[base..base + g.wo].fill(T::zero());
                            continue;
                        }
                        let line = &src[iy as usize * g.w..][..g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * s + dx) as isize - pad;
                            dst[base + ox] = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                line[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto the input gradient.
fn col2im<T: Scalar>(
    cols: &[T],
    g: &Geometry,
    spec: &ConvSpec,
    n0: usize,
    count: usize,
    dx_out: &mut [T],
) {
    let (kh, kw, s, pad) = (
        spec.kernel_h,
        spec.kernel_w,
        spec.stride,
        spec.padding as isize,
    );
    let plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let width = count * out_plane;
    for c in 0..spec.in_channels {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                let src = &cols[row * width..(row + 1) * width];
                for local in 0..count {
                    let dst = &mut dx_out[((n0 + local) * spec.in_channels + c) * plane..][..plane];
                    for oy in 0..g.ho {
                        let iy = (oy * s + dy) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = local * out_plane + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * s + dx) as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: `x` is N×C×H×W, `k` is F×C×kh×kw, result N×F×H'×W'.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::of(x, k, spec)?;
    if let Some(b) = bias {
        b.expect_shape("conv2d bias", &[spec.out_channels])?;
    }
    let f = spec.out_channels;
    let out_plane = g.ho * g.wo;
    let patch = spec.patch_len();
    let chunk = g.chunk(spec);
    let mut out = Tensor::zeros(&[g.n, f, g.ho, g.wo]);
    let mut cols = vec![T::zero(); patch * chunk * out_plane];
    let mut prod = vec![T::zero(); f * chunk * out_plane];
    let mut n0 = 0;
    while n0 < g.n {
        let count = chunk.min(g.n - n0);
        let width = count * out_plane;
        im2col(x.data(), &g, spec, n0, count, &mut cols);
        gemm(
            f,
            patch,
            width,
            k.data(),
            Trans::No,
            &cols,
            Trans::No,
            T::zero(),
            &mut prod,
        );
        let dst = out.data_mut();
        for ch in 0..f {
            let b = bias.map_or(T::zero(), |b| b[ch]);
            for local in 0..count {
                let src = &prod[ch * width + local * out_plane..][..out_plane];
                let o = &mut dst[((n0 + local) * f + ch) * out_plane..][..out_plane];
                for (o, &v) in o.iter_mut().zip(src) {
                    *o = v + b;
                }
            }
        }
        n0 += count;
    }
    Ok(out)
}

/// Gradients of a convolution given the upstream gradient `dout` (N×F×H'×W').
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dout: &Tensor<T>,
    spec: &ConvSpec,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = Geometry::of(x, k, spec)?;
    let f = spec.out_channels;
    dout.expect_shape("conv2d backward", &[g.n, f, g.ho, g.wo])?;
    let out_plane = g.ho * g.wo;
    let patch = spec.patch_len();
    let chunk = g.chunk(spec);

    let mut dk = Tensor::zeros(&spec.kernel_shape());
    let mut dbias = Tensor::zeros(&[f]);
    let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![T::zero(); patch * chunk * out_plane];
    let mut dmat = vec![T::zero(); f * chunk * out_plane];
    let mut dcols = if need_input_grad {
        vec![T::zero(); patch * chunk * out_plane]
    } else {
        Vec::new()
    };

    let mut n0 = 0;
    while n0 < g.n {
        let count = chunk.min(g.n - n0);
        let width = count * out_plane;
        for ch in 0..f {
            for local in 0..count {
                let src = &dout.data()[((n0 + local) * f + ch) * out_plane..][..out_plane];
                dmat[ch * width + local * out_plane..][..out_plane].copy_from_slice(src);
                dbias[ch] += src.iter().copied().sum::<T>();
            }
        }
        im2col(x.data(), &g, spec, n0, count, &mut cols);
        gemm(
            f,
            width,
            patch,
            &dmat,
            Trans::No,
            &cols,
            Trans::Yes,
            T::one(),
            dk.data_mut(),
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                patch,
                f,
                width,
                k.data(),
                Trans::Yes,
                &dmat,
                Trans::No,
                T::zero(),
                &mut dcols,
            );
            col2im(&dcols, &g, spec, n0, count, dx.data_mut());
        }
        n0 += count;
    }
    Ok(ConvGrads {
        kernels: dk,
        bias: dbias,
        input: dx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation.
    fn loop_oracle(x: &Tensor<f64>, k: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let (ho, wo) = spec.output_hw(h, w).unwrap();
        let f = spec.out_channels;
        let p = spec.padding as isize;
        let mut out = Tensor::zeros(&[n, f, ho, wo]);
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for dy in 0..spec.kernel_h {
                                for dx in 0..spec.kernel_w {
                                    let iy = (oy * spec.stride + dy) as isize - p;
                                    let ix = (ox * spec.stride + dx) as isize - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k[((fi * c + ci) * spec.kernel_h + dy) * spec.kernel_w
                                            + dx];
                                }
                            }
                        }
                        out[((ni * f + fi) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_keeps_input() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let out = conv2d_forward(&x, &k, None, &ConvSpec::square(1, 1, 1, 1)).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn diagonal_kernel_sums_diagonal() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = conv2d_forward(&x, &k, None, &ConvSpec::square(1, 1, 2, 1)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn strided_case_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = ConvSpec::square(3, 4, 3, 2);
        let x = random(&mut rng, &[2, 3, 11, 11]);
        let k = random(&mut rng, &spec.kernel_shape());
        let fast = conv2d_forward(&x, &k, None, &spec).unwrap();
        let slow = loop_oracle(&x, &k, &spec);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn hundred_random_cases_match_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mut checked = 0;
        while checked < 100 {
            let kernel = rng.gen_range(1..4);
            let stride = rng.gen_range(1..3);
            let padding = rng.gen_range(0..2);
            let padded = kernel + stride * rng.gen_range(0..4);
            if padded <= 2 * padding {
                continue;
            }
            let h = padded - 2 * padding;
            let spec = ConvSpec {
                in_channels: rng.gen_range(1..4),
                out_channels: rng.gen_range(1..4),
                kernel_h: kernel,
                kernel_w: kernel,
                stride,
                padding,
                truncate: false,
            };
            let n = rng.gen_range(1..3);
            let x = random(&mut rng, &[n, spec.in_channels, h, h]);
            let k = random(&mut rng, &spec.kernel_shape());
            let fast = conv2d_forward(&x, &k, None, &spec).unwrap();
            let slow = loop_oracle(&x, &k, &spec);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10);
            }
            checked += 1;
        }
    }

    #[test]
    fn non_integral_extent_is_config_error() {
        let spec = ConvSpec::square(1, 1, 3, 2);
        assert!(matches!(spec.output_hw(6, 6), Err(Error::Config(_))));
        let big = ConvSpec::square(1, 1, 9, 1);
        assert!(matches!(big.output_hw(5, 5), Err(Error::Config(_))));
    }

    #[test]
    fn truncated_geometry_floors_and_matches_loops() {
        let spec = ConvSpec {
            truncate: true,
            ..ConvSpec::square(2, 3, 9, 2)
        };
        assert_eq!(spec.output_hw(20, 20).unwrap(), (6, 6));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[2, 2, 20, 20]);
        let k = random(&mut rng, &spec.kernel_shape());
        let fast = conv2d_forward(&x, &k, None, &spec).unwrap();
        for (a, b) in fast.data().iter().zip(loop_oracle(&x, &k, &spec).data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let dout = random(&mut rng, fast.shape());
        let grads = conv2d_backward(&x, &k, &dout, &spec, true).unwrap();
        let probe = random(&mut rng, x.shape());
        let lhs = conv2d_forward(&probe, &k, None, &spec)
            .unwrap()
            .dot(&dout)
            .unwrap();
        assert!((lhs - probe.dot(grads.input.as_ref().unwrap()).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn backward_matches_adjoint_identity() {
        // <dout, conv(x + dx)> - <dout, conv(x)> equals <dx, dX> for the linear map.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec {
            padding: 1,
            ..ConvSpec::square(2, 3, 3, 2)
        };
        let x = random(&mut rng, &[2, 2, 7, 7]);
        let k = random(&mut rng, &spec.kernel_shape());
        let out = conv2d_forward(&x, &k, None, &spec).unwrap();
        let dout = random(&mut rng, out.shape());
        let grads = conv2d_backward(&x, &k, &dout, &spec, true).unwrap();
        let probe = random(&mut rng, x.shape());
        let lhs = conv2d_forward(&probe, &k, None, &spec)
            .unwrap()
            .dot(&dout)
            .unwrap();
        let rhs = probe.dot(grads.input.as_ref().unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
        let kprobe = random(&mut rng, k.shape());
        let lhs = conv2d_forward(&x, &kprobe, None, &spec)
            .unwrap()
            .dot(&dout)
            .unwrap();
        assert!((lhs - kprobe.dot(&grads.kernels).unwrap()).abs() < 1e-10);
        assert!((grads.bias.sum() - dout.sum()).abs() < 1e-10);
    }
}
