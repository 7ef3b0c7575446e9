use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{cast, Maps, Scalar};

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), bound: f64) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || cast(rng.random_range(-bound..bound)))
}

fn uniform1<T: Scalar, R: Rng + ?Sized>(rng: &mut R, len: usize, bound: f64) -> Array1<T> {
    Array1::from_shape_simple_fn(len, || cast(rng.random_range(-bound..bound)))
}

pub(crate) fn out_side(side: usize, k: usize, s: usize) -> usize {
    (side - k) / s + 1
}

/// Unfold `k x k` patches at stride `s` into columns:
/// `[c * k * k, n * ho * wo]`.
pub(crate) fn im2col<T: Scalar>(x: &Maps<T>, k: usize, s: usize) -> Array2<T> {
    let (c, n, h, w) = (x.channels(), x.n, x.h, x.w);
    let (ho, wo) = (out_side(h, k, s), out_side(w, k, s));
    let mut col = Array2::zeros((c * k * k, n * ho * wo));
    let src = x.data.as_slice().expect("contiguous");
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let mut row = col.row_mut((ci * k + kh) * k + kw);
                let dst = row.as_slice_mut().expect("contiguous");
                for b in 0..n {
                    for oh in 0..ho {
                        let sbase = ci * n * h * w + b * h * w + (oh * s + kh) * w + kw;
                        let dbase = b * ho * wo + oh * wo;
                        for ow in 0..wo {
                            dst[dbase + ow] = src[sbase + ow * s];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back onto `[c, n * h * w]`.
pub(crate) fn col2im<T: Scalar>(col: &Array2<T>, c: usize, n: usize, h: usize, w: usize, k: usize, s: usize) -> Maps<T> {
    let (ho, wo) = (out_side(h, k, s), out_side(w, k, s));
    let mut out = Maps::zeros(c, n, h, w);
    let dst = out.data.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = col.row((ci * k + kh) * k + kw);
                let src = row.as_slice().expect("contiguous");
                for b in 0..n {
                    for oh in 0..ho {
                        let dbase = ci * n * h * w + b * h * w + (oh * s + kh) * w + kw;
                        let sbase = b * ho * wo + oh * wo;
                        for ow in 0..wo {
                            dst[dbase + ow * s] += src[sbase + ow];
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_channel_bias<T: Scalar>(y: &mut Array2<T>, bias: &Array1<T>) {
    for (mut row, &b) in y.rows_mut().into_iter().zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
}

/// Valid (unpadded) 2-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `[out, in * k * k]`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: uniform(rng, (out_channels, fan_in), bound),
            bias: uniform1(rng, out_channels, bound),
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    /// Returns the output and the unfolded input needed by `backward`.
    pub fn forward(&self, x: &Maps<T>) -> (Maps<T>, Array2<T>) {
        debug_assert_eq!(x.channels(), self.in_channels);
        let col = im2col(x, self.kernel, self.stride);
        let (ho, wo) = (out_side(x.h, self.kernel, self.stride), out_side(x.w, self.kernel, self.stride));
        let mut y = Maps::zeros(self.out_channels, x.n, ho, wo);
        general_mat_mul(T::one(), &self.weight, &col, T::zero(), &mut y.data);
        add_channel_bias(&mut y.data, &self.bias);
        (y, col)
    }

    /// Accumulates parameter gradients into `grad`; returns the input
    /// gradient when `input_dims` (n, h, w) is given.
    pub fn backward(&self, col: &Array2<T>, dy: &Maps<T>, grad: &mut Self, input_dims: Option<(usize, usize, usize)>) -> Option<Maps<T>> {
        general_mat_mul(T::one(), &dy.data, &col.t(), T::one(), &mut grad.weight);
        grad.bias += &dy.data.sum_axis(Axis(1));
        input_dims.map(|(n, h, w)| {
            let mut dcol = Array2::zeros(col.raw_dim());
            general_mat_mul(T::one(), &self.weight.t(), &dy.data, T::zero(), &mut dcol);
            col2im(&dcol, self.in_channels, n, h, w, self.kernel, self.stride)
        })
    }

    pub(crate) fn tensors<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a [T])>) {
        out.push((format!("{name}.weight"), self.weight.as_slice().expect("contiguous")));
        out.push((format!("{name}.bias"), self.bias.as_slice().expect("contiguous")));
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut [T])>) {
        out.push((format!("{name}.weight"), self.weight.as_slice_mut().expect("contiguous")));
        out.push((format!("{name}.bias"), self.bias.as_slice_mut().expect("contiguous")));
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`]'s data path).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    /// `[in, out * k * k]`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = out_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: uniform(rng, (in_channels, fan_in), bound),
            bias: uniform1(rng, out_channels, bound),
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side - 1) * self.stride + self.kernel
    }

    pub fn forward(&self, x: &Maps<T>) -> Maps<T> {
        debug_assert_eq!(x.channels(), self.in_channels);
        let mut col = Array2::zeros((self.weight.ncols(), x.data.ncols()));
        general_mat_mul(T::one(), &self.weight.t(), &x.data, T::zero(), &mut col);
        let mut y = col2im(&col, self.out_channels, x.n, self.out_side(x.h), self.out_side(x.w), self.kernel, self.stride);
        add_channel_bias(&mut y.data, &self.bias);
        y
    }

    pub fn backward(&self, x: &Maps<T>, dy: &Maps<T>, grad: &mut Self, need_dx: bool) -> Option<Maps<T>> {
        let dcol = im2col(dy, self.kernel, self.stride);
        general_mat_mul(T::one(), &x.data, &dcol.t(), T::one(), &mut grad.weight);
        grad.bias += &dy.data.sum_axis(Axis(1));
        need_dx.then(|| {
            let mut dx = Maps::zeros(self.in_channels, x.n, x.h, x.w);
            general_mat_mul(T::one(), &self.weight, &dcol, T::zero(), &mut dx.data);
            dx
        })
    }

    pub(crate) fn tensors<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a [T])>) {
        out.push((format!("{name}.weight"), self.weight.as_slice().expect("contiguous")));
        out.push((format!("{name}.bias"), self.bias.as_slice().expect("contiguous")));
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut [T])>) {
        out.push((format!("{name}.weight"), self.weight.as_slice_mut().expect("contiguous")));
        out.push((format!("{name}.bias"), self.bias.as_slice_mut().expect("contiguous")));
    }
}

/// Fully connected layer on `[n, in]` batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: uniform(rng, (outputs, inputs), bound),
            bias: uniform1(rng, outputs, bound),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = Array2::zeros((x.nrows(), self.weight.nrows()));
        general_mat_mul(T::one(), x, &self.weight.t(), T::zero(), &mut y);
        y += &self.bias;
        y
    }

    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        general_mat_mul(T::one(), &dy.t(), x, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros(x.raw_dim());
        general_mat_mul(T::one(), dy, &self.weight, T::zero(), &mut dx);
        dx
    }

    pub(crate) fn tensors<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a [T])>) {
        out.push((format!("{name}.weight"), self.weight.as_slice().expect("contiguous")));
        out.push((format!("{name}.bias"), self.bias.as_slice().expect("contiguous")));
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut [T])>) {
        out.push((format!("{name}.weight"), self.weight.as_slice_mut().expect("contiguous")));
        out.push((format!("{name}.bias"), self.bias.as_slice_mut().expect("contiguous")));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_maps(c: usize, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Maps<f64> {
        let mut m = Maps::zeros(c, n, h, w);
        m.data.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        m
    }

    /// Direct nested-loop convolution.
    fn naive_conv(layer: &Conv2d<f64>, x: &Maps<f64>) -> Maps<f64> {
        let (k, s) = (layer.kernel, layer.stride);
        let (ho, wo) = (out_side(x.h, k, s), out_side(x.w, k, s));
        let mut y = Maps::zeros(layer.out_channels, x.n, ho, wo);
        for co in 0..layer.out_channels {
            for b in 0..x.n {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = layer.bias[co];
                        for ci in 0..layer.in_channels {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let xv = x.data[[ci, b * x.h * x.w + (oh * s + kh) * x.w + ow * s + kw]];
                                    acc += layer.weight[[co, (ci * k + kh) * k + kw]] * xv;
                                }
                            }
                        }
                        y.data[[co, b * ho * wo + oh * wo + ow]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Conv2d::<f64>::new(3, 5, 4, 2, &mut rng);
        let x = random_maps(3, 2, 12, 10, &mut rng);
        let (y, _) = layer.forward(&x);
        let expected = naive_conv(&layer, &x);
        assert_eq!((y.h, y.w), (5, 4));
        for (a, b) in y.data.iter().zip(expected.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights and zero bias
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new(2, 3, 4, 2, &mut rng);
        conv.bias.fill(0.0);
        let mut convt = ConvTranspose2d::<f64>::new(3, 2, 4, 2, &mut rng);
        // conv weight [out=3, in*k*k], convT weight [in=3, out*k*k]: same matrix
        convt.weight = conv.weight.clone();
        convt.bias.fill(0.0);
        let x = random_maps(2, 2, 10, 10, &mut rng);
        let (cx, _) = conv.forward(&x);
        let y = random_maps(3, 2, cx.h, cx.w, &mut rng);
        let ty = convt.forward(&y);
        assert_eq!((ty.h, ty.w), (10, 10));
        let lhs: f64 = cx.data.iter().zip(y.data.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(ty.data.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_maps(2, 3, 9, 9, &mut rng);
        let col = im2col(&x, 3, 2);
        let mut r = Array2::zeros(col.raw_dim());
        r.mapv_inplace(|_: f64| rng.random_range(-1.0..1.0));
        let back = col2im(&r, 2, 3, 9, 9, 3, 2);
        let lhs: f64 = col.iter().zip(r.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(back.data.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn linear_forward_backward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Linear::<f64>::new(4, 3, &mut rng);
        let mut g = l.clone();
        g.weight.fill(0.0);
        g.bias.fill(0.0);
        let x = Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64);
        let y = l.forward(&x);
        assert_eq!(y.dim(), (2, 3));
        let dy = Array2::ones((2, 3));
        let dx = l.backward(&x, &dy, &mut g);
        assert_eq!(dx.dim(), (2, 4));
        assert_eq!(g.bias[0], 2.0);
        assert_eq!(g.weight[[0, 1]], 1.0 + 2.0);
    }
}
