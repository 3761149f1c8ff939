//! Convolution, linear, activation, and upsampling layers with explicit
//! backward passes. Activations are `(channels, height, width)`.

use ndarray::{Array1, Array2, Array3, Array4, Axis, Dimension};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::num::{cast, Scalar};

/// Negative-side slope of the leaky ReLU used throughout the models.
pub const LEAKY_SLOPE: f64 = 0.1;

/// 2D convolution with square kernels, held as `(out_c, in_c, k, k)`.
#[derive(Clone, Debug)]
pub struct Conv2d<S: Scalar> {
    pub weight: Array4<S>,
    pub bias: Array1<S>,
    pub stride: usize,
    pub padding: usize,
}

/// Parameter gradients of a [`Conv2d`].
#[derive(Clone, Debug)]
pub struct Conv2dGrad<S: Scalar> {
    pub weight: Array4<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> Conv2d<S> {
    /// He-uniform initialization; draws weight entries in logical order,
    /// then the bias, from the supplied stream.
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_c * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = Array4::from_shape_simple_fn((out_c, in_c, kernel, kernel), || {
            cast::<S>(rng.gen_range(-bound..bound))
        });
        let bias_bound = 1.0 / fan_in.sqrt();
        let bias = Array1::from_shape_simple_fn(out_c, || cast::<S>(rng.gen_range(-bias_bound..bias_bound)));
        Conv2d { weight, bias, stride, padding }
    }

    /// All-zero parameters: the identity start used for field-prediction
    /// heads.
    pub fn zeros(in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Array4::zeros((out_c, in_c, kernel, kernel)),
            bias: Array1::zeros(out_c),
            stride,
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.dim().3;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<S>) -> Array2<S> {
        let (in_c, h, w) = x.dim();
        let k = self.weight.dim().3;
        let (oh, ow) = self.output_hw(h, w);
        let mut cols = Array2::<S>::zeros((in_c * k * k, oh * ow));
        for c in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, oy * ow + ox]] = x[[c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array3<S>) -> Array3<S> {
        let (out_c, in_c, k, _) = self.weight.dim();
        debug_assert_eq!(in_c, x.dim().0, "channel mismatch");
        let (oh, ow) = self.output_hw(x.dim().1, x.dim().2);
        let cols = self.im2col(x);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("contiguous weight");
        let mut out = w_mat.dot(&cols);
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        // dot may return a column-major result for degenerate shapes.
        out.as_standard_layout()
            .into_owned()
            .into_shape_with_order((out_c, oh, ow))
            .expect("conv output reshape")
    }

    /// Returns the gradient with respect to the input and the parameters.
    pub fn backward(&self, x: &Array3<S>, grad_out: &Array3<S>) -> (Array3<S>, Conv2dGrad<S>) {
        let (out_c, in_c, k, _) = self.weight.dim();
        let (_, h, w) = x.dim();
        let (_, oh, ow) = grad_out.dim();
        let g_mat = grad_out
            .view()
            .into_shape_with_order((out_c, oh * ow))
            .expect("contiguous grad");
        let cols = self.im2col(x);
        let grad_w = g_mat
            .dot(&cols.t())
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((out_c, in_c, k, k))
            .expect("grad weight reshape");
        let grad_b = g_mat.sum_axis(Axis(1));
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("contiguous weight");
        let grad_cols = w_mat.t().dot(&g_mat);
        let mut grad_x = Array3::<S>::zeros((in_c, h, w));
        for c in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            grad_x[[c, iy as usize, ix as usize]] +=
                                grad_cols[[row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
        (grad_x, Conv2dGrad { weight: grad_w, bias: grad_b })
    }
}

impl<S: Scalar> Conv2dGrad<S> {
    pub fn zeros_like(layer: &Conv2d<S>) -> Self {
        Conv2dGrad { weight: Array4::zeros(layer.weight.dim()), bias: Array1::zeros(layer.bias.dim()) }
    }

    pub fn accumulate(&mut self, other: &Conv2dGrad<S>) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn scale(&mut self, factor: S) {
        self.weight.mapv_inplace(|v| v * factor);
        self.bias.mapv_inplace(|v| v * factor);
    }
}

/// Fully connected layer, weight `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear<S: Scalar> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

/// Parameter gradients of a [`Linear`].
#[derive(Clone, Debug)]
pub struct LinearGrad<S: Scalar> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let weight =
            Array2::from_shape_simple_fn((output, input), || cast::<S>(rng.gen_range(-bound..bound)));
        let bias_bound = 1.0 / (input as f64).sqrt();
        let bias =
            Array1::from_shape_simple_fn(output, || cast::<S>(rng.gen_range(-bias_bound..bias_bound)));
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Array1<S>) -> Array1<S> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(&self, x: &Array1<S>, grad_out: &Array1<S>) -> (Array1<S>, LinearGrad<S>) {
        let grad_w = grad_out
            .view()
            .into_shape_with_order((grad_out.len(), 1))
            .expect("column vector")
            .dot(&x.view().into_shape_with_order((1, x.len())).expect("row vector"));
        let grad_x = self.weight.t().dot(grad_out);
        (grad_x, LinearGrad { weight: grad_w, bias: grad_out.clone() })
    }
}

impl<S: Scalar> LinearGrad<S> {
    pub fn zeros_like(layer: &Linear<S>) -> Self {
        LinearGrad { weight: Array2::zeros(layer.weight.dim()), bias: Array1::zeros(layer.bias.dim()) }
    }

    pub fn accumulate(&mut self, other: &LinearGrad<S>) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn scale(&mut self, factor: S) {
        self.weight.mapv_inplace(|v| v * factor);
        self.bias.mapv_inplace(|v| v * factor);
    }
}

pub fn leaky_relu<S: Scalar, D: Dimension>(x: &ndarray::Array<S, D>) -> ndarray::Array<S, D> {
    let slope = cast::<S>(LEAKY_SLOPE);
    x.mapv(|v| if v > S::zero() { v } else { v * slope })
}

/// Backward of [`leaky_relu`]; `x` is the pre-activation input.
pub fn leaky_relu_backward<S: Scalar, D: Dimension>(
    x: &ndarray::Array<S, D>,
    grad_out: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    let slope = cast::<S>(LEAKY_SLOPE);
    let mut grad = grad_out.clone();
    ndarray::Zip::from(&mut grad).and(x).for_each(|g, &v| {
        if v <= S::zero() {
            *g = *g * slope;
        }
    });
    grad
}

pub fn sigmoid<S: Scalar, D: Dimension>(x: &ndarray::Array<S, D>) -> ndarray::Array<S, D> {
    x.mapv(|v| S::one() / (S::one() + (-v).exp()))
}

/// Backward of [`sigmoid`]; `y` is the forward output.
pub fn sigmoid_backward<S: Scalar, D: Dimension>(
    y: &ndarray::Array<S, D>,
    grad_out: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    let mut grad = grad_out.clone();
    ndarray::Zip::from(&mut grad).and(y).for_each(|g, &v| {
        *g = *g * v * (S::one() - v);
    });
    grad
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<S: Scalar>(x: &Array3<S>) -> Array3<S> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xi)| x[[ci, y / 2, xi / 2]])
}

/// Backward of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward<S: Scalar>(grad_out: &Array3<S>) -> Array3<S> {
    let (c, h2, w2) = grad_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut grad = Array3::<S>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                grad[[ci, y / 2, x / 2]] += grad_out[[ci, y, x]];
            }
        }
    }
    grad
}
