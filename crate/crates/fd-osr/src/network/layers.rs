//! Layer primitives with explicit forward/backward passes.
//!
//! Convolutions are im2col + gemm; transposed convolutions reuse the same
//! column machinery in the opposite direction. Each layer caches what its
//! backward pass needs and accumulates parameter gradients into its
//! `ParamTensor`s; trainers zero gradients before each backward sweep.

use ndarray::{s, Array1, Array2, Array4, ArrayD, Axis, Dimension, IxDyn, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Numeric literal helper for generic float code.
pub fn c<T: NdFloat>(v: f64) -> T {
    T::from(v).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Adam moment estimates for one optimizer acting on one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ArrayD<T>,
    pub v: ArrayD<T>,
    /// Number of updates applied (for bias correction).
    pub t: u64,
}

impl<T: NdFloat> AdamState<T> {
    fn zeros(shape: ndarray::IxDyn) -> Self {
        AdamState {
            m: ArrayD::zeros(shape.clone()),
            v: ArrayD::zeros(shape),
            t: 0,
        }
    }
}

/// Identifies which optimizer's moment estimates an update should use.
/// Training procedures that alternate two objectives over shared weights
/// (content reconstruction and transformation classification) keep one
/// optimizer per objective, exactly as if two framework optimizer objects
/// had been constructed over the same parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptSlot {
    Primary,
    Secondary,
}

/// A learnable tensor with its gradient and per-optimizer Adam moments.
#[derive(Debug, Clone)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub opt: [AdamState<T>; 2],
}

impl<T: NdFloat> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: ArrayD<T>) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        let dim = value.raw_dim();
        ParamTensor {
            name: name.into(),
            grad: zeros,
            opt: [AdamState::zeros(dim.clone()), AdamState::zeros(dim)],
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// One Adam update using the accumulated gradient and the primary
    /// optimizer's moments.
    pub fn adam_step(&mut self, lr: T) {
        self.adam_step_slot(lr, OptSlot::Primary);
    }

    /// One Adam update using the accumulated gradient and the moments of
    /// the chosen optimizer.
    pub fn adam_step_slot(&mut self, lr: T, slot: OptSlot) {
        let st = match slot {
            OptSlot::Primary => &mut self.opt[0],
            OptSlot::Secondary => &mut self.opt[1],
        };
        st.t += 1;
        let b1 = c::<T>(0.9);
        let b2 = c::<T>(0.999);
        let eps = c::<T>(1e-8);
        let one = T::one();
        let bc1 = one - b1.powi(st.t as i32);
        let bc2 = one - b2.powi(st.t as i32);
        ndarray::Zip::from(&mut self.value)
            .and(&mut st.m)
            .and(&mut st.v)
            .and(&self.grad)
            .for_each(|w, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            });
    }
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], sampled in f64 so
/// the draw sequence is identical across float widths.
fn fan_in_uniform<T: NdFloat>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let limit = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || c(rng.gen_range(-limit..limit)))
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// (N, C, H, W) -> (N*OH*OW, C*KH*KW); out-of-bounds taps read zero.
pub fn im2col<T: NdFloat>(
    x: &Array4<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (n, ch, h, w) = x.dim();
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut cols = Array2::<T>::zeros((n * oh * ow, ch * k * k));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().unwrap();
    let row_len = ch * k * k;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * row_len;
                let iy0 = (oy * stride) as isize - pad as isize;
                let ix0 = (ox * stride) as isize - pad as isize;
                for ci in 0..ch {
                    let base_in = (ni * ch + ci) * h * w;
                    let base_row = row + ci * k * k;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = base_in + iy as usize * w;
                        let out_row = base_row + ky * k;
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[out_row + kx] = xs[in_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`] back onto an (N, C, H, W) grid.
pub fn col2im<T: NdFloat>(
    cols: &Array2<T>,
    n: usize,
    ch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    debug_assert_eq!(cols.dim(), (n * oh * ow, ch * k * k));
    let mut x = Array4::<T>::zeros((n, ch, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("contiguous cols");
    let row_len = ch * k * k;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * row_len;
                let iy0 = (oy * stride) as isize - pad as isize;
                let ix0 = (ox * stride) as isize - pad as isize;
                for ci in 0..ch {
                    let base_out = (ni * ch + ci) * h * w;
                    let base_row = row + ci * k * k;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let out_row = base_out + iy as usize * w;
                        let in_row = base_row + ky * k;
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xs[out_row + ix as usize] =
                                xs[out_row + ix as usize] + cs[in_row + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

fn nchw_to_rows<T: NdFloat>(y: &Array4<T>) -> Array2<T> {
    // (N, C, H, W) -> (N*H*W, C)
    let (n, ch, h, w) = y.dim();
    let moved = y.view().permuted_axes([0, 2, 3, 1]);
    let std = moved.as_standard_layout().into_owned();
    std.into_shape((n * h * w, ch)).unwrap()
}

fn rows_to_nchw<T: NdFloat>(rows: Array2<T>, n: usize, ch: usize, h: usize, w: usize) -> Array4<T> {
    let y = rows.into_shape((n, h, w, ch)).unwrap();
    let moved = y.view().permuted_axes([0, 3, 1, 2]);
    moved.as_standard_layout().into_owned()
}

// ---------------------------------------------------------------------------
// Conv2d (stride 1, "same" padding)
// ---------------------------------------------------------------------------

pub struct Conv2d<T> {
    pub w: ParamTensor<T>, // (OC, IC*K*K)
    pub b: ParamTensor<T>, // (OC,)
    pub in_channels: usize,
    pub out_channels: usize,
    pub k: usize,
    cache: Option<(Array2<T>, (usize, usize, usize, usize))>, // cols, input dims
}

impl<T: NdFloat> Conv2d<T> {
    pub fn new(name: &str, ic: usize, oc: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = ic * k * k;
        Conv2d {
            w: ParamTensor::new(
                format!("{name}.w"),
                fan_in_uniform(&[oc, fan_in], fan_in, rng),
            ),
            b: ParamTensor::new(format!("{name}.b"), ArrayD::zeros(IxDyn(&[oc]))),
            in_channels: ic,
            out_channels: oc,
            k,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>) -> Array4<T> {
        let (n, _ic, h, w) = x.dim();
        let pad = (self.k - 1) / 2;
        let cols = im2col(x, self.k, 1, pad);
        let wmat = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut rows = cols.dot(&wmat.t()); // (N*H*W, OC)
        let bias = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        rows += &bias;
        self.cache = Some((cols, (n, self.in_channels, h, w)));
        rows_to_nchw(rows, n, self.out_channels, h, w)
    }

    pub fn backward(&mut self, gy: &Array4<T>) -> Array4<T> {
        let (cols, (n, ic, h, w)) = self.cache.take().expect("forward before backward");
        let gy2 = nchw_to_rows(gy); // (N*H*W, OC)
        let gw = gy2.t().dot(&cols); // (OC, IC*K*K)
        self.w.grad += &gw;
        let gb = gy2.sum_axis(Axis(0));
        self.b.grad += &gb;
        let wmat = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let gcols = gy2.dot(&wmat); // (N*H*W, IC*K*K)
        let pad = (self.k - 1) / 2;
        col2im(&gcols, n, ic, h, w, self.k, 1, pad)
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose2d (stride 2)
// ---------------------------------------------------------------------------

pub struct ConvTranspose2d<T> {
    pub w: ParamTensor<T>, // (IC, OC*K*K)
    pub b: ParamTensor<T>, // (OC,)
    pub in_channels: usize,
    pub out_channels: usize,
    pub k: usize,
    pub stride: usize,
    pub output_padding: usize,
    cache: Option<(Array2<T>, (usize, usize, usize, usize))>, // x rows, input dims
}

impl<T: NdFloat> ConvTranspose2d<T> {
    pub fn new(
        name: &str,
        ic: usize,
        oc: usize,
        k: usize,
        stride: usize,
        output_padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = ic; // each output tap sums over input channels only
        ConvTranspose2d {
            w: ParamTensor::new(
                format!("{name}.w"),
                fan_in_uniform(&[ic, oc * k * k], fan_in, rng),
            ),
            b: ParamTensor::new(format!("{name}.b"), ArrayD::zeros(IxDyn(&[oc]))),
            in_channels: ic,
            out_channels: oc,
            k,
            stride,
            output_padding,
            cache: None,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.k + self.output_padding,
            (w - 1) * self.stride + self.k + self.output_padding,
        )
    }

    pub fn forward(&mut self, x: &Array4<T>) -> Array4<T> {
        let (n, _ic, h, w) = x.dim();
        let (oh, ow) = self.out_dims(h, w);
        let x2 = nchw_to_rows(x); // (N*H*W, IC)
        let wmat = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let cols = x2.dot(&wmat); // (N*H*W, OC*K*K)
        let mut y = col2im(&cols, n, self.out_channels, oh, ow, self.k, self.stride, 0);
        let bias = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for (mut ch, &bv) in y
            .axis_iter_mut(Axis(1))
            .zip(bias.iter())
        {
            ch += bv;
        }
        self.cache = Some((x2, (n, h, w, oh)));
        y
    }

    pub fn backward(&mut self, gy: &Array4<T>) -> Array4<T> {
        let (x2, (n, h, w, _oh)) = self.cache.take().expect("forward before backward");
        // transposed-conv backward-data is a plain strided convolution of gy
        let gcols = im2col(gy, self.k, self.stride, 0); // (N*H*W, OC*K*K)
        let wmat = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let gx2 = gcols.dot(&wmat.t()); // (N*H*W, IC)
        let gw = x2.t().dot(&gcols); // (IC, OC*K*K)
        self.w.grad += &gw;
        let gb = gy.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
        self.b.grad += &gb;
        rows_to_nchw(gx2, n, self.in_channels, h, w)
    }
}

// ---------------------------------------------------------------------------
// MaxPool2d (valid)
// ---------------------------------------------------------------------------

pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    argmax: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize) -> Self {
        MaxPool2d {
            k,
            stride,
            argmax: None,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_dim(h, self.k, self.stride, 0),
            conv_out_dim(w, self.k, self.stride, 0),
        )
    }

    pub fn forward<T: NdFloat>(&mut self, x: &Array4<T>) -> Array4<T> {
        let (n, ch, h, w) = x.dim();
        let (oh, ow) = self.out_dims(h, w);
        let mut y = Array4::<T>::zeros((n, ch, oh, ow));
        let mut arg = vec![0usize; n * ch * oh * ow];
        let xs = x.as_slice().expect("contiguous input");
        let ys = y.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..ch {
                let base = (ni * ch + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0;
                        for ky in 0..self.k {
                            let iy = oy * self.stride + ky;
                            for kx in 0..self.k {
                                let ix = ox * self.stride + kx;
                                let v = xs[base + iy * w + ix];
                                if v > best {
                                    best = v;
                                    best_idx = iy * w + ix;
                                }
                            }
                        }
                        let o = ((ni * ch + ci) * oh + oy) * ow + ox;
                        ys[o] = best;
                        arg[o] = best_idx;
                    }
                }
            }
        }
        self.argmax = Some((arg, (n, ch, h, w)));
        y
    }

    pub fn backward<T: NdFloat>(&mut self, gy: &Array4<T>) -> Array4<T> {
        let (arg, (n, ch, h, w)) = self.argmax.take().expect("forward before backward");
        let (_, _, oh, ow) = gy.dim();
        let mut gx = Array4::<T>::zeros((n, ch, h, w));
        let gxs = gx.as_slice_mut().unwrap();
        let gys = gy.as_slice().expect("contiguous grad");
        for ni in 0..n {
            for ci in 0..ch {
                let base = (ni * ch + ci) * h * w;
                for o in 0..oh * ow {
                    let oi = (ni * ch + ci) * oh * ow + o;
                    gxs[base + arg[oi]] = gxs[base + arg[oi]] + gys[oi];
                }
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

pub struct BatchNorm2d<T> {
    pub gamma: ParamTensor<T>,
    pub beta: ParamTensor<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: T,
    pub eps: T,
    cache: Option<(Array4<T>, Array1<T>)>, // xhat, inv_std
}

impl<T: NdFloat> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: ParamTensor::new(
                format!("{name}.gamma"),
                ArrayD::from_elem(IxDyn(&[channels]), T::one()),
            ),
            beta: ParamTensor::new(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, T::one()),
            momentum: c(0.9),
            eps: c(1e-5),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, ch, h, w) = x.dim();
        let count = c::<T>((n * h * w) as f64);
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        match mode {
            Mode::Train => {
                let mut y = x.clone();
                let mut xhat = Array4::<T>::zeros(x.raw_dim());
                let mut inv_std = Array1::<T>::zeros(ch);
                for ci in 0..ch {
                    let lane = x.slice(s![.., ci, .., ..]);
                    let mean = lane.sum() / count;
                    let var = lane.mapv(|v| (v - mean) * (v - mean)).sum() / count;
                    let istd = T::one() / (var + self.eps).sqrt();
                    inv_std[ci] = istd;
                    let mut xh = xhat.slice_mut(s![.., ci, .., ..]);
                    xh.assign(&lane.mapv(|v| (v - mean) * istd));
                    let mut yl = y.slice_mut(s![.., ci, .., ..]);
                    yl.assign(&xh.mapv(|v| gamma[ci] * v + beta[ci]));
                    // unbiased variance in the running estimate
                    let unbias = if n * h * w > 1 {
                        var * count / (count - T::one())
                    } else {
                        var
                    };
                    self.running_mean[ci] =
                        self.momentum * self.running_mean[ci] + (T::one() - self.momentum) * mean;
                    self.running_var[ci] =
                        self.momentum * self.running_var[ci] + (T::one() - self.momentum) * unbias;
                }
                self.cache = Some((xhat, inv_std));
                y
            }
            Mode::Infer => {
                let mut y = x.clone();
                for ci in 0..ch {
                    let istd = T::one() / (self.running_var[ci] + self.eps).sqrt();
                    let mean = self.running_mean[ci];
                    let mut yl = y.slice_mut(s![.., ci, .., ..]);
                    yl.mapv_inplace(|v| gamma[ci] * (v - mean) * istd + beta[ci]);
                }
                y
            }
        }
    }

    pub fn backward(&mut self, gy: &Array4<T>) -> Array4<T> {
        let (xhat, inv_std) = self.cache.take().expect("forward(Train) before backward");
        let (n, ch, h, w) = gy.dim();
        let count = c::<T>((n * h * w) as f64);
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut gx = Array4::<T>::zeros(gy.raw_dim());
        for ci in 0..ch {
            let gyl = gy.slice(s![.., ci, .., ..]);
            let xh = xhat.slice(s![.., ci, .., ..]);
            let sum_gy = gyl.sum();
            let sum_gy_xh = (&gyl * &xh).sum();
            self.beta.grad[ci] = self.beta.grad[ci] + sum_gy;
            self.gamma.grad[ci] = self.gamma.grad[ci] + sum_gy_xh;
            let g = gamma[ci];
            let istd = inv_std[ci];
            let mut gxl = gx.slice_mut(s![.., ci, .., ..]);
            ndarray::Zip::from(&mut gxl)
                .and(&gyl)
                .and(&xh)
                .for_each(|o, &gyv, &xhv| {
                    *o = g * istd * (gyv - sum_gy / count - xhv * sum_gy_xh / count);
                });
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

pub struct Dense<T> {
    pub w: ParamTensor<T>, // (out, in)
    pub b: ParamTensor<T>, // (out,)
    cache: Option<Array2<T>>,
}

impl<T: NdFloat> Dense<T> {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            w: ParamTensor::new(
                format!("{name}.w"),
                fan_in_uniform(&[output, input], input, rng),
            ),
            b: ParamTensor::new(format!("{name}.b"), ArrayD::zeros(IxDyn(&[output]))),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Array2<T>) -> Array2<T> {
        let wmat = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bias = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.dot(&wmat.t());
        y += &bias;
        self.cache = Some(x.clone());
        y
    }

    /// Forward without caching, for inference-only paths.
    pub fn infer(&self, x: &Array2<T>) -> Array2<T> {
        let wmat = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bias = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.dot(&wmat.t());
        y += &bias;
        y
    }

    pub fn backward(&mut self, gy: &Array2<T>) -> Array2<T> {
        let x = self.cache.take().expect("forward before backward");
        let gw = gy.t().dot(&x);
        self.w.grad += &gw;
        self.b.grad += &gy.sum_axis(Axis(0));
        let wmat = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        gy.dot(&wmat)
    }
}

// ---------------------------------------------------------------------------
// Activations and dropout
// ---------------------------------------------------------------------------

pub struct Relu<D> {
    mask: Option<ndarray::Array<bool, D>>,
}

impl<D: Dimension> Relu<D> {
    pub fn new() -> Self {
        Relu { mask: None }
    }

    pub fn forward<T: NdFloat>(&mut self, x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
        self.mask = Some(x.mapv(|v| v > T::zero()));
        x.mapv(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn backward<T: NdFloat>(&mut self, gy: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
        let mask = self.mask.take().expect("forward before backward");
        let mut gx = gy.clone();
        ndarray::Zip::from(&mut gx).and(&mask).for_each(|g, &m| {
            if !m {
                *g = T::zero();
            }
        });
        gx
    }
}

impl<D: Dimension> Default for Relu<D> {
    fn default() -> Self {
        Self::new()
    }
}

/// Sigmoid with the output cached for the backward pass.
pub struct SigmoidLayer<T, D: Dimension> {
    out: Option<ndarray::Array<T, D>>,
}

impl<T: NdFloat, D: Dimension> SigmoidLayer<T, D> {
    pub fn new() -> Self {
        SigmoidLayer { out: None }
    }

    pub fn forward(&mut self, x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
        let y = x.mapv(|v| T::one() / (T::one() + (-v).exp()));
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, gy: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
        let y = self.out.take().expect("forward before backward");
        let mut gx = gy.clone();
        ndarray::Zip::from(&mut gx).and(&y).for_each(|g, &yv| {
            *g = *g * yv * (T::one() - yv);
        });
        gx
    }
}

impl<T: NdFloat, D: Dimension> Default for SigmoidLayer<T, D> {
    fn default() -> Self {
        Self::new()
    }
}

/// Inverted dropout: at train time keeps each unit with probability
/// `keep_prob` and rescales by 1/keep_prob; identity at inference.
pub struct Dropout<T> {
    pub keep_prob: f64,
    mask: Option<Array2<T>>,
}

impl<T: NdFloat> Dropout<T> {
    pub fn new(keep_prob: f64) -> Self {
        Dropout {
            keep_prob,
            mask: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Array2<T> {
        match mode {
            Mode::Infer => x.clone(),
            Mode::Train => {
                let kp = self.keep_prob;
                let mask = Array2::from_shape_simple_fn(x.dim(), || {
                    if rng.gen_range(0.0..1.0) < kp {
                        c::<T>(1.0 / kp)
                    } else {
                        T::zero()
                    }
                });
                let y = x * &mask;
                self.mask = Some(mask);
                y
            }
        }
    }

    pub fn backward(&mut self, gy: &Array2<T>) -> Array2<T> {
        match self.mask.take() {
            Some(mask) => gy * &mask,
            None => gy.clone(),
        }
    }
}
