//! Minimal CPU convolutional network primitives with hand-written backward
//! passes. Activations are single samples laid out `C x H x W`.

use std::ops::AddAssign;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point element type with a GEMM kernel.
pub trait Scalar: Float + AddAssign + Default + Send + Sync + std::fmt::Debug + 'static {
    /// `C = alpha * A * B + beta * C` over row/column strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[allow(clippy::too_many_arguments)]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // bounds the raw-pointer accesses below
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn from_f(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// A `C x H x W` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor shape mismatch");
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f(v.as_f64())).collect(),
        }
    }
}

/// Target size of one unfolded tile, in elements; keeps the tile cache resident.
const TILE_ELEMS: usize = 1 << 17;

/// Output rows per tile for a layer with `fan_in` unfolded rows.
fn tile_rows(fan_in: usize, h: usize, w: usize) -> usize {
    (TILE_ELEMS / (fan_in * w).max(1)).clamp(1, h)
}

/// Unfolds the `k x k` zero-padded neighbourhoods of output rows `y0..y1`
/// into `C*k*k` rows of `(y1 - y0) * W` columns.
fn im2col_rows<T: Scalar>(x: &Tensor<T>, k: usize, y0: usize, y1: usize, cols: &mut Vec<T>) {
    let (c, h, w) = x.shape();
    let pad = (k / 2) as isize;
    let n = (y1 - y0) * w;
    cols.clear();
    cols.resize(c * k * k * n, T::zero());
    for ci in 0..c {
        let src = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let ox = kx as isize - pad;
                let oy = ky as isize - pad;
                let x_lo = (-ox).max(0) as usize;
                let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                let sx_lo = (x_lo as isize + ox) as usize;
                let len = x_hi - x_lo;
                for y in y0..y1 {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s_off = sy as usize * w + sx_lo;
                    let d_off = (y - y0) * w + x_lo;
                    dst[d_off..d_off + len].copy_from_slice(&src[s_off..s_off + len]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col_rows`]: adds column gradients of rows `y0..y1` onto `out`.
fn col2im_rows<T: Scalar>(cols: &[T], k: usize, y0: usize, y1: usize, out: &mut Tensor<T>) {
    let (c, h, w) = out.shape();
    let pad = (k / 2) as isize;
    let hw = h * w;
    let n = (y1 - y0) * w;
    for ci in 0..c {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let ox = kx as isize - pad;
                let oy = ky as isize - pad;
                let x_lo = (-ox).max(0) as usize;
                let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                let sx_lo = (x_lo as isize + ox) as usize;
                let len = x_hi - x_lo;
                for y in y0..y1 {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d = &mut dst[sy as usize * w + sx_lo..][..len];
                    let s = &src[(y - y0) * w + x_lo..][..len];
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += *b;
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution with a square odd kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out x (in * k * k)` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialised weights, zero bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let n = out_channels * fan_in;
        let weight = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f(z * std)
            })
            .collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![T::zero(); out_channels],
            grad_weight: vec![T::zero(); n],
            grad_bias: vec![T::zero(); out_channels],
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &Tensor<T>, scratch: &mut Vec<T>) -> Tensor<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let k = self.fan_in();
        let mut out = Tensor::zeros(self.out_channels, h, w);
        for (o, b) in self.bias.iter().enumerate() {
            out.data[o * hw..(o + 1) * hw].fill(*b);
        }
        if self.kernel == 1 {
            T::gemm(self.out_channels, k, hw, T::one(), &self.weight, k as isize, 1, &x.data, hw as isize, 1, T::one(), &mut out.data, hw as isize, 1);
            return out;
        }
        let rows = tile_rows(k, h, w);
        for y0 in (0..h).step_by(rows) {
            let y1 = (y0 + rows).min(h);
            let n = (y1 - y0) * w;
            im2col_rows(x, self.kernel, y0, y1, scratch);
            T::gemm(
                self.out_channels,
                k,
                n,
                T::one(),
                &self.weight,
                k as isize,
                1,
                scratch,
                n as isize,
                1,
                T::one(),
                &mut out.data[y0 * w..],
                hw as isize,
                1,
            );
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>, scratch: &mut Vec<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let k = self.fan_in();
        let m = self.out_channels;
        for o in 0..m {
            let mut s = T::zero();
            for &g in grad_out.channel(o) {
                s += g;
            }
            self.grad_bias[o] += s;
        }
        if self.kernel == 1 {
            // dW += dY * X^T
            T::gemm(m, hw, k, T::one(), &grad_out.data, hw as isize, 1, &x.data, 1, hw as isize, T::one(), &mut self.grad_weight, k as isize, 1);
            if !need_input_grad {
                return None;
            }
            // dX = W^T * dY
            let mut dx = Tensor::zeros(x.channels, h, w);
            T::gemm(k, m, hw, T::one(), &self.weight, 1, k as isize, &grad_out.data, hw as isize, 1, T::zero(), &mut dx.data, hw as isize, 1);
            return Some(dx);
        }
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.channels, h, w));
        let mut dcols = Vec::new();
        let rows = tile_rows(k, h, w);
        for y0 in (0..h).step_by(rows) {
            let y1 = (y0 + rows).min(h);
            let n = (y1 - y0) * w;
            let dy = &grad_out.data[y0 * w..];
            im2col_rows(x, self.kernel, y0, y1, scratch);
            // dW += dY_tile * cols_tile^T
            T::gemm(m, n, k, T::one(), dy, hw as isize, 1, scratch, 1, n as isize, T::one(), &mut self.grad_weight, k as isize, 1);
            if let Some(dx) = dx.as_mut() {
                // dcols_tile = W^T * dY_tile
                dcols.clear();
                dcols.resize(k * n, T::zero());
                T::gemm(k, m, n, T::one(), &self.weight, 1, k as isize, dy, hw as isize, 1, T::zero(), &mut dcols, n as isize, 1);
                col2im_rows(&dcols, self.kernel, y0, y1, dx);
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(T::zero());
        self.grad_bias.fill(T::zero());
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` by the positivity of the ReLU output `y`.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, v) in grad.data.iter_mut().zip(&y.data) {
        if *v <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling; returns the pooled tensor and argmax indices into `x`.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut idx = vec![0u32; c * oh * ow];
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[j] > x.data[best] {
                        best = j;
                    }
                }
                let o = (ci * oh + oy) * ow + ox;
                out.data[o] = x.data[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

pub fn max_pool2_backward<T: Scalar>(grad: &Tensor<T>, idx: &[u32], input_shape: (usize, usize, usize)) -> Tensor<T> {
    let (c, h, w) = input_shape;
    let mut out = Tensor::zeros(c, h, w);
    for (g, &i) in grad.data.iter().zip(idx) {
        out.data[i as usize] += *g;
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(c, oh, ow);
    for ci in 0..c {
        for y in 0..oh {
            let src = &x.data[(ci * h + y / 2) * w..(ci * h + y / 2 + 1) * w];
            let dst = &mut out.data[(ci * oh + y) * ow..(ci * oh + y + 1) * ow];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(grad: &Tensor<T>) -> Tensor<T> {
    let (c, oh, ow) = grad.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out.data[(ci * h + y / 2) * w + x / 2] += grad.data[(ci * oh + y) * ow + x];
            }
        }
    }
    out
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.channels + b.channels, a.height, a.width, data)
}

pub fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let p = x.plane();
    let a = Tensor::from_vec(first, x.height, x.width, x.data[..first * p].to_vec());
    let b = Tensor::from_vec(x.channels - first, x.height, x.width, x.data[first * p..].to_vec());
    (a, b)
}
