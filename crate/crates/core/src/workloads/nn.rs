//! Dense-layer building blocks shared by the feed-forward classifier and
//! the autoencoder: affine forward/backward, ReLU, softmax cross-entropy,
//! fan-scaled initialization. Parameters live in one flat vector addressed
//! through per-layer offsets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::{cast, Scalar};

/// One affine layer's shape and its slice offsets into the flat parameter
/// vector: weights are row-major [input, output], then the bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerDims {
    pub input: usize,
    pub output: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl LayerDims {
    pub fn param_len(&self) -> usize {
        self.input * self.output + self.output
    }
}

/// Allocates consecutive layers in a flat parameter vector.
pub struct LayoutBuilder {
    next: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self { next: 0 }
    }

    pub fn affine(&mut self, input: usize, output: usize) -> LayerDims {
        let layer = LayerDims {
            input,
            output,
            w_off: self.next,
            b_off: self.next + input * output,
        };
        self.next += layer.param_len();
        layer
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

impl Default for LayoutBuilder {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform init scaled by fan-in/fan-out: U(-lim, lim) with
/// lim = sqrt(6 / (fan_in + fan_out)); biases zero.
pub fn init_affine<T: Scalar>(params: &mut [T], layer: &LayerDims, rng: &mut ChaCha8Rng) {
    let lim = (6.0 / (layer.input + layer.output) as f64).sqrt();
    for i in 0..layer.input * layer.output {
        params[layer.w_off + i] = cast(rng.gen_range(-lim..lim));
    }
    for o in 0..layer.output {
        params[layer.b_off + o] = T::zero();
    }
}

/// y = x W + b for a row-major batch.
pub fn affine_forward<T: Scalar>(params: &[T], layer: &LayerDims, x: &[T], batch: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), batch * layer.input);
    let mut y = vec![T::zero(); batch * layer.output];
    for b in 0..batch {
        let xrow = &x[b * layer.input..(b + 1) * layer.input];
        let yrow = &mut y[b * layer.output..(b + 1) * layer.output];
        yrow.copy_from_slice(&params[layer.b_off..layer.b_off + layer.output]);
        for (i, &xi) in xrow.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let wrow = &params[layer.w_off + i * layer.output..layer.w_off + (i + 1) * layer.output];
            for (yo, &w) in yrow.iter_mut().zip(wrow) {
                *yo += xi * w;
            }
        }
    }
    y
}

/// Backward pass of the affine layer: accumulates dW and db into
/// `grad_params` and returns dX.
pub fn affine_backward<T: Scalar>(
    params: &[T],
    layer: &LayerDims,
    x: &[T],
    grad_y: &[T],
    batch: usize,
    grad_params: &mut [T],
) -> Vec<T> {
    let mut grad_x = vec![T::zero(); batch * layer.input];
    for b in 0..batch {
        let xrow = &x[b * layer.input..(b + 1) * layer.input];
        let gyrow = &grad_y[b * layer.output..(b + 1) * layer.output];
        for (o, &gy) in gyrow.iter().enumerate() {
            grad_params[layer.b_off + o] += gy;
        }
        let gxrow = &mut grad_x[b * layer.input..(b + 1) * layer.input];
        for (i, &xi) in xrow.iter().enumerate() {
            let wrow = &params[layer.w_off + i * layer.output..layer.w_off + (i + 1) * layer.output];
            let gwrow =
                &mut grad_params[layer.w_off + i * layer.output..layer.w_off + (i + 1) * layer.output];
            let mut gx = T::zero();
            for o in 0..layer.output {
                let gy = gyrow[o];
                gwrow[o] += xi * gy;
                gx += wrow[o] * gy;
            }
            gxrow[i] = gx;
        }
    }
    grad_x
}

pub fn relu_inplace<T: Scalar>(v: &mut [T]) {
    for x in v.iter_mut() {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes gradient entries where the forward activation was clamped.
pub fn relu_backward<T: Scalar>(activated: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits (already divided by the batch size).
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    classes: usize,
) -> (f64, Vec<T>) {
    let batch = labels.len();
    debug_assert_eq!(logits.len(), batch * classes);
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = 0.0f64;
    let inv_batch: T = cast(1.0 / batch as f64);
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &l in row {
            z += (l - max).exp();
        }
        let log_z = z.ln();
        let centered = row[label] - max;
        loss += (log_z - centered).to_f64().unwrap();
        let grow = &mut grad[b * classes..(b + 1) * classes];
        for (c, g) in grow.iter_mut().enumerate() {
            let p = (row[c] - max).exp() / z;
            let target = if c == label { T::one() } else { T::zero() };
            *g = (p - target) * inv_batch;
        }
    }
    (loss / batch as f64, grad)
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_first<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
