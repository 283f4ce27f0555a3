//! Differentiable layer primitives. Every forward function has a matching
//! gradient function; caches hold exactly what the gradient pass needs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, maxpool_2x2, ConvGeom, Op, Scalar, Tensor};

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Training,
    #[default]
    Inference,
}

/// Trainable weights and biases together with their accumulated gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
    pub weight_grad: Tensor<T>,
    pub bias_grad: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(weights: Tensor<T>, biases: Tensor<T>) -> Self {
        Self {
            weight_grad: Tensor::zeros(weights.shape()),
            bias_grad: Tensor::zeros(biases.shape()),
            weights,
            biases,
        }
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.fill(T::zero());
        self.bias_grad.fill(T::zero());
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.all_finite() && self.biases.all_finite()
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            weights: self.weights.cast(),
            biases: self.biases.cast(),
            weight_grad: self.weight_grad.cast(),
            bias_grad: self.bias_grad.cast(),
        }
    }
}

/// Shape description of a parameterised layer, used for initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    /// `[c_out, c_in, k, k]` kernels.
    Conv { c_in: usize, c_out: usize, k: usize },
    /// `[f_in, f_out]` weight matrix.
    Dense { f_in: usize, f_out: usize },
}

impl LayerShape {
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerShape::Conv { c_in, k, .. } => c_in * k * k,
            LayerShape::Dense { f_in, .. } => f_in,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerShape::Conv { c_in, c_out, k } => vec![c_out, c_in, k, k],
            LayerShape::Dense { f_in, f_out } => vec![f_in, f_out],
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerShape::Conv { c_out, .. } => c_out,
            LayerShape::Dense { f_out, .. } => f_out,
        }
    }
}

/// He initialisation: zero-mean normal weights with variance `2 / fan_in`,
/// zero biases.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(shape: LayerShape, rng: &mut R) -> LayerParams<T> {
    let fan_in = shape.fan_in().max(1);
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let wshape = shape.weight_shape();
    let n: usize = wshape.iter().product();
    let weights = (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
    LayerParams::new(
        Tensor::from_vec(&wshape, weights).expect("shape matches"),
        Tensor::zeros(&[shape.bias_len()]),
    )
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    relu_in_place(out.data_mut());
    out
}

pub(crate) fn relu_in_place<T: Scalar>(x: &mut [T]) {
    let zero = T::zero();
    for v in x {
        *v = if *v > zero { *v } else { zero };
    }
}

/// Passes `grad` where the forward input (or, equivalently, output) was
/// strictly positive. The subgradient at zero is zero.
pub fn relu_backward<T: Scalar>(forward: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if forward.shape() != grad.shape() {
        return Err(Error::dim("relu gradient length", forward.len(), grad.len()));
    }
    let data = forward
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&f, &g)| if f > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(grad.shape(), data)
}

/// Inverted dropout. `keep` is the probability of keeping a unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutState<T> {
    keep: f64,
    mode: Mode,
    mask: Option<Tensor<T>>,
}

impl<T: Scalar> DropoutState<T> {
    pub fn new(keep: f64, mode: Mode) -> Result<Self> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Config(format!("dropout keep probability {keep} outside (0, 1]")));
        }
        Ok(Self { keep, mode, mask: None })
    }

    pub fn keep(&self) -> f64 {
        self.keep
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// The binary mask of the last training-mode forward call.
    pub fn mask(&self) -> Option<&Tensor<T>> {
        self.mask.as_ref()
    }
}

pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    state: &mut DropoutState<T>,
    rng: &mut R,
) -> Tensor<T> {
    if state.mode == Mode::Inference {
        state.mask = None;
        return x.clone();
    }
    let keep = state.keep;
    let mask: Vec<T> = (0..x.len())
        .map(|_| if keep >= 1.0 || rng.random::<f64>() < keep { T::one() } else { T::zero() })
        .collect();
    let scale = T::from_f64_lossy(1.0 / keep);
    let out = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| v * m * scale)
        .collect();
    state.mask = Some(Tensor::from_vec(x.shape(), mask).expect("same length"));
    Tensor::from_vec(x.shape(), out).expect("same length")
}

pub fn dropout_backward<T: Scalar>(grad: &Tensor<T>, state: &DropoutState<T>) -> Result<Tensor<T>> {
    match (&state.mode, &state.mask) {
        (Mode::Inference, _) => Ok(grad.clone()),
        (Mode::Training, Some(mask)) => {
            if mask.shape() != grad.shape() {
                return Err(Error::dim("dropout gradient length", mask.len(), grad.len()));
            }
            let scale = T::from_f64_lossy(1.0 / state.keep);
            let data = grad
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&g, &m)| g * m * scale)
                .collect();
            Tensor::from_vec(grad.shape(), data)
        }
        (Mode::Training, None) => Err(Error::Usage("dropout gradient requested before a training forward pass".into())),
    }
}

fn dense_dims<T: Scalar>(x: &Tensor<T>, params: &LayerParams<T>) -> Result<(usize, usize, usize)> {
    let (b, f_in) = match *x.shape() {
        [b, f] => (b, f),
        _ => return Err(Error::dim("dense input rank", 2, x.rank())),
    };
    let (w_in, f_out) = match *params.weights.shape() {
        [i, o] => (i, o),
        _ => return Err(Error::dim("dense weight rank", 2, params.weights.rank())),
    };
    if w_in != f_in {
        return Err(Error::dim("dense input features", w_in, f_in));
    }
    if params.biases.len() != f_out {
        return Err(Error::dim("dense bias length", f_out, params.biases.len()));
    }
    Ok((b, f_in, f_out))
}

/// `x · W + b` for `x: [B, F_in]`, `W: [F_in, F_out]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    let (b, f_in, f_out) = dense_dims(x, params)?;
    let mut out = Tensor::zeros(&[b, f_out]);
    for row in out.data_mut().chunks_exact_mut(f_out) {
        row.copy_from_slice(params.biases.data());
    }
    gemm(Op::N, Op::N, b, f_in, f_out, x.data(), params.weights.data(), T::one(), out.data_mut());
    Ok(out)
}

/// Accumulates `∂L/∂W` and `∂L/∂b` into `params` and returns `∂L/∂x`.
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &mut LayerParams<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, f_in, f_out) = dense_dims(x, params)?;
    if grad_out.shape() != [b, f_out] {
        return Err(Error::dim("dense upstream gradient length", b * f_out, grad_out.len()));
    }
    gemm(Op::T, Op::N, f_in, b, f_out, x.data(), grad_out.data(), T::one(), params.weight_grad.data_mut());
    for row in grad_out.data().chunks_exact(f_out) {
        for (acc, &g) in params.bias_grad.data_mut().iter_mut().zip(row) {
            *acc += g;
        }
    }
    let mut grad_x = Tensor::zeros(&[b, f_in]);
    gemm(Op::N, Op::T, b, f_out, f_in, grad_out.data(), params.weights.data(), T::zero(), grad_x.data_mut());
    Ok(grad_x)
}

/// What a convolution block retains for its gradient pass.
#[derive(Debug, Clone)]
pub struct ConvBlockCache<T> {
    input: Tensor<T>,
    activated: Tensor<T>,
    argmax: Option<Vec<u32>>,
}

impl<T: Scalar> ConvBlockCache<T> {
    /// Shape of the block's output (after pooling, when pooled).
    pub(crate) fn output_shape(&self) -> Vec<usize> {
        let s = self.activated.shape();
        match self.argmax {
            Some(_) => vec![s[0], s[1].div_ceil(2), s[2].div_ceil(2)],
            None => s.to_vec(),
        }
    }

    /// Feeds `(relu mask, pooling routes)` into a running hash; used to detect
    /// when a finite-difference probe crosses a non-differentiable point.
    pub(crate) fn hash_pattern(&self, h: &mut impl std::hash::Hasher) {
        for &v in self.activated.data() {
            h.write_u8((v > T::zero()) as u8);
        }
        if let Some(idx) = &self.argmax {
            for &i in idx {
                h.write_u32(i);
            }
        }
    }
}

/// Convolution, ReLU and (optionally) mirror-completed 2×2 max-pooling.
pub fn conv_block_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &LayerParams<T>,
    pool: bool,
) -> Result<(Tensor<T>, ConvBlockCache<T>)> {
    let mut col = Vec::new();
    conv_block_forward_with(x, params, pool, &mut col)
}

pub(crate) fn conv_block_forward_with<T: Scalar>(
    x: &Tensor<T>,
    params: &LayerParams<T>,
    pool: bool,
    col: &mut Vec<T>,
) -> Result<(Tensor<T>, ConvBlockCache<T>)> {
    let g = ConvGeom::check(x, &params.weights, params.biases.len())?;
    let mut conv = Tensor::zeros(&[g.c_out, g.out_h(), g.out_w()]);
    tensor::conv_forward_into(x.data(), params.weights.data(), params.biases.data(), &g, col, conv.data_mut());
    relu_in_place(conv.data_mut());
    let (out, argmax) = if pool {
        let (p, idx) = maxpool_2x2(&conv)?;
        (p, Some(idx))
    } else {
        (conv.clone(), None)
    };
    Ok((
        out,
        ConvBlockCache {
            input: x.clone(),
            activated: conv,
            argmax,
        },
    ))
}

/// Gradient pass of [`conv_block_forward`]; parameter gradients are
/// accumulated, the input gradient is returned when `want_input_grad`.
pub fn conv_block_backward<T: Scalar>(
    cache: &ConvBlockCache<T>,
    params: &mut LayerParams<T>,
    grad_out: &Tensor<T>,
    want_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let mut col = Vec::new();
    conv_block_backward_with(cache, params, grad_out, want_input_grad, &mut col)
}

pub(crate) fn conv_block_backward_with<T: Scalar>(
    cache: &ConvBlockCache<T>,
    params: &mut LayerParams<T>,
    grad_out: &Tensor<T>,
    want_input_grad: bool,
    col: &mut Vec<T>,
) -> Result<Option<Tensor<T>>> {
    let g = ConvGeom::check(&cache.input, &params.weights, params.biases.len())?;
    let act = cache.activated.data();
    let mut grad_conv = match &cache.argmax {
        Some(idx) => {
            if grad_out.len() != idx.len() {
                return Err(Error::dim("pooled gradient length", idx.len(), grad_out.len()));
            }
            tensor::maxpool_backward(grad_out.data(), idx, cache.activated.shape()).into_vec()
        }
        None => {
            if grad_out.len() != act.len() {
                return Err(Error::dim("block gradient length", act.len(), grad_out.len()));
            }
            grad_out.data().to_vec()
        }
    };
    for (d, &a) in grad_conv.iter_mut().zip(act) {
        if a <= T::zero() {
            *d = T::zero();
        }
    }
    let grad_in = tensor::conv_backward(
        cache.input.data(),
        params.weights.data(),
        &grad_conv,
        &g,
        params.weight_grad.data_mut(),
        params.bias_grad.data_mut(),
        want_input_grad,
        col,
    );
    Ok(grad_in.map(|v| Tensor::from_vec(cache.input.shape(), v).expect("input shape")))
}

/// Row-wise softmax of `[B, N]` logits with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = match *x.shape() {
        [_, n] if n >= 1 => n,
        [_, n] => return Err(Error::dim("softmax classes", 1, n)),
        _ => return Err(Error::dim("softmax input rank", 2, x.rank())),
    };
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Clamp on the log argument of the cross-entropy.
pub const LOG_EPSILON: f64 = 1e-12;

fn check_targets<T: Scalar>(probs: &Tensor<T>, targets: &[usize]) -> Result<(usize, usize)> {
    let (b, n) = match *probs.shape() {
        [b, n] => (b, n),
        _ => return Err(Error::dim("probability rank", 2, probs.rank())),
    };
    if targets.len() != b {
        return Err(Error::dim("target count", b, targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Input(format!("target class {bad} outside [0, {n})")));
    }
    Ok((b, n))
}

/// Mean negative log-likelihood of the targets, `−(1/B) Σ log(p + ε)`.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    let (b, n) = check_targets(probs, targets)?;
    if b == 0 {
        return Ok(0.0);
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -(probs.data()[i * n + t].as_f64() + LOG_EPSILON).ln())
        .sum();
    Ok(total / b as f64)
}

/// Gradient of the cross-entropy with respect to the softmax *logits*:
/// `scale · (probs − onehot)`. Pass `scale = 1/B` for the mean loss.
pub fn cross_entropy_logit_grad<T: Scalar>(probs: &Tensor<T>, targets: &[usize], scale: T) -> Result<Tensor<T>> {
    let (_, n) = check_targets(probs, targets)?;
    let mut g = probs.clone();
    for (row, &t) in g.data_mut().chunks_exact_mut(n).zip(targets) {
        row[t] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(g)
}
