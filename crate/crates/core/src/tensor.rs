//! Dense row-major tensors and the raw numeric kernels used by the layers.
//!
//! Feature maps are channel-first (`[C, H, W]`), convolution kernels are
//! `[C_out, C_in, k, k]`. Convolution is a valid-mode cross-correlation
//! lowered onto a matrix product through an im2col buffer.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`].
///
/// Implemented for `f32` (training precision) and `f64` (verification
/// precision).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// Size of one element in bytes.
    const BYTES: usize;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Every strided access implied by the extents must be in bounds of the
    /// corresponding buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("float conversion")
    }
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("float conversion")
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Whether a gemm operand is read as stored (row-major) or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Op {
    N,
    T,
}

/// `c[m×n] = a·b + beta·c` where `a` is `m×k` (or `k×m` stored, if
/// transposed) and `b` is `k×n` (or `n×k` stored). All buffers are
/// contiguous row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    op_a: Op,
    op_b: Op,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: lengths were checked against the logical extents above and the
    // strides describe exactly those row-major layouts.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("buffer length", expected, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor from `f64` values, rounding to the element precision.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Flat offset of a multi-index; `None` when out of range or of the
    /// wrong rank.
    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            if i >= extent {
                return None;
            }
            flat = flat * extent + i;
        }
        Some(flat)
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        self.offset(index).map(|o| self.data[o])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let o = self
            .offset(index)
            .ok_or_else(|| Error::Input(format!("index {index:?} outside shape {:?}", self.shape)))?;
        self.data[o] = value;
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::dim("reshape length", self.data.len(), expected));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += alpha * other`, elementwise.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    fn check_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape.len() != other.shape.len() {
            return Err(Error::dim("rank", self.shape.len(), other.shape.len()));
        }
        for (axis, (&a, &b)) in self.shape.iter().zip(&other.shape).enumerate() {
            if a != b {
                return Err(Error::dim(format!("axis {axis}"), a, b));
            }
        }
        Ok(())
    }

    /// Extents of a rank-3 `[C, H, W]` map.
    pub(crate) fn chw(&self, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(format!("{what} rank"), 3, self.shape.len())),
        }
    }
}

/// Per-side padding amounts for [`mirror_pad`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

/// Edge-repeating reflection of `i` into `0..n`: `-1 -> 0`, `-2 -> 1`,
/// `n -> n-1`, `n+1 -> n-2`. Offsets further than `n` keep folding.
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as isize;
    let period = 2 * n;
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - 1 - r;
    }
    r as usize
}

/// Pads a `[C, H, W]` map by edge-repeating reflection. Each pad amount
/// must not exceed the extent it reflects.
pub fn mirror_pad<T: Scalar>(input: &Tensor<T>, pad: Padding) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw("mirror_pad input")?;
    if pad.top > h || pad.bottom > h {
        return Err(Error::dim("pad height", h, pad.top.max(pad.bottom)));
    }
    if pad.left > w || pad.right > w {
        return Err(Error::dim("pad width", w, pad.left.max(pad.right)));
    }
    let ho = h + pad.top + pad.bottom;
    let wo = w + pad.left + pad.right;
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let src = input.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..ho {
            let sy = reflect_index(y as isize - pad.top as isize, h);
            let srow = &src[(ch * h + sy) * w..(ch * h + sy + 1) * w];
            let drow = &mut dst[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
            drow[pad.left..pad.left + w].copy_from_slice(srow);
            for x in 0..pad.left {
                drow[x] = srow[reflect_index(x as isize - pad.left as isize, w)];
            }
            for x in 0..pad.right {
                drow[pad.left + w + x] = srow[reflect_index((w + x) as isize, w)];
            }
        }
    }
    Ok(out)
}

/// Non-overlapping 2×2 max-pooling.
///
/// Odd extents are first completed by a one-element edge-repeating
/// reflection on the high side. The returned indices are flat offsets
/// into `input` (never into the virtual padding), one per output element.
pub fn maxpool_2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (c, h, w) = input.chw("maxpool input")?;
    let ho = h.div_ceil(2);
    let wo = w.div_ceil(2);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let mut argmax = vec![0u32; c * ho * wo];
    let src = input.data();
    let dst = out.data_mut();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            let y0 = 2 * oy;
            let y1 = (y0 + 1).min(h - 1);
            for ox in 0..wo {
                let x0 = 2 * ox;
                let x1 = (x0 + 1).min(w - 1);
                let mut best = base + y0 * w + x0;
                let mut val = src[best];
                // Select-based scan; the first maximum wins ties.
                for cand in [base + y0 * w + x1, base + y1 * w + x0, base + y1 * w + x1] {
                    let v = src[cand];
                    let better = v > val;
                    best = if better { cand } else { best };
                    val = if better { v } else { val };
                }
                let o = (ch * ho + oy) * wo + ox;
                dst[o] = val;
                argmax[o] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes pooled-output gradients back to the recorded argmax positions.
pub(crate) fn maxpool_backward<T: Scalar>(
    grad_out: &[T],
    argmax: &[u32],
    input_shape: &[usize],
) -> Tensor<T> {
    let mut grad_in = Tensor::zeros(input_shape);
    let g = grad_in.data_mut();
    for (&d, &i) in grad_out.iter().zip(argmax) {
        g[i as usize] += d;
    }
    grad_in
}

/// Standard matrix product of `[M, K]` and `[K, N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = match *a.shape() {
        [m, k] => (m, k),
        _ => return Err(Error::dim("matmul lhs rank", 2, a.rank())),
    };
    let (kb, n) = match *b.shape() {
        [kb, n] => (kb, n),
        _ => return Err(Error::dim("matmul rhs rank", 2, b.rank())),
    };
    if k != kb {
        return Err(Error::dim("matmul inner extent", k, kb));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(Op::N, Op::N, m, k, n, a.data(), b.data(), T::zero(), out.data_mut());
    Ok(out)
}

/// Geometry of one valid convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h - self.k + 1
    }
    pub fn out_w(&self) -> usize {
        self.w - self.k + 1
    }
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn check(input: &Tensor<impl Scalar>, kernels: &Tensor<impl Scalar>, biases_len: usize) -> Result<Self> {
        let (c_in, h, w) = input.chw("conv input")?;
        let (c_out, kc, kh, kw) = match *kernels.shape() {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(Error::dim("kernel rank", 4, kernels.rank())),
        };
        if kc != c_in {
            return Err(Error::dim("kernel input channels", c_in, kc));
        }
        if kh != kw {
            return Err(Error::dim("kernel width", kh, kw));
        }
        if kh == 0 || kh > h {
            return Err(Error::dim("kernel height vs input height", h, kh));
        }
        if kw > w {
            return Err(Error::dim("kernel width vs input width", w, kw));
        }
        if biases_len != c_out {
            return Err(Error::dim("bias length", c_out, biases_len));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k: kh,
        })
    }
}

/// Lowers `input` into `col[C·k·k, Ho·Wo]`.
pub(crate) fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, col: &mut Vec<T>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    col.clear();
    col.resize(g.patch_len() * p, T::zero());
    for c in 0..g.c_in {
        for dy in 0..g.k {
            for dx in 0..g.k {
                let row = (c * g.k + dy) * g.k + dx;
                let dst = &mut col[row * p..(row + 1) * p];
                for y in 0..ho {
                    let s = (c * g.h + y + dy) * g.w + dx;
                    dst[y * wo..(y + 1) * wo].copy_from_slice(&input[s..s + wo]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `col` into `grad_input`.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, grad_input: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for c in 0..g.c_in {
        for dy in 0..g.k {
            for dx in 0..g.k {
                let row = (c * g.k + dy) * g.k + dx;
                let src = &col[row * p..(row + 1) * p];
                for y in 0..ho {
                    let d = (c * g.h + y + dy) * g.w + dx;
                    for (dst, &v) in grad_input[d..d + wo].iter_mut().zip(&src[y * wo..(y + 1) * wo]) {
                        *dst += v;
                    }
                }
            }
        }
    }
}

/// Forward convolution into `out`, reusing `col` as scratch.
pub(crate) fn conv_forward_into<T: Scalar>(
    input: &[T],
    kernels: &[T],
    biases: &[T],
    g: &ConvGeom,
    col: &mut Vec<T>,
    out: &mut [T],
) {
    let p = g.positions();
    for (o, chunk) in out.chunks_exact_mut(p).enumerate() {
        chunk.fill(biases[o]);
    }
    im2col(input, g, col);
    gemm(Op::N, Op::N, g.c_out, g.patch_len(), p, kernels, col, T::one(), out);
}

/// Gradient pass of a valid convolution. Kernel and bias gradients are
/// accumulated; the input gradient is returned only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    input: &[T],
    kernels: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    grad_kernels: &mut [T],
    grad_biases: &mut [T],
    want_input_grad: bool,
    col: &mut Vec<T>,
) -> Option<Vec<T>> {
    let p = g.positions();
    let kl = g.patch_len();
    for (o, chunk) in grad_out.chunks_exact(p).enumerate() {
        grad_biases[o] += chunk.iter().copied().sum::<T>();
    }
    im2col(input, g, col);
    gemm(Op::N, Op::T, g.c_out, p, kl, grad_out, col, T::one(), grad_kernels);
    if !want_input_grad {
        return None;
    }
    // col is free again; reuse it for d(col) = Wᵀ · d(out).
    gemm(Op::T, Op::N, kl, g.c_out, p, kernels, grad_out, T::zero(), col);
    let mut grad_input = vec![T::zero(); g.c_in * g.h * g.w];
    col2im(col, g, &mut grad_input);
    Some(grad_input)
}

/// Valid 2D cross-correlation of `[C_in, H, W]` with `[C_out, C_in, k, k]`
/// kernels plus per-output-channel bias.
pub fn conv2d_valid<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    biases: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = ConvGeom::check(input, kernels, biases.len())?;
    let mut out = Tensor::zeros(&[g.c_out, g.out_h(), g.out_w()]);
    let mut col = Vec::new();
    conv_forward_into(input.data(), kernels.data(), biases.data(), &g, &mut col, out.data_mut());
    Ok(out)
}
