//! Dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! Weights of layer `l` are stored row-major as an `in x out` matrix, so a
//! batch forward pass is `Z = X W + b`. All parameters live in one flat
//! vector (per layer: weights, then biases), which is also the layout of
//! gradients and optimizer moments.
//!
//! The first layer switches to a sparse-input kernel when most inputs are
//! zero, which is the common case for row-map observations.

use std::fmt::Debug;
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type of a network.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 is representable")
}

/// Fraction of non-zero inputs below which the sparse first-layer kernel is used.
const SPARSE_DENSITY: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Elu => {
                if z > T::zero() {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`.
    #[inline]
    fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Elu => {
                if z > T::zero() {
                    T::one()
                } else {
                    z.exp()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                T::one() - t * t
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Weight initialisation scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Orthogonal weights with the given gains; zero biases.
    Orthogonal { hidden_gain: f64, output_gain: f64 },
    /// All weights and biases zero.
    Zeros,
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Mlp<T: Scalar> {
    sizes: Vec<usize>,
    hidden_activation: Activation,
    output_activation: Activation,
    params: Vec<T>,
    #[serde(skip, default = "fresh_id")]
    id: u64,
    #[serde(skip)]
    version: u64,
}

impl<T: Scalar> Clone for Mlp<T> {
    fn clone(&self) -> Self {
        Self {
            sizes: self.sizes.clone(),
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
            params: self.params.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl<T: Scalar> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.sizes == other.sizes
            && self.hidden_activation == other.hidden_activation
            && self.output_activation == other.output_activation
            && self.params == other.params
    }
}

/// Activations retained by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar> {
    /// Input of each layer.
    inputs: Vec<Array2<T>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<T>>,
    net_id: u64,
    version: u64,
}

impl<T: Scalar> Mlp<T> {
    /// `sizes` lists input, hidden and output widths.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "network needs at least two non-zero layer sizes, got {sizes:?}"
            )));
        }
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut net = Self {
            sizes: sizes.to_vec(),
            hidden_activation,
            output_activation,
            params: vec![T::zero(); count],
            id: fresh_id(),
            version: 0,
        };
        if let Init::Orthogonal {
            hidden_gain,
            output_gain,
        } = init
        {
            let layers = net.num_layers();
            for l in 0..layers {
                let gain = if l + 1 == layers { output_gain } else { hidden_gain };
                let (n_in, n_out) = (sizes[l], sizes[l + 1]);
                let w = orthogonal(n_in, n_out, gain, rng);
                let (wo, _) = net.layer_offsets(l);
                for (dst, src) in net.params[wo..wo + n_in * n_out].iter_mut().zip(w) {
                    *dst = cast(src);
                }
            }
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable parameters; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.version += 1;
        &mut self.params
    }

    pub fn activations(&self) -> (Activation, Activation) {
        (self.hidden_activation, self.output_activation)
    }

    /// Offsets of layer `l`'s weights and biases in the flat parameter vector.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    fn weights(&self, l: usize) -> ArrayView2<'_, T> {
        let (wo, bo) = self.layer_offsets(l);
        ArrayView2::from_shape((self.sizes[l], self.sizes[l + 1]), &self.params[wo..bo])
            .expect("layer shape")
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, T> {
        let (_, bo) = self.layer_offsets(l);
        ArrayView1::from(&self.params[bo..bo + self.sizes[l + 1]])
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.num_layers() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    fn check_input(&self, input: &ArrayView2<'_, T>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.input_dim(),
                actual: input.ncols(),
            });
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &ArrayView2<'_, T>) -> Array2<T> {
        let w = self.weights(l);
        let b = self.bias(l);
        let mut z = Array2::from_shape_fn((x.nrows(), w.ncols()), |(_, j)| b[j]);
        if l == 0 && is_sparse(x) {
            for (xr, mut zr) in x.outer_iter().zip(z.outer_iter_mut()) {
                for (j, &v) in xr.iter().enumerate() {
                    if v != T::zero() {
                        zr.scaled_add(v, &w.row(j));
                    }
                }
            }
        } else {
            general_mat_mul(T::one(), x, &w, T::one(), &mut z);
        }
        z
    }

    /// Batch forward pass (`rows x input_dim`) without retaining activations.
    pub fn predict(&self, input: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.check_input(&input)?;
        let mut x = self.affine(0, &input);
        x.mapv_inplace(|z| self.activation(0).apply(z));
        for l in 1..self.num_layers() {
            let mut z = self.affine(l, &x.view());
            let act = self.activation(l);
            z.mapv_inplace(|v| act.apply(v));
            x = z;
        }
        Ok(x)
    }

    /// Single-sample forward pass.
    pub fn predict_one(&self, input: &[T]) -> Result<Vec<T>> {
        let view = ArrayView2::from_shape((1, input.len()), input).map_err(|_| Error::Shape {
            context: "network input",
            expected: self.input_dim(),
            actual: input.len(),
        })?;
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Batch forward pass retaining what [`Mlp::backward`] needs.
    pub fn forward(&self, input: ArrayView2<'_, T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_input(&input)?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut x = input.to_owned();
        for l in 0..self.num_layers() {
            let z = self.affine(l, &x.view());
            let act = self.activation(l);
            let a = z.mapv(|v| act.apply(v));
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        Ok((
            x,
            ForwardCache {
                inputs,
                pre,
                net_id: self.id,
                version: self.version,
            },
        ))
    }

    /// Reverse-mode gradients. Parameter gradients are *added* to
    /// `param_grads` (flat layout); the input gradient is returned when
    /// `want_input_grad` is set.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<T>,
        output_grad: ArrayView2<'_, T>,
        param_grads: &mut [T],
        want_input_grad: bool,
    ) -> Result<Option<Array2<T>>> {
        if cache.net_id != self.id || cache.version != self.version {
            return Err(Error::StaleCache);
        }
        if param_grads.len() != self.params.len() {
            return Err(Error::Shape {
                context: "parameter gradient buffer",
                expected: self.params.len(),
                actual: param_grads.len(),
            });
        }
        let batch = cache.inputs[0].nrows();
        if output_grad.dim() != (batch, self.output_dim()) {
            return Err(Error::Shape {
                context: "output gradient",
                expected: batch * self.output_dim(),
                actual: output_grad.len(),
            });
        }
        let mut delta = output_grad.to_owned();
        for l in (0..self.num_layers()).rev() {
            let act = self.activation(l);
            if act != Activation::Identity {
                delta.zip_mut_with(&cache.pre[l], |d, &z| *d = *d * act.derivative(z));
            }
            let (wo, bo) = self.layer_offsets(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_grad, rest) = param_grads[wo..].split_at_mut(bo - wo);
            let b_grad = &mut rest[..n_out];
            for (g, s) in b_grad.iter_mut().zip(delta.sum_axis(Axis(0))) {
                *g = *g + s;
            }
            let x = &cache.inputs[l];
            let mut dw = ArrayViewMut2::from_shape((n_in, n_out), w_grad).expect("layer shape");
            if l == 0 && is_sparse(&x.view()) {
                for (xr, dr) in x.outer_iter().zip(delta.outer_iter()) {
                    for (j, &v) in xr.iter().enumerate() {
                        if v != T::zero() {
                            dw.row_mut(j).scaled_add(v, &dr);
                        }
                    }
                }
            } else {
                general_mat_mul(T::one(), &x.t(), &delta, T::one(), &mut dw);
            }
            if l > 0 || want_input_grad {
                let mut dx = Array2::zeros((batch, n_in));
                general_mat_mul(T::one(), &delta, &self.weights(l).t(), T::zero(), &mut dx);
                delta = dx;
            }
        }
        Ok(want_input_grad.then_some(delta))
    }

    /// Gradients of `sum(output_grad * output)` with respect to parameters and input.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        output_grad: ArrayView2<'_, T>,
    ) -> Result<(Vec<T>, Array2<T>)> {
        let mut grads = vec![T::zero(); self.params.len()];
        let input_grad = self
            .backward_into(cache, output_grad, &mut grads, true)?
            .expect("input gradient requested");
        Ok((grads, input_grad))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

fn is_sparse<T: Scalar>(x: &ArrayView2<'_, T>) -> bool {
    if x.is_empty() {
        return false;
    }
    let nnz = x.iter().filter(|&&v| v != T::zero()).count();
    (nnz as f64) < SPARSE_DENSITY * x.len() as f64
}

/// `n_in x n_out` matrix whose smaller dimension is orthonormal, times `gain`.
/// The Q factor of a Gaussian matrix, with R's diagonal made positive.
fn orthogonal<R: Rng + ?Sized>(n_in: usize, n_out: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (rows, cols) = (n_in.max(n_out), n_in.min(n_out));
    let a = Array2::<f64>::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal));
    let q = cholesky_qr2(&a).unwrap_or_else(|| householder_q(&a));
    let mut w = vec![0.0; n_in * n_out];
    for i in 0..n_in {
        for j in 0..n_out {
            let v = if n_in >= n_out { q[[i, j]] } else { q[[j, i]] };
            w[i * n_out + j] = gain * v;
        }
    }
    w
}

/// Two rounds of Cholesky QR; None if the Gram matrix is not positive definite.
fn cholesky_qr2(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.ncols();
    let mut q = a.clone();
    for _ in 0..2 {
        let gram = q.t().dot(&q);
        let chol = DMatrix::from_fn(n, n, |i, j| gram[[i, j]]).cholesky()?;
        // R = L^T, so Q = A L^-T
        let l_inv = chol.l().try_inverse()?;
        let r_inv = Array2::from_shape_fn((n, n), |(i, j)| l_inv[(j, i)]);
        q = q.dot(&r_inv);
    }
    q.iter().all(|v| v.is_finite()).then_some(q)
}

fn householder_q(a: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = a.dim();
    let qr = DMatrix::from_fn(rows, cols, |i, j| a[[i, j]]).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Array2::from_shape_fn((rows, cols), |(i, j)| q[(i, j)])
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }

    /// One update. Non-finite gradients leave everything untouched.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                context: "adam step",
                expected: self.m.len(),
                actual: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let bad = grads.iter().filter(|g| !g.is_finite()).count();
            return Err(Error::NonFinite(format!(
                "{bad} non-finite gradient entries (first at index {i}: {:?})",
                grads[i]
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2): (T, T) = (cast(self.beta1), cast(self.beta2));
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size: T = cast(self.lr / c1);
        let c2_sqrt: T = cast(c2.sqrt());
        let eps: T = cast(self.eps);
        let one = T::one();
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p = *p - step_size * *m / (v.sqrt() / c2_sqrt + eps);
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient vector.
pub fn grad_norm<T: Scalar>(grads: &[T]) -> f64 {
    grads
        .iter()
        .map(|g| {
            let g = g.to_f64().unwrap_or(f64::NAN);
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Scale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s: T = cast(max_norm / (norm + 1e-6));
        grads.iter_mut().for_each(|g| *g = *g * s);
    }
    norm
}
