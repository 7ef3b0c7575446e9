//! Minimal CPU network substrate: convolutions via im2col + GEMM, explicit
//! forward traces and hand-written backward passes, Adam.
//!
//! Activations are stored channel-major as `[channels, batch * height * width]`
//! so a convolution is a single matrix product over the whole batch.

mod attention;
mod layers;
mod qnet;

use std::fmt::Debug;

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};
use crate::state::{StackedState, FRAME_LEN, FRAME_SIDE, STACK};

pub use attention::{AttentionNet, AttentionTrace, GatedQNetwork, GatedTrace};
pub use layers::{ConvTranspose2d, Conv2d, Linear};
pub use qnet::{QNetwork, QNetworkSpec, QTrace};

pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Debug
    + Default
    + Send
    + Sync
    + std::ops::AddAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("representable")
}

/// Batch of feature maps, `[channels, n * h * w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Maps<T> {
    pub data: Array2<T>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> Maps<T> {
    pub fn zeros(channels: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array2::zeros((channels, n * h * w)),
            n,
            h,
            w,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Pack stacked states as a 4-channel 84x84 batch.
    pub fn from_states(states: &[&StackedState]) -> Self {
        let n = states.len();
        let mut maps = Self::zeros(STACK, n, FRAME_SIDE, FRAME_SIDE);
        for (b, s) in states.iter().enumerate() {
            for (c, frame) in s.frames().iter().enumerate() {
                let mut row = maps.data.row_mut(c);
                let dst = &mut row.as_slice_mut().expect("contiguous")[b * FRAME_LEN..(b + 1) * FRAME_LEN];
                for (d, &v) in dst.iter_mut().zip(frame.pixels()) {
                    *d = T::from_f32(v).expect("representable");
                }
            }
        }
        maps
    }

    /// Copy of sample `b` as a flat `[channels * h * w]` vector.
    pub fn sample(&self, b: usize) -> Vec<T> {
        let plane = self.plane();
        let mut out = Vec::with_capacity(self.channels() * plane);
        for row in self.data.rows() {
            out.extend_from_slice(&row.as_slice().expect("contiguous")[b * plane..(b + 1) * plane]);
        }
        out
    }
}

/// Named parameter tensors, flattened. Gradients are stored in a second
/// instance of the same network so both enumerate in the same order.
pub trait Parameters<T: Scalar> {
    fn tensors(&self) -> Vec<(String, &[T])>;

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])>;

    fn zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn check_same_layout<T: Scalar>(a: &[(String, &[T])], b: &[(String, &mut [T])]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} tensors vs {}",
            a.len(),
            b.len()
        )));
    }
    for ((na, ta), (nb, tb)) in a.iter().zip(b) {
        if na != nb || ta.len() != tb.len() {
            return Err(Error::ShapeMismatch(format!(
                "{na}[{}] vs {nb}[{}]",
                ta.len(),
                tb.len()
            )));
        }
    }
    Ok(())
}

/// Polyak averaging: `target <- (1 - tau) * target + tau * online`.
pub fn soft_update<T: Scalar, P: Parameters<T>>(target: &mut P, online: &P, tau: f64) -> Result<()> {
    let src = online.tensors();
    let mut dst = target.tensors_mut();
    check_same_layout(&src, &dst)?;
    let tau: T = cast(tau);
    let keep = T::one() - tau;
    for ((_, s), (_, d)) in src.iter().zip(dst.iter_mut()) {
        for (d, &s) in d.iter_mut().zip(s.iter()) {
            *d = keep * *d + tau * s;
        }
    }
    Ok(())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.tensors();
        let mut p = params.tensors_mut();
        check_same_layout(&g, &p)?;
        if self.m.is_empty() {
            self.m = g.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2): (T, T) = (cast(self.beta1), cast(self.beta2));
        let one = T::one();
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step: T = cast(self.lr * c2.sqrt() / c1);
        let eps: T = cast(self.eps * c2.sqrt());
        for (i, ((_, g), (_, p))) in g.iter().zip(p.iter_mut()).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                p[j] = p[j] - step * m[j] / (v[j].sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut Array2<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// `dy *= (y > 0)` where `y` is a ReLU output.
pub(crate) fn relu_backward<T: Scalar>(dy: &mut Array2<T>, y: &Array2<T>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// `[c, n * hw]` maps to a `[n, c * hw]` dense batch (per-sample channel-major).
pub(crate) fn maps_to_dense<T: Scalar>(x: &Maps<T>) -> Array2<T> {
    let (c, hw) = (x.channels(), x.plane());
    let mut out = Array2::zeros((x.n, c * hw));
    let src = x.data.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for b in 0..x.n {
            let s = &src[ci * x.n * hw + b * hw..ci * x.n * hw + (b + 1) * hw];
            dst[b * c * hw + ci * hw..b * c * hw + (ci + 1) * hw].copy_from_slice(s);
        }
    }
    out
}

pub(crate) fn dense_to_maps<T: Scalar>(x: &Array2<T>, c: usize, h: usize, w: usize) -> Maps<T> {
    let n = x.nrows();
    let hw = h * w;
    let mut out = Maps::zeros(c, n, h, w);
    let src = x.as_slice().expect("contiguous");
    let dst = out.data.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for b in 0..n {
            dst[ci * n * hw + b * hw..ci * n * hw + (b + 1) * hw]
                .copy_from_slice(&src[b * c * hw + ci * hw..b * c * hw + (ci + 1) * hw]);
        }
    }
    out
}
