use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::out_side;
use super::{dense_to_maps, maps_to_dense, relu_backward, relu_inplace, Conv2d, Linear, Maps, Parameters, Scalar};
use crate::state::{FRAME_SIDE, STACK};

/// Layer sizes of the Q-network trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QNetworkSpec {
    pub channels: [usize; 3],
    pub kernels: [usize; 3],
    pub strides: [usize; 3],
    pub hidden: usize,
    pub actions: usize,
}

impl QNetworkSpec {
    /// The standard Atari trunk: 32/64/64 channels, 8/4/3 kernels, 4/2/1
    /// strides, no padding, 512 hidden units.
    pub fn standard(actions: usize) -> Self {
        Self {
            channels: [32, 64, 64],
            kernels: [8, 4, 3],
            strides: [4, 2, 1],
            hidden: 512,
            actions,
        }
    }

    pub fn tiny(actions: usize) -> Self {
        Self {
            channels: [2, 2, 2],
            hidden: 8,
            ..Self::standard(actions)
        }
    }

    /// Spatial sides after each convolution for an 84x84 input.
    pub fn sides(&self) -> [usize; 3] {
        let s1 = out_side(FRAME_SIDE, self.kernels[0], self.strides[0]);
        let s2 = out_side(s1, self.kernels[1], self.strides[1]);
        let s3 = out_side(s2, self.kernels[2], self.strides[2]);
        [s1, s2, s3]
    }

    pub fn flat_features(&self) -> usize {
        let s3 = self.sides()[2];
        self.channels[2] * s3 * s3
    }
}

/// conv-relu x3, fc-relu, fc. Input `4 x 84 x 84`, output one value per action.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork<T> {
    pub spec: QNetworkSpec,
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub conv3: Conv2d<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct QTrace<T> {
    col1: Array2<T>,
    h1: Maps<T>,
    col2: Array2<T>,
    h2: Maps<T>,
    col3: Array2<T>,
    h3: Maps<T>,
    flat: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Scalar> QNetwork<T> {
    pub fn new<R: Rng + ?Sized>(spec: QNetworkSpec, rng: &mut R) -> Self {
        let [c1, c2, c3] = spec.channels;
        let [k1, k2, k3] = spec.kernels;
        let [s1, s2, s3] = spec.strides;
        Self {
            spec,
            conv1: Conv2d::new(STACK, c1, k1, s1, rng),
            conv2: Conv2d::new(c1, c2, k2, s2, rng),
            conv3: Conv2d::new(c2, c3, k3, s3, rng),
            fc1: Linear::new(spec.flat_features(), spec.hidden, rng),
            fc2: Linear::new(spec.hidden, spec.actions, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    pub fn forward(&self, x: &Maps<T>) -> (Array2<T>, QTrace<T>) {
        let (mut h1, col1) = self.conv1.forward(x);
        relu_inplace(&mut h1.data);
        let (mut h2, col2) = self.conv2.forward(&h1);
        relu_inplace(&mut h2.data);
        let (mut h3, col3) = self.conv3.forward(&h2);
        relu_inplace(&mut h3.data);
        let flat = maps_to_dense(&h3);
        let mut hidden = self.fc1.forward(&flat);
        relu_inplace(&mut hidden);
        let q = self.fc2.forward(&hidden);
        (
            q,
            QTrace {
                col1,
                h1,
                col2,
                h2,
                col3,
                h3,
                flat,
                hidden,
            },
        )
    }

    pub fn predict(&self, x: &Maps<T>) -> Array2<T> {
        self.forward(x).0
    }

    /// Backpropagate `dq` (`[n, actions]`), accumulating into `grads`.
    pub fn backward(&self, trace: &QTrace<T>, dq: &Array2<T>, grads: &mut Self) {
        let mut dhidden = self.fc2.backward(&trace.hidden, dq, &mut grads.fc2);
        relu_backward(&mut dhidden, &trace.hidden);
        let dflat = self.fc1.backward(&trace.flat, &dhidden, &mut grads.fc1);
        let h3 = &trace.h3;
        let mut dh3 = dense_to_maps(&dflat, h3.channels(), h3.h, h3.w);
        relu_backward(&mut dh3.data, &h3.data);
        let h2 = &trace.h2;
        let mut dh2 = self
            .conv3
            .backward(&trace.col3, &dh3, &mut grads.conv3, Some((h2.n, h2.h, h2.w)))
            .expect("input gradient requested");
        relu_backward(&mut dh2.data, &h2.data);
        let h1 = &trace.h1;
        let mut dh1 = self
            .conv2
            .backward(&trace.col2, &dh2, &mut grads.conv2, Some((h1.n, h1.h, h1.w)))
            .expect("input gradient requested");
        relu_backward(&mut dh1.data, &h1.data);
        self.conv1.backward(&trace.col1, &dh1, &mut grads.conv1, None);
    }
}

impl<T: Scalar> Parameters<T> for QNetwork<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        self.conv1.tensors("conv1", &mut out);
        self.conv2.tensors("conv2", &mut out);
        self.conv3.tensors("conv3", &mut out);
        self.fc1.tensors("fc1", &mut out);
        self.fc2.tensors("fc2", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        self.conv1.tensors_mut("conv1", &mut out);
        self.conv2.tensors_mut("conv2", &mut out);
        self.conv3.tensors_mut("conv3", &mut out);
        self.fc1.tensors_mut("fc1", &mut out);
        self.fc2.tensors_mut("fc2", &mut out);
        out
    }
}
