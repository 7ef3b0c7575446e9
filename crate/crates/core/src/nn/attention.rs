//! Networks that emit an 84x84 saliency map: a standalone attention
//! predictor, and a Q-network with a multiplicative spatial gate whose
//! activations are read out as the agent's own saliency.

use ndarray::{Array2, Axis};
use rand::Rng;

use super::{maps_to_dense, dense_to_maps, relu_backward, relu_inplace, sigmoid, Conv2d, ConvTranspose2d, Linear, Maps, Parameters, QNetworkSpec, Scalar};
use crate::state::STACK;

/// Two strided convolutions followed by two transposed convolutions that
/// mirror them back to 84x84, squashed by a logistic.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionNet<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub up2: ConvTranspose2d<T>,
    pub up1: ConvTranspose2d<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionTrace<T> {
    col1: Array2<T>,
    h1: Maps<T>,
    col2: Array2<T>,
    h2: Maps<T>,
    u2: Maps<T>,
    /// Output map, `[1, n * 84 * 84]`.
    pub map: Maps<T>,
}

impl<T: Scalar> AttentionNet<T> {
    pub fn new<R: Rng + ?Sized>(spec: QNetworkSpec, rng: &mut R) -> Self {
        let [c1, c2, _] = spec.channels;
        let [k1, k2, _] = spec.kernels;
        let [s1, s2, _] = spec.strides;
        Self {
            conv1: Conv2d::new(STACK, c1, k1, s1, rng),
            conv2: Conv2d::new(c1, c2, k2, s2, rng),
            up2: ConvTranspose2d::new(c2, c1, k2, s2, rng),
            up1: ConvTranspose2d::new(c1, 1, k1, s1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    pub fn forward(&self, x: &Maps<T>) -> AttentionTrace<T> {
        let (mut h1, col1) = self.conv1.forward(x);
        relu_inplace(&mut h1.data);
        let (mut h2, col2) = self.conv2.forward(&h1);
        relu_inplace(&mut h2.data);
        let mut u2 = self.up2.forward(&h2);
        relu_inplace(&mut u2.data);
        let mut map = self.up1.forward(&u2);
        map.data.mapv_inplace(sigmoid);
        AttentionTrace {
            col1,
            h1,
            col2,
            h2,
            u2,
            map,
        }
    }

    pub fn predict(&self, x: &Maps<T>) -> Maps<T> {
        self.forward(x).map
    }

    /// `dmap` is the gradient with respect to the squashed output map.
    pub fn backward(&self, trace: &AttentionTrace<T>, dmap: &Maps<T>, grads: &mut Self) {
        let mut dlogit = dmap.clone();
        ndarray::Zip::from(&mut dlogit.data)
            .and(&trace.map.data)
            .for_each(|d, &m| *d *= m * (T::one() - m));
        let mut du2 = self
            .up1
            .backward(&trace.u2, &dlogit, &mut grads.up1, true)
            .expect("input gradient requested");
        relu_backward(&mut du2.data, &trace.u2.data);
        let mut dh2 = self
            .up2
            .backward(&trace.h2, &du2, &mut grads.up2, true)
            .expect("input gradient requested");
        relu_backward(&mut dh2.data, &trace.h2.data);
        let h1 = &trace.h1;
        let mut dh1 = self
            .conv2
            .backward(&trace.col2, &dh2, &mut grads.conv2, Some((h1.n, h1.h, h1.w)))
            .expect("input gradient requested");
        relu_backward(&mut dh1.data, &h1.data);
        self.conv1.backward(&trace.col1, &dh1, &mut grads.conv1, None);
    }
}

impl<T: Scalar> Parameters<T> for AttentionNet<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        self.conv1.tensors("conv1", &mut out);
        self.conv2.tensors("conv2", &mut out);
        self.up2.tensors("up2", &mut out);
        self.up1.tensors("up1", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        self.conv1.tensors_mut("conv1", &mut out);
        self.conv2.tensors_mut("conv2", &mut out);
        self.up2.tensors_mut("up2", &mut out);
        self.up1.tensors_mut("up1", &mut out);
        out
    }
}

/// Channels of the hidden readout layer that upsamples gate activations.
const READOUT_CHANNELS: usize = 8;

/// Q-network with a logistic spatial gate after the second convolution.
/// The gate multiplies every conv-2 feature map; a two-stage transposed
/// convolution of the gate yields an 84x84 saliency map in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct GatedQNetwork<T> {
    pub spec: QNetworkSpec,
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub gate: Conv2d<T>,
    pub conv3: Conv2d<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub read2: ConvTranspose2d<T>,
    pub read1: ConvTranspose2d<T>,
}

#[derive(Debug, Clone)]
pub struct GatedTrace<T> {
    col1: Array2<T>,
    h1: Maps<T>,
    col2: Array2<T>,
    h2: Maps<T>,
    gate_col: Array2<T>,
    gate: Maps<T>,
    gated: Maps<T>,
    col3: Array2<T>,
    h3: Maps<T>,
    flat: Array2<T>,
    hidden: Array2<T>,
    r2: Maps<T>,
    /// Agent saliency, `[1, n * 84 * 84]`.
    pub saliency: Maps<T>,
}

impl<T: Scalar> GatedQNetwork<T> {
    pub fn new<R: Rng + ?Sized>(spec: QNetworkSpec, rng: &mut R) -> Self {
        let [c1, c2, c3] = spec.channels;
        let [k1, k2, k3] = spec.kernels;
        let [s1, s2, s3] = spec.strides;
        Self {
            spec,
            conv1: Conv2d::new(STACK, c1, k1, s1, rng),
            conv2: Conv2d::new(c1, c2, k2, s2, rng),
            gate: Conv2d::new(c2, 1, 1, 1, rng),
            conv3: Conv2d::new(c2, c3, k3, s3, rng),
            fc1: Linear::new(spec.flat_features(), spec.hidden, rng),
            fc2: Linear::new(spec.hidden, spec.actions, rng),
            read2: ConvTranspose2d::new(1, READOUT_CHANNELS, k2, s2, rng),
            read1: ConvTranspose2d::new(READOUT_CHANNELS, 1, k1, s1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    pub fn forward(&self, x: &Maps<T>) -> (Array2<T>, GatedTrace<T>) {
        let (mut h1, col1) = self.conv1.forward(x);
        relu_inplace(&mut h1.data);
        let (mut h2, col2) = self.conv2.forward(&h1);
        relu_inplace(&mut h2.data);
        let (mut gate, gate_col) = self.gate.forward(&h2);
        gate.data.mapv_inplace(sigmoid);
        let mut gated = h2.clone();
        gated.data *= &gate.data.row(0);
        let (mut h3, col3) = self.conv3.forward(&gated);
        relu_inplace(&mut h3.data);
        let flat = maps_to_dense(&h3);
        let mut hidden = self.fc1.forward(&flat);
        relu_inplace(&mut hidden);
        let q = self.fc2.forward(&hidden);
        let mut r2 = self.read2.forward(&gate);
        relu_inplace(&mut r2.data);
        let mut saliency = self.read1.forward(&r2);
        saliency.data.mapv_inplace(sigmoid);
        (
            q,
            GatedTrace {
                col1,
                h1,
                col2,
                h2,
                gate_col,
                gate,
                gated,
                col3,
                h3,
                flat,
                hidden,
                r2,
                saliency,
            },
        )
    }

    pub fn predict(&self, x: &Maps<T>) -> Array2<T> {
        self.forward(x).0
    }

    /// Backpropagate gradients of the Q-values and (optionally) the saliency map.
    pub fn backward(&self, trace: &GatedTrace<T>, dq: &Array2<T>, dsaliency: Option<&Maps<T>>, grads: &mut Self) {
        let mut dhidden = self.fc2.backward(&trace.hidden, dq, &mut grads.fc2);
        relu_backward(&mut dhidden, &trace.hidden);
        let dflat = self.fc1.backward(&trace.flat, &dhidden, &mut grads.fc1);
        let h3 = &trace.h3;
        let mut dh3 = dense_to_maps(&dflat, h3.channels(), h3.h, h3.w);
        relu_backward(&mut dh3.data, &h3.data);
        let g = &trace.gated;
        let dgated = self
            .conv3
            .backward(&trace.col3, &dh3, &mut grads.conv3, Some((g.n, g.h, g.w)))
            .expect("input gradient requested");

        // gated = h2 * gate (broadcast over channels)
        let gate_row = trace.gate.data.row(0);
        let mut dh2 = dgated.clone();
        dh2.data *= &gate_row;
        let mut dgate = Maps::zeros(1, g.n, g.h, g.w);
        let prod = &dgated.data * &trace.h2.data;
        dgate.data.row_mut(0).assign(&prod.sum_axis(Axis(0)));

        if let Some(ds) = dsaliency {
            let mut dlogit = ds.clone();
            ndarray::Zip::from(&mut dlogit.data)
                .and(&trace.saliency.data)
                .for_each(|d, &s| *d *= s * (T::one() - s));
            let mut dr2 = self
                .read1
                .backward(&trace.r2, &dlogit, &mut grads.read1, true)
                .expect("input gradient requested");
            relu_backward(&mut dr2.data, &trace.r2.data);
            let dg = self
                .read2
                .backward(&trace.gate, &dr2, &mut grads.read2, true)
                .expect("input gradient requested");
            dgate.data += &dg.data;
        }

        ndarray::Zip::from(&mut dgate.data)
            .and(&trace.gate.data)
            .for_each(|d, &s| *d *= s * (T::one() - s));
        let h2 = &trace.h2;
        let dh2_gate = self
            .gate
            .backward(&trace.gate_col, &dgate, &mut grads.gate, Some((h2.n, h2.h, h2.w)))
            .expect("input gradient requested");
        dh2.data += &dh2_gate.data;
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

impl<T: Scalar> Parameters<T> for GatedQNetwork<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        self.conv1.tensors("conv1", &mut out);
        self.conv2.tensors("conv2", &mut out);
        self.gate.tensors("gate", &mut out);
        self.conv3.tensors("conv3", &mut out);
        self.fc1.tensors("fc1", &mut out);
        self.fc2.tensors("fc2", &mut out);
        self.read2.tensors("read2", &mut out);
        self.read1.tensors("read1", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        self.conv1.tensors_mut("conv1", &mut out);
        self.conv2.tensors_mut("conv2", &mut out);
        self.gate.tensors_mut("gate", &mut out);
        self.conv3.tensors_mut("conv3", &mut out);
        self.fc1.tensors_mut("fc1", &mut out);
        self.fc2.tensors_mut("fc2", &mut out);
        self.read2.tensors_mut("read2", &mut out);
        self.read1.tensors_mut("read1", &mut out);
        out
    }
}
