//! Residual blocks, squeeze-and-excitation gating and attention-gated skips.

use rand::Rng;

use crate::error::{Error, Result};
use crate::impl_module;
use crate::nn::{join, Conv3d, Norm, NormKind};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// `y = proj(x) + norm(conv(lrelu(norm(conv(x)))))`, with `proj` a 1x1x1
/// convolution when the channel count changes and the identity otherwise.
pub struct ResidualBlock<T: Scalar = f32> {
    pub conv1: Conv3d<T>,
    pub norm1: Norm<T>,
    pub conv2: Conv3d<T>,
    pub norm2: Norm<T>,
    pub proj: Option<Conv3d<T>>,
}

impl_module!(ResidualBlock { conv1, norm1, conv2, norm2, proj });

impl<T: Scalar> ResidualBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, norm: NormKind, rng: &mut R) -> Self {
        let make_norm = |n: &str| match norm {
            NormKind::Instance => Norm::instance(&join(name, n), cout),
            NormKind::Group(g) => Norm::group(&join(name, n), cout, g),
        };
        Self {
            conv1: Conv3d::new(&join(name, "conv1"), cin, cout, 3, 1, 1, false, rng),
            norm1: make_norm("norm1"),
            conv2: Conv3d::new(&join(name, "conv2"), cout, cout, 3, 1, 1, false, rng),
            norm2: make_norm("norm2"),
            proj: (cin != cout).then(|| Conv3d::pointwise(&join(name, "proj"), cin, cout, true, rng)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let cin = self.conv1.in_channels();
        if x.rank() != 5 || x.shape()[1] != cin {
            return Err(Error::shape("residual", format!("block expects {cin} channels, got {:?}", x.shape())));
        }
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.leaky_relu(LEAKY_SLOPE)?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        let skip = match &self.proj {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        skip.add(&h)
    }
}

/// Channel gate `s(x) = sigmoid(W2 relu(W1 GAP(x)))`.
pub struct SEGate<T: Scalar = f32> {
    pub w1: Conv3d<T>,
    pub w2: Conv3d<T>,
}

impl_module!(SEGate { w1, w2 });

/// Reduced width `max(C / r, 8)`.
pub fn reduced_width(channels: usize, r: usize) -> usize {
    (channels / r.max(1)).max(8)
}

impl<T: Scalar> SEGate<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, reduced: usize, rng: &mut R) -> Self {
        Self {
            w1: Conv3d::pointwise(&join(name, "w1"), channels, reduced, true, rng),
            w2: Conv3d::pointwise(&join(name, "w2"), reduced, channels, true, rng),
        }
    }

    /// Gate values, shape `[B, C, 1, 1, 1]`.
    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = x.mean_axes(&[2, 3, 4], true)?;
        self.w2.forward(&self.w1.forward(&z)?.relu()?)?.sigmoid()
    }

    /// `x * s(x)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.mul(&self.gate(x)?)
    }
}

/// Voxel-wise sigmoid gate on encoder skip features driven by a decoder
/// gating signal.
pub struct AttentionGate<T: Scalar = f32> {
    pub w_gate: Conv3d<T>,
    pub w_skip: Conv3d<T>,
    pub psi: Conv3d<T>,
}

impl_module!(AttentionGate { w_gate, w_skip, psi });

impl<T: Scalar> AttentionGate<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, skip_channels: usize, gate_channels: usize, rng: &mut R) -> Self {
        let inter = (skip_channels / 2).max(4);
        Self {
            w_gate: Conv3d::pointwise(&join(name, "w_gate"), gate_channels, inter, true, rng),
            w_skip: Conv3d::pointwise(&join(name, "w_skip"), skip_channels, inter, false, rng),
            psi: Conv3d::pointwise(&join(name, "psi"), inter, 1, true, rng),
        }
    }

    /// The single-channel map `a` in (0, 1), at the skip's resolution.
    pub fn map(&self, skip: &Tensor<T>, gating: &Tensor<T>) -> Result<Tensor<T>> {
        let [bs, _, d, h, w] = skip.dims5()?;
        let [bg, ..] = gating.dims5()?;
        if bs != bg {
            return Err(Error::shape("attention_gate", format!("batch {bs} vs gating batch {bg}")));
        }
        let gating = if gating.shape()[2..] != skip.shape()[2..] {
            gating.upsample_trilinear([d, h, w])?
        } else {
            gating.clone()
        };
        let fused = self.w_gate.forward(&gating)?.add(&self.w_skip.forward(skip)?)?.relu()?;
        self.psi.forward(&fused)?.sigmoid()
    }

    pub fn forward(&self, skip: &Tensor<T>, gating: &Tensor<T>) -> Result<Tensor<T>> {
        skip.mul(&self.map(skip, gating)?)
    }
}
