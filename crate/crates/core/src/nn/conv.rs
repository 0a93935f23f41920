use rand::Rng;

use super::{join, Param};
use crate::error::{Error, Result};
use crate::impl_module;
use crate::tensor::{Scalar, Tensor};

/// 3-D convolution layer with default uniform fan-in initialisation.
pub struct Conv3d<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl_module!(Conv3d { weight, bias });

impl<T: Scalar> Conv3d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel.pow(3);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Param::uniform(join(name, "weight"), &[cout, cin, kernel, kernel, kernel], bound, rng);
        let bias = bias.then(|| Param::uniform(join(name, "bias"), &[cout], bound, rng));
        Self { weight, bias, stride, pad }
    }

    /// 1x1x1 convolution.
    pub fn pointwise<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, bias: bool, rng: &mut R) -> Self {
        Self::new(name, cin, cout, 1, 1, 0, bias, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(x, self.weight.tensor())
    }

    /// Runs the convolution with a substitute weight of the same shape.
    pub(crate) fn forward_with(&self, x: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv3d(weight, self.bias.as_ref().map(|b| b.tensor()), self.stride, self.pad)
    }
}

/// Dense layer `y = x W^T + b` on `[B, in]` inputs.
pub struct Linear<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl_module!(Linear { weight, bias });

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Param::uniform(join(name, "weight"), &[fan_out, fan_in], bound, rng);
        let bias = bias.then(|| Param::uniform(join(name, "bias"), &[fan_out], bound, rng));
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let &[b, n] = x.shape() else {
            return Err(Error::shape("linear", format!("expected [B, in], got {:?}", x.shape())));
        };
        let [out, fan_in] = [self.weight.shape()[0], self.weight.shape()[1]];
        if n != fan_in {
            return Err(Error::shape("linear", format!("{n} inputs for a layer expecting {fan_in}")));
        }
        let w = self.weight.tensor().reshape(&[1, out, fan_in])?;
        let y = x.reshape(&[1, b, n])?.bmm(&w, false, true)?.reshape(&[b, out])?;
        match &self.bias {
            Some(bias) => y.add(bias.tensor()),
            None => Ok(y),
        }
    }
}
