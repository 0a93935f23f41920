use super::{join, Param};
use crate::error::{Error, Result};
use crate::impl_module;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Instance,
    /// Group normalisation with this many groups.
    Group(usize),
}

/// Zero-mean, unit-variance normalisation over each (sample, group) slab of
/// a `[B, C, ...]` tensor, without affine parameters.
pub fn normalize<T: Scalar>(x: &Tensor<T>, kind: NormKind, eps: f64) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    if shape.len() < 3 {
        return Err(Error::shape("normalize", format!("expected [B, C, ...], got {:?}", shape)));
    }
    let (b, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    if spatial == 0 {
        return Err(Error::shape("normalize", "zero spatial extent".to_string()));
    }
    let groups = match kind {
        NormKind::Instance => c,
        NormKind::Group(g) => {
            if g == 0 || c % g != 0 {
                return Err(Error::shape("normalize", format!("{c} channels not divisible into {g} groups")));
            }
            g
        }
    };
    let xg = x.reshape(&[b, groups, (c / groups) * spatial])?;
    let mean = xg.mean_axes(&[2], true)?;
    let centred = xg.sub(&mean)?;
    let var = centred.square()?.mean_axes(&[2], true)?;
    let y = centred.div(&var.add_scalar(eps)?.sqrt()?)?;
    y.reshape(&shape)
}

/// Instance or group normalisation with a per-channel affine transform.
pub struct Norm<T: Scalar = f32> {
    pub kind: NormKind,
    pub eps: f64,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl_module!(Norm { weight, bias });

impl<T: Scalar> Norm<T> {
    pub fn new(name: &str, channels: usize, kind: NormKind) -> Self {
        Self {
            kind,
            eps: 1e-5,
            weight: Param::new(join(name, "weight"), Tensor::ones(&[channels]).requires_grad_(true)),
            bias: Param::new(join(name, "bias"), Tensor::zeros(&[channels]).requires_grad_(true)),
        }
    }

    pub fn instance(name: &str, channels: usize) -> Self {
        Self::new(name, channels, NormKind::Instance)
    }

    /// Group norm with `groups` groups, or one group per channel when there
    /// are fewer channels than that.
    pub fn group(name: &str, channels: usize, groups: usize) -> Self {
        let g = if channels < groups { channels } else { groups };
        Self::new(name, channels, NormKind::Group(g))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = normalize(x, self.kind, self.eps)?;
        let c = x.shape()[1];
        let mut bshape = vec![1; x.rank()];
        bshape[1] = c;
        y.mul(&self.weight.tensor().reshape(&bshape)?)?
            .add(&self.bias.tensor().reshape(&bshape)?)
    }
}
