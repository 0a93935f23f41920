use rand::Rng;
use rand_distr::StandardNormal;

use super::{join, Buffer, Conv3d};
use crate::error::{Error, Result};
use crate::impl_module;
use crate::tensor::{estimates_update, Scalar, Tensor};

fn unit(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
    n
}

/// Divides `weight` (viewed as `[out, rest]`) by a power-iteration estimate
/// of its largest singular value. The estimate is a constant for autograd.
///
/// `u` is refined `iterations` times and written back, except inside
/// [`crate::tensor::inference`] where the stored vector is used as is.
pub fn spectral_normalize<T: Scalar>(weight: &Tensor<T>, u: &Buffer<T>, iterations: usize) -> Result<(Tensor<T>, f64)> {
    let rows = *weight.shape().first().ok_or_else(|| Error::invalid("spectral norm of a scalar"))?;
    let cols = weight.numel() / rows;
    if iterations == 0 {
        return Err(Error::invalid("spectral norm needs at least one power iteration"));
    }
    let w: Vec<f64> = weight.to_f64_vec();
    let mut uv: Vec<f64> = u.data.borrow().iter().map(|a| a.f64()).collect();
    if uv.len() != rows {
        return Err(Error::shape("spectral_normalize", format!("u has {} entries for {rows} rows", uv.len())));
    }
    let wt_u = |uv: &[f64]| {
        let mut v = vec![0.0; cols];
        for (r, &ur) in uv.iter().enumerate() {
            for (vc, wc) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += wc * ur;
            }
        }
        v
    };
    let w_v = |v: &[f64]| -> Vec<f64> {
        (0..rows)
            .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    };
    let update = estimates_update();
    let mut v = wt_u(&uv);
    unit(&mut v);
    if update {
        for i in 0..iterations {
            if i > 0 {
                v = wt_u(&uv);
                unit(&mut v);
            }
            uv = w_v(&v);
            unit(&mut uv);
        }
        *u.data.borrow_mut() = uv.iter().map(|&a| T::of(a)).collect();
    }
    let sigma: f64 = w_v(&v).iter().zip(&uv).map(|(a, b)| a * b).sum();
    if !(sigma.abs() >= 1e-12) {
        return Err(Error::NonFinite(format!("spectral norm estimate {sigma:e} is too small")));
    }
    Ok((weight.mul_scalar(1.0 / sigma)?, sigma))
}

pub(crate) fn random_unit<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    unit(&mut v);
    v.into_iter().map(T::of).collect()
}

/// Convolution whose weight is spectrally normalised on every forward pass.
pub struct SpectralConv3d<T: Scalar = f32> {
    pub conv: Conv3d<T>,
    pub u: Buffer<T>,
    pub iterations: usize,
    /// When false the raw weight is used.
    pub enabled: bool,
}

impl_module!(SpectralConv3d { conv, u });

impl<T: Scalar> SpectralConv3d<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, conv: Conv3d<T>, rng: &mut R) -> Self {
        let u = Buffer::new(join(name, "u"), random_unit(conv.out_channels(), rng));
        Self {
            conv,
            u,
            iterations: 1,
            enabled: true,
        }
    }

    pub fn normalized_weight(&self) -> Result<Tensor<T>> {
        if !self.enabled {
            return Ok(self.conv.weight.tensor().clone());
        }
        Ok(spectral_normalize(self.conv.weight.tensor(), &self.u, self.iterations)?.0)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = self.normalized_weight()?;
        self.conv.forward_with(x, &w)
    }
}
