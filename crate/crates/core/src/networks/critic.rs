use rand::Rng;

use super::CriticConfig;
use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::LEAKY_SLOPE;
use crate::nn::{Conv3d, Linear, SpectralConv3d};
use crate::tensor::{Scalar, Tensor};

/// Patch critic over `(target || source)` pairs with a contrast classifier
/// sharing the trunk.
pub struct Critic<T: Scalar = f32> {
    pub trunk: Vec<SpectralConv3d<T>>,
    pub realism: SpectralConv3d<T>,
    pub classifier: Linear<T>,
}

impl_module!(Critic { trunk, realism, classifier });

impl<T: Scalar> Critic<T> {
    pub fn new<R: Rng + ?Sized>(config: &CriticConfig, rng: &mut R) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::invalid("critic needs at least one strided layer"));
        }
        let mut trunk = Vec::new();
        let mut cin = 2;
        for (i, &c) in config.widths.iter().enumerate() {
            let name = format!("critic.down{i}");
            let conv = Conv3d::new(&name, cin, c, 4, 2, 1, true, rng);
            trunk.push(SpectralConv3d::new(&name, conv, rng));
            cin = c;
        }
        let realism = SpectralConv3d::new("critic.realism", Conv3d::new("critic.realism", cin, 1, 3, 1, 1, true, rng), rng);
        let classifier = Linear::new("critic.cls", cin, 3, true, rng);
        Ok(Self { trunk, realism, classifier })
    }

    pub fn features(&self, y: &Tensor<T>, x_s: &Tensor<T>) -> Result<Tensor<T>> {
        if y.shape() != x_s.shape() || y.rank() != 5 || y.shape()[1] != 1 {
            return Err(Error::shape("critic", format!("target {:?} vs source {:?}", y.shape(), x_s.shape())));
        }
        let mut h = Tensor::concat(&[y, x_s], 1)?;
        for conv in &self.trunk {
            h = conv.forward(&h)?.leaky_relu(LEAKY_SLOPE)?;
        }
        Ok(h)
    }

    /// Patch realism map `[B, 1, d, h, w]` and class logits `[B, 3]`.
    pub fn forward(&self, y: &Tensor<T>, x_s: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let h = self.features(y, x_s)?;
        Ok((self.realism.forward(&h)?, self.classifier.forward(&h.global_avg_pool()?)?))
    }

    /// Realism map only, skipping the classifier.
    pub fn realism_map(&self, y: &Tensor<T>, x_s: &Tensor<T>) -> Result<Tensor<T>> {
        self.realism.forward(&self.features(y, x_s)?)
    }

    /// Per-sample score: spatial mean of the realism map, `[B]`.
    pub fn score(map: &Tensor<T>) -> Result<Tensor<T>> {
        let b = map.shape()[0];
        map.mean_axes(&[1, 2, 3, 4], false)?.reshape(&[b])
    }

    pub fn set_spectral_iterations(&mut self, n: usize) {
        for c in self.trunk.iter_mut().chain(std::iter::once(&mut self.realism)) {
            c.iterations = n;
        }
    }

}
