use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FeatureConfig;
use crate::error::{Error, Result};
use crate::impl_module;
use crate::nn::{join, Conv3d, Module, Param};
use crate::tensor::{Scalar, Tensor};

struct Stage<T: Scalar> {
    down: Conv3d<T>,
    conv1: Conv3d<T>,
    conv2: Conv3d<T>,
}

impl_module!(Stage { down, conv1, conv2 });

impl<T: Scalar> Stage<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.down.forward(x)?.relu()?;
        let r = self.conv2.forward(&self.conv1.forward(&h)?.relu()?)?;
        h.add(&r)?.relu()
    }
}

/// Frozen four-stage residual encoder used by the perceptual loss and the
/// Frechet distance. Weights come from a fixed seed unless loaded.
pub struct FeatureExtractor<T: Scalar = f32> {
    stem: Conv3d<T>,
    stages: Vec<Stage<T>>,
}

impl_module!(FeatureExtractor { stem, stages });

/// Smallest accepted spatial extent.
pub const MIN_FEATURE_DIM: usize = 8;

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(config: &FeatureConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.widths;
        let stem = Conv3d::new("feat.stem", 1, w[0], 3, 2, 1, true, &mut rng);
        let mut cin = w[0];
        let mut stages = Vec::new();
        for (i, &c) in w.iter().enumerate() {
            let name = format!("feat.stage{}", i + 1);
            stages.push(Stage {
                down: Conv3d::new(&join(&name, "down"), cin, c, 3, 2, 1, true, &mut rng),
                conv1: Conv3d::new(&join(&name, "conv1"), c, c, 3, 1, 1, true, &mut rng),
                conv2: Conv3d::new(&join(&name, "conv2"), c, c, 3, 1, 1, true, &mut rng),
            });
            cin = c;
        }
        let mut fx = Self { stem, stages };
        // He-style scale so activations neither vanish nor explode through
        // the relu stack.
        fx.visit_params_mut(&mut |p| {
            if p.name.ends_with("weight") {
                let scale = T::of(6f64.sqrt());
                let data: Vec<T> = p.tensor().data().iter().map(|&v| v * scale).collect();
                p.set_data(data).expect("same length");
            }
            p.set_trainable(false);
        });
        fx
    }

    /// Replaces the weights by name; every parameter must be provided.
    pub fn load_weights(&mut self, weights: &[(String, Vec<T>)]) -> Result<()> {
        let mut missing = Vec::new();
        let mut result = Ok(());
        self.visit_params_mut(&mut |p: &mut Param<T>| match weights.iter().find(|(n, _)| *n == p.name) {
            Some((_, data)) => {
                if result.is_ok() {
                    result = p.set_data(data.clone());
                }
            }
            None => missing.push(p.name.clone()),
        });
        result?;
        if !missing.is_empty() {
            return Err(Error::Format(format!("feature weights missing: {}", missing.join(", "))));
        }
        Ok(())
    }

    /// The four stage outputs, at strides 4, 8, 16 and 32 (clamped at one
    /// voxel).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let [_, c, d, h, w] = x.dims5()?;
        if c != 1 || [d, h, w].iter().any(|&n| n < MIN_FEATURE_DIM) {
            return Err(Error::shape(
                "features",
                format!("expected [B, 1, D, H, W] with D, H, W >= {MIN_FEATURE_DIM}, got {:?}", x.shape()),
            ));
        }
        let mut hcur = self.stem.forward(x)?.relu()?;
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            hcur = stage.forward(&hcur)?;
            out.push(hcur.clone());
        }
        Ok(out)
    }

    /// Globally pooled final-stage features, `[B, C4]`.
    pub fn pooled(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)?.pop().unwrap().global_avg_pool()
    }
}
