use rand::Rng;

use super::{check_divisible, with_code, Contrast, SegmenterConfig};
use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::LEAKY_SLOPE;
use crate::nn::{join, Conv3d, Norm};
use crate::tensor::{Scalar, Tensor};

struct ConvNormAct<T: Scalar> {
    conv: Conv3d<T>,
    norm: Norm<T>,
}

impl_module!(ConvNormAct { conv, norm });

impl<T: Scalar> ConvNormAct<T> {
    fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv3d::new(&join(name, "conv"), cin, cout, 3, stride, 1, false, rng),
            norm: Norm::instance(&join(name, "norm"), cout),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.norm.forward(&self.conv.forward(x)?)?.leaky_relu(LEAKY_SLOPE)
    }
}

struct Down<T: Scalar> {
    a: ConvNormAct<T>,
    b: ConvNormAct<T>,
}

impl_module!(Down { a, b });

struct Up<T: Scalar> {
    reduce: Conv3d<T>,
    fuse: ConvNormAct<T>,
}

impl_module!(Up { reduce, fuse });

/// Plain 3-D U-Net producing single-channel tumour logits.
pub struct Segmenter<T: Scalar = f32> {
    pub config: SegmenterConfig,
    in_channels: usize,
    stem: ConvNormAct<T>,
    down: Vec<Down<T>>,
    up: Vec<Up<T>>,
    out: Conv3d<T>,
}

impl_module!(Segmenter { stem, down, up, out });

impl<T: Scalar> Segmenter<T> {
    /// `in_channels` is 4 for both the conditional variant (volume + code)
    /// and the multi-contrast variant.
    pub fn new<R: Rng + ?Sized>(config: &SegmenterConfig, in_channels: usize, rng: &mut R) -> Result<Self> {
        if config.levels == 0 || config.base_width == 0 || in_channels == 0 {
            return Err(Error::invalid("segmenter needs positive levels, width and inputs"));
        }
        let widths: Vec<usize> = (0..config.levels).map(|i| config.base_width << i).collect();
        let stem = ConvNormAct::new("seg.stem", in_channels, widths[0], 1, rng);
        let mut down = Vec::new();
        for i in 1..config.levels {
            let name = format!("seg.down{i}");
            down.push(Down {
                a: ConvNormAct::new(&join(&name, "a"), widths[i - 1], widths[i], 2, rng),
                b: ConvNormAct::new(&join(&name, "b"), widths[i], widths[i], 1, rng),
            });
        }
        let mut up = Vec::new();
        for i in (0..config.levels - 1).rev() {
            let name = format!("seg.up{i}");
            up.push(Up {
                reduce: Conv3d::pointwise(&join(&name, "reduce"), widths[i + 1], widths[i], true, rng),
                fuse: ConvNormAct::new(&join(&name, "fuse"), 2 * widths[i], widths[i], 1, rng),
            });
        }
        Ok(Self {
            config: config.clone(),
            in_channels,
            stem,
            down,
            up,
            out: Conv3d::pointwise("seg.out", widths[0], 1, true, rng),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn divisor(&self) -> usize {
        1 << (self.config.levels - 1)
    }

    /// Logits for an arbitrary `[B, in_channels, D, H, W]` input.
    pub fn forward_raw(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, d, h, w] = x.dims5()?;
        if c != self.in_channels {
            return Err(Error::shape("segmenter", format!("expects {} channels, got {c}", self.in_channels)));
        }
        check_divisible([d, h, w], self.divisor(), "segmenter")?;
        let mut skips = vec![self.stem.forward(x)?];
        for stage in &self.down {
            let prev = skips.last().unwrap();
            skips.push(stage.b.forward(&stage.a.forward(prev)?)?);
        }
        let mut hcur = skips.pop().unwrap();
        for stage in &self.up {
            let skip = skips.pop().unwrap();
            let [_, _, d, h, w] = skip.dims5()?;
            let u = stage.reduce.forward(&hcur.upsample_trilinear([d, h, w])?)?;
            hcur = stage.fuse.forward(&Tensor::concat(&[&u, &skip], 1)?)?;
        }
        self.out.forward(&hcur)
    }

    /// Conditional use: a single contrast volume plus its code.
    pub fn forward(&self, y: &Tensor<T>, codes: &[Contrast]) -> Result<Tensor<T>> {
        self.forward_raw(&with_code(y, codes)?)
    }
}
