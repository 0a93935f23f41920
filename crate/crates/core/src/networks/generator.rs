use rand::Rng;

use super::{check_divisible, with_code, Contrast, GeneratorConfig};
use crate::attention::{Attention, AttentionBudget};
use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::{AttentionGate, ResidualBlock, LEAKY_SLOPE};
use crate::nn::{join, Conv3d, Norm, NormKind};
use crate::tensor::{Scalar, Tensor};

struct EncoderStage<T: Scalar> {
    down: Conv3d<T>,
    norm: Norm<T>,
    res: ResidualBlock<T>,
    attn: Attention<T>,
}

impl_module!(EncoderStage { down, norm, res, attn });

impl<T: Scalar> EncoderStage<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm.forward(&self.down.forward(x)?)?.leaky_relu(LEAKY_SLOPE)?;
        self.attn.forward(&self.res.forward(&h)?)
    }
}

struct DecoderStage<T: Scalar> {
    up: Conv3d<T>,
    norm: Norm<T>,
    gate: AttentionGate<T>,
    res: ResidualBlock<T>,
    attn: Attention<T>,
}

impl_module!(DecoderStage { up, norm, gate, res, attn });

impl<T: Scalar> DecoderStage<T> {
    fn forward(&self, x: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, d, h, w] = skip.dims5()?;
        let u = x.upsample_trilinear([d, h, w])?;
        let u = self.norm.forward(&self.up.forward(&u)?)?.leaky_relu(LEAKY_SLOPE)?;
        let gated = self.gate.forward(skip, &u)?;
        let h = self.res.forward(&Tensor::concat(&[&u, &gated], 1)?)?;
        self.attn.forward(&h)
    }
}

struct Bottleneck<T: Scalar> {
    res: ResidualBlock<T>,
}

impl_module!(Bottleneck { res });

/// Domain-conditioned 3-D attention U-Net mapping a source volume and a
/// contrast code to a synthetic target volume in [-1, 1].
pub struct Generator<T: Scalar = f32> {
    pub config: GeneratorConfig,
    encoder: Vec<EncoderStage<T>>,
    bottleneck: Vec<Bottleneck<T>>,
    bottleneck_attn: Attention<T>,
    decoder: Vec<DecoderStage<T>>,
    head_mix: Conv3d<T>,
    head_out: Conv3d<T>,
}

impl_module!(Generator { encoder, bottleneck, bottleneck_attn, decoder, head_mix, head_out });

const INPUT_CHANNELS: usize = 4;

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: &GeneratorConfig, budget: AttentionBudget, rng: &mut R) -> Result<Self> {
        config.validate()?;
        budget.validate()?;
        let w = &config.widths;
        let n = w.len();
        let mut encoder = Vec::with_capacity(n);
        let mut cin = INPUT_CHANNELS;
        for (i, &c) in w.iter().enumerate() {
            let name = format!("enc{i}");
            encoder.push(EncoderStage {
                down: Conv3d::new(&join(&name, "down"), cin, c, 3, 2, 1, false, rng),
                norm: Norm::instance(&join(&name, "norm"), c),
                res: ResidualBlock::new(&join(&name, "res"), c, c, NormKind::Instance, rng),
                attn: Attention::new(&join(&name, "attn"), config.encoder_attention[i], c, budget, rng),
            });
            cin = c;
        }
        let deep = w[n - 1];
        let bottleneck = (0..config.bottleneck_blocks)
            .map(|i| Bottleneck {
                res: ResidualBlock::new(&format!("bottleneck{i}"), deep, deep, NormKind::Group(config.groups), rng),
            })
            .collect();
        let bottleneck_attn = Attention::new("bottleneck_attn", config.bottleneck_attention, deep, budget, rng);
        let mut decoder = Vec::with_capacity(n - 1);
        for (j, i) in (0..n - 1).rev().enumerate() {
            let name = format!("dec{i}");
            let (cin, c) = (w[i + 1], w[i]);
            decoder.push(DecoderStage {
                up: Conv3d::new(&join(&name, "up"), cin, c, 3, 1, 1, false, rng),
                norm: Norm::instance(&join(&name, "norm"), c),
                gate: AttentionGate::new(&join(&name, "gate"), c, c, rng),
                res: ResidualBlock::new(&join(&name, "res"), 2 * c, c, NormKind::Instance, rng),
                attn: Attention::new(&join(&name, "attn"), config.decoder_attention[j], c, budget, rng),
            });
        }
        let head_in = w[0] + INPUT_CHANNELS;
        Ok(Self {
            config: config.clone(),
            encoder,
            bottleneck,
            bottleneck_attn,
            decoder,
            head_mix: Conv3d::pointwise("head.mix", head_in, config.head_width, true, rng),
            head_out: Conv3d::pointwise("head.out", config.head_width, 1, true, rng),
        })
    }

    /// `x_s`: `[B, 1, D, H, W]`, one contrast per sample.
    pub fn forward(&self, x_s: &Tensor<T>, codes: &[Contrast]) -> Result<Tensor<T>> {
        let [b, c, d, h, w] = x_s.dims5()?;
        if c != 1 || b != codes.len() {
            return Err(Error::shape(
                "generator",
                format!("expected [{}, 1, D, H, W], got {:?}", codes.len(), x_s.shape()),
            ));
        }
        check_divisible([d, h, w], self.config.divisor(), "generator")?;
        let input = with_code(x_s, codes)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut hcur = input.clone();
        for stage in &self.encoder {
            hcur = stage.forward(&hcur)?;
            skips.push(hcur.clone());
        }
        for block in &self.bottleneck {
            hcur = block.res.forward(&hcur)?;
        }
        hcur = self.bottleneck_attn.forward(&hcur)?;
        for (stage, skip) in self.decoder.iter().zip(skips.iter().rev().skip(1)) {
            hcur = stage.forward(&hcur, skip)?;
        }
        let up = hcur.upsample_trilinear([d, h, w])?;
        let mixed = self.head_mix.forward(&Tensor::concat(&[&up, &input], 1)?)?.leaky_relu(LEAKY_SLOPE)?;
        self.head_out.forward(&mixed)?.tanh()
    }
}
