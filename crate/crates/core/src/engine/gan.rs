use log::info;
use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointHeader, RngState};
use super::{sample_contrast, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, critic_total, critic_wgan_loss, generator_adv_loss, generator_total, gradient_penalty_at,
    msssim_loss, perceptual_loss, reconstruction_loss, seg_consistency_loss, GeneratorParts, LossReport, SsimConfig,
    PERCEPTUAL_WEIGHTS,
};
use crate::networks::{Contrast, Critic, FeatureExtractor, Generator, Segmenter};
use crate::nn::ModuleExt;
use crate::optim::Adam;
use crate::tensor::{frozen_estimates, inference, no_grad, Tensor};

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Generator steps completed, this one included.
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    /// Critic updates made during this step.
    pub critic_updates: usize,
    pub critic: Vec<LossReport>,
    pub generator: LossReport,
    /// `mean score(real) - mean score(fake)` of the last critic update.
    pub wasserstein: f64,
    pub val_masked_l1: Option<f64>,
}

/// Renames a numeric failure after the loss term that produced it.
fn term<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("loss term `{name}`: {m}")),
        e => e,
    })
}

/// Generator, critic and optimiser state of an adversarial run.
pub struct GanTrainer {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub critic: Critic<f32>,
    pub segmenter: Option<Segmenter<f32>>,
    /// Four-channel segmenter carried along for evaluation.
    pub downstream: Option<Segmenter<f32>>,
    pub extractor: FeatureExtractor<f32>,
    g_opt: Adam<f32>,
    c_opt: Adam<f32>,
    rng: ChaCha8Rng,
    step: u64,
    epoch: usize,
    ssim: SsimConfig,
}

impl GanTrainer {
    pub fn new(config: TrainConfig, segmenter: Option<Segmenter<f32>>) -> Result<Self> {
        config.validate()?;
        if let Some(s) = &segmenter {
            s.ensure_frozen(None)?;
        } else if config.effective_weights().seg > 0.0 {
            return Err(Error::invalid("segmentation consistency needs a pretrained segmenter"));
        }
        let arch = config.effective_arch();
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        init.set_stream(INIT_STREAM);
        let generator = Generator::new(&arch.generator, arch.budget, &mut init)?;
        let critic = Critic::new(&arch.critic, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            generator,
            critic,
            segmenter,
            downstream: None,
            extractor: FeatureExtractor::new(&arch.features),
            g_opt: Adam::new(config.adam),
            c_opt: Adam::new(config.adam),
            rng,
            step: 0,
            epoch: 0,
            ssim: SsimConfig::default(),
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn critic_updates(&self) -> u64 {
        self.c_opt.step_count()
    }

    pub fn generator_updates(&self) -> u64 {
        self.g_opt.step_count()
    }

    fn draw(&mut self, n: usize) -> Result<(Vec<usize>, Vec<Contrast>)> {
        let b = self.config.batch_size;
        if n < b {
            return Err(Error::Data(format!("training set of {n} is smaller than the batch size {b}")));
        }
        let idx = index::sample(&mut self.rng, n, b).into_vec();
        let codes = (0..b).map(|_| sample_contrast(&mut self.rng)).collect();
        Ok((idx, codes))
    }

    fn critic_update(&mut self, train: &Dataset) -> Result<(LossReport, f64)> {
        let (idx, codes) = self.draw(train.len())?;
        let b = train.batch(&idx, &codes)?;
        let fake = inference(|| self.generator.forward(&b.source, &codes))?;
        let critic = &self.critic;
        let (map_r, logits_r) = term("critic real", critic.forward(&b.target, &b.source))?;
        let map_f = term("critic fake", critic.realism_map(&fake, &b.source))?;
        let wgan = term("wgan", critic_wgan_loss(&Critic::score(&map_f)?, &Critic::score(&map_r)?))?;
        let u: Vec<f64> = (0..idx.len()).map(|_| self.rng.gen()).collect();
        let src = &b.source;
        let gp = term("gp", gradient_penalty_at(|y| critic.realism_map(y, src)?.sum_all(), &b.target, &fake, &u))?;
        let cls = term("cls", classification_loss(&logits_r, &codes))?;
        let (total, report) = critic_total(&wgan, &gp, &cls, &self.config.effective_weights())?;
        let grads = term("critic total", total.backward())?;
        self.c_opt.step(&mut self.critic, &grads)?;
        Ok((report, -(wgan.item()? as f64)))
    }

    fn generator_update(&mut self, train: &Dataset) -> Result<LossReport> {
        let (idx, codes) = self.draw(train.len())?;
        let b = train.batch(&idx, &codes)?;
        let w = self.config.effective_weights();
        let y_hat = term("generator", self.generator.forward(&b.source, &codes))?;
        self.critic.set_trainable(false);
        let critic_out = frozen_estimates(|| self.critic.forward(&y_hat, &b.source));
        self.critic.set_trainable(true);
        let (map, logits) = term("critic", critic_out)?;
        let zero = || Tensor::<f32>::scalar(0.0);
        let seg = match (&self.segmenter, w.seg > 0.0) {
            (Some(s), true) => term("seg", seg_consistency_loss(&y_hat, &codes, &b.mask, s))?,
            _ => zero(),
        };
        let perc = if w.perc > 0.0 {
            term("perc", perceptual_loss(&y_hat, &b.target, &self.extractor, &PERCEPTUAL_WEIGHTS))?
        } else {
            zero()
        };
        let parts = GeneratorParts {
            adv: term("adv", generator_adv_loss(&Critic::score(&map)?))?,
            cls: term("cls", classification_loss(&logits, &codes))?,
            rec: term("rec", reconstruction_loss(&y_hat, &b.target, &b.mask, w.mask_alpha))?,
            seg,
            perc,
            msssim: term("msssim", msssim_loss(&y_hat, &b.target, &self.ssim))?,
        };
        let (total, report) = generator_total(&parts, &w)?;
        let grads = term("generator total", total.backward())?;
        if let Some(s) = &self.segmenter {
            s.ensure_frozen(Some(&grads))?;
        }
        self.extractor.ensure_frozen(Some(&grads))?;
        self.g_opt.step(&mut self.generator, &grads)?;
        Ok(report)
    }

    /// `n_critic` critic updates on independent batches, then one generator
    /// update.
    pub fn train_step(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<StepLog> {
        let epoch = self.step as usize / self.config.steps_per_epoch(train.len());
        self.epoch = epoch;
        let lr = self.config.lr_at(epoch);
        self.g_opt.set_lr(lr);
        self.c_opt.set_lr(lr);
        let mut critic = Vec::with_capacity(self.config.n_critic);
        let mut wasserstein = 0.0;
        for _ in 0..self.config.n_critic {
            let (r, w) = self.critic_update(train)?;
            critic.push(r);
            wasserstein = w;
        }
        let generator = self.generator_update(train)?;
        self.step += 1;
        let every = self.config.validate_every;
        let val_masked_l1 = match val {
            Some(v) if every > 0 && self.step % every as u64 == 0 && !v.is_empty() => Some(self.masked_l1(v)?),
            _ => None,
        };
        Ok(StepLog {
            step: self.step,
            epoch,
            lr,
            critic_updates: critic.len(),
            critic,
            generator,
            wasserstein,
            val_masked_l1,
        })
    }

    /// Mask-weighted L1 of the generator over every subject and contrast.
    pub fn masked_l1(&self, ds: &Dataset) -> Result<f64> {
        let alpha = self.config.weights.mask_alpha;
        let mut total = 0.0;
        for i in 0..ds.len() {
            let b = ds.batch(&[i; 3], &Contrast::ALL)?;
            let y_hat = inference(|| self.generator.forward(&b.source, &b.codes))?;
            total += no_grad(|| reconstruction_loss(&y_hat, &b.target, &b.mask, alpha))?.item()? as f64;
        }
        Ok(total / ds.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let header = CheckpointHeader {
            kind: "gan".into(),
            step: self.step,
            epoch: self.epoch,
            config: serde_json::to_value(&self.config)?,
            config_hash: self.config.hash(),
            rng: Some(RngState::capture(&self.rng)),
            optimizer_steps: Default::default(),
        };
        let mut c = Checkpoint::new(header);
        c.add_module("generator", &self.generator);
        c.add_module("critic", &self.critic);
        c.add_optimizer("opt.generator", &self.g_opt);
        c.add_optimizer("opt.critic", &self.c_opt);
        if let Some(s) = &self.segmenter {
            c.add_module("segmenter", s);
        }
        if let Some(s) = &self.downstream {
            c.add_module("downstream", s);
        }
        Ok(c)
    }

    /// Rebuilds a trainer from a checkpoint written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.header.kind != "gan" {
            return Err(Error::Format(format!("expected a gan checkpoint, got `{}`", ckpt.header.kind)));
        }
        let config: TrainConfig =
            serde_json::from_value(ckpt.header.config.clone()).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if config.hash() != ckpt.header.config_hash {
            return Err(Error::Format("checkpoint config hash mismatch".into()));
        }
        let segmenter = load_segmenter(ckpt, "segmenter", &config)?;
        let mut t = Self::new(config, segmenter)?;
        t.downstream = load_segmenter(ckpt, "downstream", &t.config)?;
        ckpt.load_module("generator", &mut t.generator)?;
        ckpt.load_module("critic", &mut t.critic)?;
        ckpt.load_optimizer("opt.generator", &mut t.g_opt)?;
        ckpt.load_optimizer("opt.critic", &mut t.c_opt)?;
        t.rng = ckpt
            .header
            .rng
            .as_ref()
            .ok_or_else(|| Error::Format("checkpoint lacks rng state".into()))?
            .restore()?;
        t.step = ckpt.header.step;
        t.epoch = ckpt.header.epoch;
        Ok(t)
    }
}

/// Frozen segmenter stored under `prefix`, if the checkpoint has one.
pub fn load_segmenter(ckpt: &Checkpoint, prefix: &str, config: &TrainConfig) -> Result<Option<Segmenter<f32>>> {
    if !ckpt.has_prefix(&format!("{prefix}/")) {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = Segmenter::new(&config.arch.segmenter, 4, &mut rng)?;
    ckpt.load_module(prefix, &mut s)?;
    s.set_trainable(false);
    Ok(Some(s))
}

/// Runs generator steps until the epoch budget or `max_steps` is reached.
/// `on_epoch` is called after every completed epoch.
pub fn train_gan(
    trainer: &mut GanTrainer,
    train: &Dataset,
    val: Option<&Dataset>,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
    on_epoch: &mut dyn FnMut(&GanTrainer, usize) -> Result<()>,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let spe = trainer.config.steps_per_epoch(train.len()) as u64;
    let mut total = trainer.config.epochs as u64 * spe;
    if let Some(m) = trainer.config.max_steps {
        total = total.min(m as u64);
    }
    while trainer.step < total {
        let log = trainer.train_step(train, val)?;
        info!(
            "step {} epoch {} G {:.4} C {:.4} W {:.4}",
            log.step,
            log.epoch,
            log.generator.total,
            log.critic.last().map_or(0.0, |r| r.total),
            log.wasserstein
        );
        on_step(&log)?;
        if trainer.step % spe == 0 {
            on_epoch(trainer, (trainer.step / spe) as usize)?;
        }
    }
    Ok(())
}
