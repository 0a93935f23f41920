use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_contrast, TrainConfig};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::segmenter_pretrain_loss;
use crate::metrics::{binarize, dice};
use crate::networks::{Contrast, Segmenter};
use crate::nn::ModuleExt;
use crate::optim::Adam;
use crate::tensor::{inference, Tensor};

/// Summary of one segmenter epoch.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_dice: Option<f64>,
}

const SEG_STREAM: u64 = 0x5e9;
const DOWNSTREAM_STREAM: u64 = 0xd0;

fn check_nonempty(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    Ok(())
}

fn fit<F, V>(
    seg: &mut Segmenter<f32>,
    train: &Dataset,
    config: &TrainConfig,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    mut loss_of: F,
    validate: V,
    log: &mut dyn FnMut(&SegEpochLog),
) -> Result<Vec<SegEpochLog>>
where
    F: FnMut(&Segmenter<f32>, &[usize], &mut ChaCha8Rng) -> Result<Tensor<f32>>,
    V: Fn(&Segmenter<f32>) -> Result<Option<f64>>,
{
    let sc = &config.segmenter;
    let mut opt = Adam::new(sc.adam);
    let mut history = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut n = 0;
        for idx in order.chunks(sc.batch_size) {
            let loss = loss_of(seg, idx, rng)?;
            let v = loss.item()? as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("segmenter loss at epoch {epoch}")));
            }
            let grads = loss.backward()?;
            opt.step(seg, &grads)?;
            total += v;
            n += 1;
        }
        let entry = SegEpochLog {
            epoch,
            loss: total / n as f64,
            val_dice: validate(seg)?,
        };
        info!("segmenter epoch {epoch}: loss {:.4} val dice {:?}", entry.loss, entry.val_dice);
        log(&entry);
        history.push(entry);
    }
    Ok(history)
}

/// Trains the contrast-conditional tumour segmenter, one uniformly drawn
/// contrast per sample, and returns it frozen with its epoch history.
pub fn pretrain_segmenter(
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    log: &mut dyn FnMut(&SegEpochLog),
) -> Result<(Segmenter<f32>, Vec<SegEpochLog>)> {
    check_nonempty(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SEG_STREAM);
    let mut seg = Segmenter::new(&config.arch.segmenter, 4, &mut rng)?;
    let history = fit(
        &mut seg,
        train,
        config,
        config.segmenter.epochs,
        &mut rng,
        |s, idx, rng| {
            let codes: Vec<Contrast> = idx.iter().map(|_| sample_contrast(rng)).collect();
            let b = train.batch(idx, &codes)?;
            segmenter_pretrain_loss(&s.forward(&b.target, &b.codes)?, &b.mask)
        },
        |s| val.filter(|v| !v.is_empty()).map(|v| conditional_dice(s, v)).transpose(),
        log,
    )?;
    seg.set_trainable(false);
    Ok((seg, history))
}

/// Mean Dice of thresholded predictions over every sample and contrast.
pub fn conditional_dice(seg: &Segmenter<f32>, ds: &Dataset) -> Result<f64> {
    let mut scores = Vec::new();
    for i in 0..ds.len() {
        for c in Contrast::ALL {
            let b = ds.batch(&[i], &[c])?;
            let logits = inference(|| seg.forward(&b.target, &b.codes))?;
            scores.push(dice(&binarize(&logits, 0.0), &b.mask)?);
        }
    }
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

/// `[1, 4, D, H, W]` input of the multi-contrast segmenter: T2w followed by
/// the three target contrasts.
pub fn downstream_input(source: &Tensor<f32>, targets: &[Tensor<f32>; 3]) -> Result<Tensor<f32>> {
    let as5 = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        match t.rank() {
            3 => {
                let s = t.shape();
                t.reshape(&[1, 1, s[0], s[1], s[2]])
            }
            _ => Ok(t.clone()),
        }
    };
    let parts = [as5(source)?, as5(&targets[0])?, as5(&targets[1])?, as5(&targets[2])?];
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 1)
}

fn downstream_batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut xs = Vec::new();
    let mut ms = Vec::new();
    for s in samples {
        xs.push(downstream_input(&s.source, &s.targets)?);
        let d = s.dims();
        ms.push(s.mask.reshape(&[1, 1, d[0], d[1], d[2]])?);
    }
    Ok((Tensor::concat(&xs.iter().collect::<Vec<_>>(), 0)?, Tensor::concat(&ms.iter().collect::<Vec<_>>(), 0)?))
}

/// Trains the four-channel segmenter on real multi-contrast inputs.
pub fn train_downstream(
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    log: &mut dyn FnMut(&SegEpochLog),
) -> Result<(Segmenter<f32>, Vec<SegEpochLog>)> {
    check_nonempty(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(DOWNSTREAM_STREAM);
    let mut seg = Segmenter::new(&config.arch.segmenter, 4, &mut rng)?;
    let history = fit(
        &mut seg,
        train,
        config,
        config.segmenter.downstream_epochs,
        &mut rng,
        |s, idx, _| {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let (x, m) = downstream_batch(&samples)?;
            segmenter_pretrain_loss(&s.forward_raw(&x)?, &m)
        },
        |s| {
            val.filter(|v| !v.is_empty())
                .map(|v| {
                    let real: Vec<[Tensor<f32>; 3]> = v.samples.iter().map(|s| s.targets.clone()).collect();
                    downstream_dice(s, v, &real).map(|d| d.iter().sum::<f64>() / d.len() as f64)
                })
                .transpose()
        },
        log,
    )?;
    seg.set_trainable(false);
    Ok((seg, history))
}

/// Per-subject Dice of the four-channel segmenter fed real T2w plus the
/// given target volumes (real or synthesized).
pub fn downstream_dice(seg: &Segmenter<f32>, ds: &Dataset, targets: &[[Tensor<f32>; 3]]) -> Result<Vec<f64>> {
    if targets.len() != ds.len() {
        return Err(Error::invalid(format!("{} target sets for {} subjects", targets.len(), ds.len())));
    }
    ds.samples
        .iter()
        .zip(targets)
        .map(|(s, t)| {
            let x = downstream_input(&s.source, t)?;
            let logits = inference(|| seg.forward_raw(&x))?;
            let d = s.dims();
            dice(&binarize(&logits, 0.0), &s.mask.reshape(&[1, 1, d[0], d[1], d[2]])?)
        })
        .collect()
}
