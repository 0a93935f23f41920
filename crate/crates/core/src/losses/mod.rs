//! Critic and generator objectives.

mod ssim;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Contrast, FeatureExtractor, Segmenter};
use crate::nn::ModuleExt;
use crate::tensor::{grad, no_grad, GradOptions, Scalar, Tensor};

pub use ssim::{ms_ssim, ssim, SsimConfig};

pub const DICE_EPS: f64 = 1e-6;
pub const PERCEPTUAL_WEIGHTS: [f64; 4] = [1.0, 0.5, 0.25, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rec: f64,
    pub msssim: f64,
    pub perc: f64,
    pub seg: f64,
    pub cls: f64,
    pub gp: f64,
    pub adv: f64,
    pub mask_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 29.8016,
            msssim: 13.7866,
            perc: 1.7760,
            seg: 1.0421,
            cls: 0.4613,
            gp: 10.0,
            adv: 1.0,
            mask_alpha: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rec, self.msssim, self.perc, self.seg, self.cls, self.gp, self.adv, self.mask_alpha];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Named loss terms, their weights and the weighted total of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossReport {
    /// `sum(weight * term)` recomputed from the stored parts.
    pub fn reconstruct(&self) -> f64 {
        self.terms.iter().map(|(k, v)| v * self.weights.get(k).copied().unwrap_or(0.0)).sum()
    }
}

fn weighted_sum<T: Scalar>(parts: &[(&str, &Tensor<T>, f64)]) -> Result<(Tensor<T>, LossReport)> {
    let mut report = LossReport::default();
    let mut total: Option<Tensor<T>> = None;
    for &(name, t, w) in parts {
        if t.numel() != 1 {
            return Err(Error::shape("loss", format!("term `{name}` is not a scalar: {:?}", t.shape())));
        }
        let v = t.item()?.f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term `{name}` = {v}")));
        }
        report.terms.insert(name.to_string(), v);
        report.weights.insert(name.to_string(), w);
        let term = t.reshape(&[])?.mul_scalar(w)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("no loss terms"))?;
    report.total = total.item()?.f64();
    Ok((total, report))
}

/// `mean(fake) - mean(real)`.
pub fn critic_wgan_loss<T: Scalar>(score_fake: &Tensor<T>, score_real: &Tensor<T>) -> Result<Tensor<T>> {
    score_fake.mean_all()?.sub(&score_real.mean_all()?)
}

/// `-mean(fake)`.
pub fn generator_adv_loss<T: Scalar>(score_fake: &Tensor<T>) -> Result<Tensor<T>> {
    score_fake.mean_all()?.neg()
}

/// Gradient penalty at `u * real + (1 - u) * fake` with one `u` per sample.
///
/// `scorer` maps a batch to the sum over samples of each sample's score;
/// every sample's score must depend on that sample alone.
pub fn gradient_penalty_at<T: Scalar, F>(scorer: F, real: &Tensor<T>, fake: &Tensor<T>, u: &[f64]) -> Result<Tensor<T>>
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if real.shape() != fake.shape() || real.rank() < 2 || real.shape()[0] != u.len() {
        return Err(Error::shape(
            "gradient_penalty",
            format!("real {:?}, fake {:?}, {} coefficients", real.shape(), fake.shape(), u.len()),
        ));
    }
    let b = u.len();
    let mut ushape = vec![1; real.rank()];
    ushape[0] = b;
    let ut = Tensor::<T>::from_f64(u, &ushape)?;
    let one_minus: Vec<f64> = u.iter().map(|v| 1.0 - v).collect();
    let vt = Tensor::<T>::from_f64(&one_minus, &ushape)?;
    let interp = real.detach().mul(&ut)?.add(&fake.detach().mul(&vt)?)?.requires_grad_(true);
    let score = scorer(&interp)?;
    if score.numel() != 1 {
        return Err(Error::shape("gradient_penalty", format!("scorer returned {:?}", score.shape())));
    }
    let g = grad(
        &score,
        &[&interp],
        GradOptions {
            create_graph: true,
            retain_graph: true,
        },
    )?
    .pop()
    .flatten()
    .ok_or_else(|| Error::Autograd("critic score does not depend on its input".into()))?;
    let axes: Vec<usize> = (1..g.rank()).collect();
    let norm = g.square()?.sum_axes(&axes, false)?.add_scalar(1e-12)?.sqrt()?;
    norm.add_scalar(-1.0)?.square()?.mean_all()
}

/// [`gradient_penalty_at`] with `u ~ U[0, 1]` drawn from `rng`.
pub fn gradient_penalty<T: Scalar, F, R>(scorer: F, real: &Tensor<T>, fake: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>>
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
    R: Rng + ?Sized,
{
    let u: Vec<f64> = (0..real.shape().first().copied().unwrap_or(0)).map(|_| rng.gen::<f64>()).collect();
    gradient_penalty_at(scorer, real, fake, &u)
}

/// Mean cross-entropy of `[B, 3]` logits against the requested contrasts.
pub fn classification_loss<T: Scalar>(logits: &Tensor<T>, codes: &[Contrast]) -> Result<Tensor<T>> {
    let &[b, k] = logits.shape() else {
        return Err(Error::shape("classification_loss", format!("logits {:?}", logits.shape())));
    };
    if b != codes.len() || k != 3 {
        return Err(Error::shape("classification_loss", format!("{:?} logits for {} codes", logits.shape(), codes.len())));
    }
    let onehot: Vec<f64> = codes.iter().flat_map(|c| c.one_hot()).collect();
    let target = Tensor::<T>::from_f64(&onehot, &[b, 3])?;
    logits.log_softmax(1)?.mul(&target)?.sum_all()?.mul_scalar(-1.0 / b as f64)
}

fn check_binary<T: Scalar>(m: &Tensor<T>, op: &'static str) -> Result<()> {
    if m.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid(format!("{op}: mask must be binary")));
    }
    Ok(())
}

/// `mean((1 + alpha * m) * |y - y_hat|)`.
pub fn reconstruction_loss<T: Scalar>(y_hat: &Tensor<T>, y: &Tensor<T>, mask: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    if y_hat.shape() != y.shape() || mask.shape() != y.shape() {
        return Err(Error::shape("reconstruction_loss", format!("{:?}, {:?}, mask {:?}", y_hat.shape(), y.shape(), mask.shape())));
    }
    check_binary(mask, "reconstruction_loss")?;
    let w = mask.mul_scalar(alpha)?.add_scalar(1.0)?;
    y.sub(y_hat)?.abs()?.mul(&w)?.mean_all()
}

/// `sum_k lambda_k * mean|phi_k(y) - phi_k(y_hat)|`; only `y_hat` receives
/// gradients.
pub fn perceptual_loss<T: Scalar>(
    y_hat: &Tensor<T>,
    y: &Tensor<T>,
    extractor: &FeatureExtractor<T>,
    weights: &[f64; 4],
) -> Result<Tensor<T>> {
    if y_hat.shape() != y.shape() {
        return Err(Error::shape("perceptual_loss", format!("{:?} vs {:?}", y_hat.shape(), y.shape())));
    }
    let fy = no_grad(|| extractor.forward(&y.detach()))?;
    let fh = extractor.forward(y_hat)?;
    let mut total: Option<Tensor<T>> = None;
    for ((a, b), &w) in fy.iter().zip(&fh).zip(weights) {
        let term = a.sub(b)?.abs()?.mean_all()?.mul_scalar(w)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// `1 - mean_b MS-SSIM(y_b, y_hat_b)`.
pub fn msssim_loss<T: Scalar>(y_hat: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<Tensor<T>> {
    ms_ssim(y, y_hat, cfg)?.mean_all()?.neg()?.add_scalar(1.0)
}

/// Mean BCE-with-logits.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    logits.softplus()?.sub(&logits.mul(target)?)?.mean_all()
}

/// Per-sample soft Dice loss `1 - (2 sum(p m) + eps) / (sum p + sum m + eps)`,
/// averaged over the batch.
pub fn soft_dice_loss<T: Scalar>(prob: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let axes: Vec<usize> = (1..prob.rank()).collect();
    let inter = prob.mul(target)?.sum_axes(&axes, false)?;
    let denom = prob.sum_axes(&axes, false)?.add(&target.sum_axes(&axes, false)?)?.add_scalar(DICE_EPS)?;
    let ratio = inter.mul_scalar(2.0)?.add_scalar(DICE_EPS)?.div(&denom)?;
    ratio.neg()?.add_scalar(1.0)?.mean_all()
}

fn check_logits<T: Scalar>(logits: &Tensor<T>, mask: &Tensor<T>, op: &'static str) -> Result<()> {
    if logits.shape() != mask.shape() {
        return Err(Error::shape(op, format!("logits {:?} vs mask {:?}", logits.shape(), mask.shape())));
    }
    check_binary(mask, op)
}

/// `0.5 * BCE + 0.5 * Dice` between tumour logits and the mask.
pub fn seg_terms<T: Scalar>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    check_logits(logits, mask, "seg_consistency_loss")?;
    let bce = bce_with_logits(logits, mask)?;
    let dice = soft_dice_loss(&logits.sigmoid()?, mask)?;
    bce.mul_scalar(0.5)?.add(&dice.mul_scalar(0.5)?)
}

/// Segmentation consistency of a synthesised volume under the frozen
/// segmenter.
pub fn seg_consistency_loss<T: Scalar>(
    y_hat: &Tensor<T>,
    codes: &[Contrast],
    mask: &Tensor<T>,
    segmenter: &Segmenter<T>,
) -> Result<Tensor<T>> {
    segmenter.ensure_frozen(None)?;
    seg_terms(&segmenter.forward(y_hat, codes)?, mask)
}

/// Segmenter pretraining objective `Dice + 0.5 * BCE`.
pub fn segmenter_pretrain_loss<T: Scalar>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    check_logits(logits, mask, "segmenter_pretrain_loss")?;
    let dice = soft_dice_loss(&logits.sigmoid()?, mask)?;
    dice.add(&bce_with_logits(logits, mask)?.mul_scalar(0.5)?)
}

/// The six generator terms of one batch.
pub struct GeneratorParts<T: Scalar = f32> {
    pub adv: Tensor<T>,
    pub cls: Tensor<T>,
    pub rec: Tensor<T>,
    pub seg: Tensor<T>,
    pub perc: Tensor<T>,
    pub msssim: Tensor<T>,
}

pub fn generator_total<T: Scalar>(parts: &GeneratorParts<T>, w: &LossWeights) -> Result<(Tensor<T>, LossReport)> {
    weighted_sum(&[
        ("adv", &parts.adv, w.adv),
        ("cls", &parts.cls, w.cls),
        ("rec", &parts.rec, w.rec),
        ("seg", &parts.seg, w.seg),
        ("perc", &parts.perc, w.perc),
        ("msssim", &parts.msssim, w.msssim),
    ])
}

pub fn critic_total<T: Scalar>(
    wgan: &Tensor<T>,
    gp: &Tensor<T>,
    cls: &Tensor<T>,
    w: &LossWeights,
) -> Result<(Tensor<T>, LossReport)> {
    weighted_sum(&[("wgan", wgan, 1.0), ("gp", gp, w.gp), ("cls", cls, w.cls)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn penalty_of_linear_functionals() {
        let real = Tensor::<f64>::ones(&[2, 1, 2, 2, 4]);
        let fake = Tensor::<f64>::zeros(&[2, 1, 2, 2, 4]);
        let sum = gradient_penalty_at(|y| y.sum_all(), &real, &fake, &[0.3, 1.0]).unwrap();
        assert!((sum.item().unwrap() - 9.0).abs() < 1e-9);
        // mean over one sample's 16 voxels, summed over the batch
        let mean = gradient_penalty_at(|y| y.sum_all()?.mul_scalar(1.0 / 16.0), &real, &fake, &[0.0, 0.5]).unwrap();
        assert!((mean.item().unwrap() - 0.5625).abs() < 1e-9);
    }

    #[test]
    fn classification_closed_forms() {
        let z = Tensor::<f64>::zeros(&[2, 3]);
        let l = classification_loss(&z, &[Contrast::T2f, Contrast::T1n]).unwrap();
        assert!((l.item().unwrap() - 3f64.ln()).abs() < 1e-12);
        let sat = Tensor::<f64>::from_vec(vec![0.0, 20.0, 0.0], &[1, 3]).unwrap();
        assert!(classification_loss(&sat, &[Contrast::T1c]).unwrap().item().unwrap() < 1e-8);
    }

    #[test]
    fn reconstruction_closed_forms() {
        let y = Tensor::<f64>::ones(&[1, 1, 2, 2, 2]);
        let y_hat = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        let m0 = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        let m1 = Tensor::<f64>::ones(&[1, 1, 2, 2, 2]);
        assert_eq!(reconstruction_loss(&y_hat, &y, &m0, 4.0).unwrap().item().unwrap(), 1.0);
        assert_eq!(reconstruction_loss(&y_hat, &y, &m1, 4.0).unwrap().item().unwrap(), 5.0);
        assert!(reconstruction_loss(&y_hat, &y, &Tensor::full(&[1, 1, 2, 2, 2], 0.5), 4.0).is_err());
    }

    #[test]
    fn totals() {
        let w = LossWeights::default();
        let (t, r) = critic_total(&scalar(-2.0), &scalar(0.5), &scalar(1.1), &w).unwrap();
        assert!((t.item().unwrap() - 3.50743).abs() < 1e-12);
        assert!((r.reconstruct() - r.total).abs() < 1e-12);
        let one = scalar(1.0);
        let parts = GeneratorParts {
            adv: one.clone(),
            cls: one.clone(),
            rec: one.clone(),
            seg: one.clone(),
            perc: one.clone(),
            msssim: one,
        };
        let (t, _) = generator_total(&parts, &w).unwrap();
        assert!((t.item().unwrap() - 47.8676).abs() < 1e-9);
    }

    #[test]
    fn seg_terms_closed_form() {
        let n = 16.0;
        let mask = Tensor::<f64>::from_vec((0..16).map(|i| (i % 2) as f64).collect(), &[1, 1, 2, 2, 4]).unwrap();
        let l = seg_terms(&Tensor::zeros(&[1, 1, 2, 2, 4]), &mask).unwrap().item().unwrap();
        let sm = 8.0;
        let dice = 1.0 - (2.0 * 0.5 * sm + DICE_EPS) / (0.5 * n + sm + DICE_EPS);
        assert!((l - (0.5 * 2f64.ln() + 0.5 * dice)).abs() < 1e-12);
        let empty = Tensor::<f64>::zeros(&[1, 1, 2, 2, 4]);
        let l = seg_terms(&Tensor::full(&[1, 1, 2, 2, 4], -20.0), &empty).unwrap().item().unwrap();
        let p = 1.0 / (1.0 + 20f64.exp());
        let bce = (1.0 + (-20f64).exp()).ln();
        let expect = 0.5 * bce + 0.5 * (1.0 - DICE_EPS / (n * p + DICE_EPS));
        assert!((l - expect).abs() < 1e-12 && l < 0.05);
    }

    #[test]
    fn msssim_self_and_negation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let y = Tensor::<f64>::uniform(&[1, 1, 16, 16, 16], -1.0, 1.0, &mut rng);
        let cfg = SsimConfig::default();
        assert!(msssim_loss(&y, &y, &cfg).unwrap().item().unwrap().abs() < 1e-6);
        assert!(msssim_loss(&y.neg().unwrap(), &y, &cfg).unwrap().item().unwrap() > 1.0);
    }
}
