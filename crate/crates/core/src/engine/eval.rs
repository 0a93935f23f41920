use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::gan::GanTrainer;
use super::segmentation::downstream_dice;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, generator_adv_loss, msssim_loss, perceptual_loss, reconstruction_loss, seg_consistency_loss,
    SsimConfig, PERCEPTUAL_WEIGHTS,
};
use crate::metrics::{mfd, ms_ssim, mse, psnr, ssim, FeatureStats};
use crate::networks::{Contrast, Critic, FeatureExtractor, Generator};
use crate::tensor::{inference, Tensor};

pub const DATA_RANGE: f64 = 2.0;

/// Non-finite values are written as the strings `"inf"`, `"-inf"`, `"nan"`.
mod lenient {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("bad number `{t}`"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(with = "lenient")]
    pub mean: f64,
    #[serde(with = "lenient")]
    pub std: f64,
}

impl Summary {
    /// Mean and sample standard deviation; identical values (including
    /// infinities) have zero spread.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        if values.iter().all(|&v| v == values[0]) {
            return Self { mean: values[0], std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeScores {
    pub subject_id: String,
    #[serde(with = "lenient")]
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    pub psnr: Summary,
    pub ssim: Summary,
    pub ms_ssim: Summary,
    pub mse: Summary,
    /// Absent with fewer than two subjects.
    pub mfd: Option<f64>,
    pub volumes: Vec<VolumeScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Real T2w plus synthesized targets.
    pub synthesized: Summary,
    /// Real T2w plus real targets, for reference.
    pub real: Summary,
    pub per_subject: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subjects: usize,
    /// Keyed by contrast name.
    pub contrasts: BTreeMap<String, ContrastReport>,
    pub dice: Option<DiceReport>,
    /// Mean unweighted generator loss terms.
    pub losses: BTreeMap<String, f64>,
}

fn as5(v: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = v.shape();
    match s.len() {
        3 => v.reshape(&[1, 1, s[0], s[1], s[2]]),
        5 if s[0] == 1 && s[1] == 1 => Ok(v.clone()),
        _ => Err(Error::shape("synthesize", format!("expected a single volume, got {s:?}"))),
    }
}

/// `[D, H, W]` synthesis of `contrast` from a T2w volume (`[D, H, W]` or
/// `[1, 1, D, H, W]`).
pub fn synthesize(generator: &Generator<f32>, source: &Tensor<f32>, contrast: Contrast) -> Result<Tensor<f32>> {
    let x = as5(source)?;
    let [_, _, d, h, w] = x.dims5()?;
    let y = inference(|| generator.forward(&x, &[contrast]))?;
    y.reshape(&[d, h, w])
}

/// All three targets for every subject, indexed like `Sample::targets`.
pub fn synthesize_dataset(generator: &Generator<f32>, ds: &Dataset) -> Result<Vec<[Tensor<f32>; 3]>> {
    ds.samples
        .iter()
        .map(|s| {
            let d = s.dims();
            let x = s.source.reshape(&[1, 1, d[0], d[1], d[2]])?;
            let src = Tensor::concat(&[&x, &x, &x], 0)?;
            let y = inference(|| generator.forward(&src, &Contrast::ALL))?;
            let one = |k: usize| y.narrow(0, k, 1)?.reshape(&d);
            Ok([one(0)?, one(1)?, one(2)?])
        })
        .collect()
}

fn pooled_stats(extractor: &FeatureExtractor<f32>, vols: &[&Tensor<f32>]) -> Result<Option<FeatureStats>> {
    if vols.len() < 2 {
        return Ok(None);
    }
    let rows = vols
        .iter()
        .map(|v| Ok(inference(|| extractor.pooled(&as5(v)?))?.to_f64_vec()))
        .collect::<Result<Vec<_>>>()?;
    FeatureStats::from_features(&rows).map(Some)
}

/// Fidelity metrics of `synth` against the real targets of `ds`.
pub fn fidelity_report(
    ds: &Dataset,
    synth: &[[Tensor<f32>; 3]],
    extractor: &FeatureExtractor<f32>,
) -> Result<BTreeMap<String, ContrastReport>> {
    if ds.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    if synth.len() != ds.len() {
        return Err(Error::invalid(format!("{} syntheses for {} subjects", synth.len(), ds.len())));
    }
    let mut out = BTreeMap::new();
    for c in Contrast::ALL {
        let k = c.index();
        let mut volumes = Vec::with_capacity(ds.len());
        for (s, y) in ds.samples.iter().zip(synth) {
            let (a, b) = (as5(&y[k])?, as5(s.target(c))?);
            volumes.push(VolumeScores {
                subject_id: s.subject_id.clone(),
                psnr: psnr(&a, &b, DATA_RANGE)?,
                ssim: ssim(&a, &b)?,
                ms_ssim: ms_ssim(&a, &b)?,
                mse: mse(&a, &b)?,
            });
        }
        let real: Vec<&Tensor<f32>> = ds.samples.iter().map(|s| s.target(c)).collect();
        let fake: Vec<&Tensor<f32>> = synth.iter().map(|y| &y[k]).collect();
        let mfd = match (pooled_stats(extractor, &real)?, pooled_stats(extractor, &fake)?) {
            (Some(r), Some(f)) => Some(mfd(&r, &f)?),
            _ => None,
        };
        let col = |f: fn(&VolumeScores) -> f64| Summary::of(&volumes.iter().map(f).collect::<Vec<_>>());
        out.insert(
            c.name().to_string(),
            ContrastReport {
                psnr: col(|v| v.psnr),
                ssim: col(|v| v.ssim),
                ms_ssim: col(|v| v.ms_ssim),
                mse: col(|v| v.mse),
                mfd,
                volumes,
            },
        );
    }
    Ok(out)
}

/// Mean unweighted generator terms over subjects and contrasts.
fn loss_terms(t: &GanTrainer, ds: &Dataset) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let ssim_cfg = SsimConfig::default();
    let alpha = t.config.weights.mask_alpha;
    for i in 0..ds.len() {
        let b = ds.batch(&[i; 3], &Contrast::ALL)?;
        let terms = inference(|| -> Result<Vec<(&str, Tensor<f32>)>> {
            let y_hat = t.generator.forward(&b.source, &b.codes)?;
            let (map, logits) = t.critic.forward(&y_hat, &b.source)?;
            let mut v = vec![
                ("adv", generator_adv_loss(&Critic::score(&map)?)?),
                ("cls", classification_loss(&logits, &b.codes)?),
                ("rec", reconstruction_loss(&y_hat, &b.target, &b.mask, alpha)?),
                ("perc", perceptual_loss(&y_hat, &b.target, &t.extractor, &PERCEPTUAL_WEIGHTS)?),
                ("msssim", msssim_loss(&y_hat, &b.target, &ssim_cfg)?),
            ];
            if let Some(s) = &t.segmenter {
                v.push(("seg", seg_consistency_loss(&y_hat, &b.codes, &b.mask, s)?));
            }
            Ok(v)
        })?;
        for (name, v) in terms {
            *sums.entry(name.to_string()).or_default() += v.item()? as f64 / ds.len() as f64;
        }
    }
    Ok(sums)
}

/// Full evaluation of a trained model on a paired dataset.
pub fn evaluate(t: &GanTrainer, ds: &Dataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let synth = synthesize_dataset(&t.generator, ds)?;
    let contrasts = fidelity_report(ds, &synth, &t.extractor)?;
    let dice = match &t.downstream {
        Some(seg) => {
            let fake = downstream_dice(seg, ds, &synth)?;
            let real_targets: Vec<[Tensor<f32>; 3]> = ds.samples.iter().map(|s| s.targets.clone()).collect();
            let real = downstream_dice(seg, ds, &real_targets)?;
            Some(DiceReport {
                synthesized: Summary::of(&fake),
                real: Summary::of(&real),
                per_subject: ds.samples.iter().map(|s| s.subject_id.clone()).zip(fake).collect(),
            })
        }
        None => None,
    };
    Ok(EvalReport {
        subjects: ds.len(),
        contrasts,
        dice,
        losses: loss_terms(t, ds)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summaries() {
        let s = Summary::of(&[f64::INFINITY; 3]);
        assert_eq!((s.mean, s.std), (f64::INFINITY, 0.0));
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-12);
        let json = serde_json::to_string(&Summary::of(&[f64::INFINITY])).unwrap();
        assert_eq!(json, r#"{"mean":"inf","std":0.0}"#);
        let back: Summary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.mean, f64::INFINITY);
    }
}
