//! Image-fidelity and overlap metrics.

mod frechet;

use crate::error::{Error, Result};
use crate::losses::{self, SsimConfig};
use crate::tensor::{no_grad, Scalar, Tensor};

pub use frechet::{mfd, symmetric_eigen, FeatureStats};

fn pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((a.to_f64_vec(), b.to_f64_vec()))
}

pub fn mse<T: Scalar>(y_hat: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (a, b) = pair(y_hat, y, "mse")?;
    if a.is_empty() {
        return Err(Error::invalid("mse of empty volumes"));
    }
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(range^2 / MSE)`; `+inf` for identical inputs.
pub fn psnr<T: Scalar>(y_hat: &Tensor<T>, y: &Tensor<T>, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::invalid("psnr data range must be positive"));
    }
    let m = mse(y_hat, y)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (data_range * data_range / m).log10() })
}

fn as_volume(t: &Tensor<f64>) -> Result<Tensor<f64>> {
    match t.rank() {
        3 => {
            let s = t.shape();
            t.reshape(&[1, 1, s[0], s[1], s[2]])
        }
        4 => {
            let s = t.shape();
            t.reshape(&[s[0], 1, s[1], s[2], s[3]])
        }
        _ => Ok(t.clone()),
    }
}

fn mean_over_batch(v: &Tensor<f64>) -> f64 {
    v.data().iter().sum::<f64>() / v.numel() as f64
}

/// Mean Gaussian-window SSIM, averaged over the batch.
pub fn ssim<T: Scalar>(y_hat: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (a, b) = (as_volume(&y_hat.cast::<f64>())?, as_volume(&y.cast::<f64>())?);
    Ok(mean_over_batch(&no_grad(|| losses::ssim(&a, &b, &SsimConfig::default()))?))
}

pub fn ms_ssim<T: Scalar>(y_hat: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (a, b) = (as_volume(&y_hat.cast::<f64>())?, as_volume(&y.cast::<f64>())?);
    Ok(mean_over_batch(&no_grad(|| losses::ms_ssim(&a, &b, &SsimConfig::default()))?))
}

fn binary(v: &[f64], op: &'static str) -> Result<()> {
    if v.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::invalid(format!("{op}: masks must be binary")));
    }
    Ok(())
}

/// `2|A and B| / (|A| + |B|)`, 1 when both masks are empty.
pub fn dice<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let (a, b) = pair(pred, gt, "dice")?;
    binary(&a, "dice")?;
    binary(&b, "dice")?;
    let inter: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
    let total: f64 = a.iter().sum::<f64>() + b.iter().sum::<f64>();
    Ok(if total == 0.0 { 1.0 } else { 2.0 * inter / total })
}

/// Thresholds probabilities (or logits with `threshold = 0`) into a mask.
pub fn binarize<T: Scalar>(x: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v.f64() > threshold { T::one() } else { T::zero() }).collect();
    Tensor::from_vec(data, x.shape()).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let y = Tensor::<f64>::zeros(&[1, 1, 4, 4, 4]);
        assert_eq!(psnr(&y, &y, 2.0).unwrap(), f64::INFINITY);
        let e = Tensor::<f64>::full(&[1, 1, 4, 4, 4], 0.02);
        assert!((psnr(&e, &y, 2.0).unwrap() - 40.0).abs() < 1e-9);
        let e = Tensor::<f64>::full(&[1, 1, 4, 4, 4], 2.0);
        assert!(psnr(&e, &y, 2.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn dice_counts() {
        let mut a = vec![0.0; 32];
        let mut b = vec![0.0; 32];
        a[..8].iter_mut().for_each(|v| *v = 1.0);
        b[4..12].iter_mut().for_each(|v| *v = 1.0);
        let (ta, tb) = (Tensor::<f64>::from_vec(a, &[32]).unwrap(), Tensor::<f64>::from_vec(b, &[32]).unwrap());
        assert!((dice(&ta, &tb).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(dice(&ta, &ta).unwrap(), 1.0);
        let z = Tensor::<f64>::zeros(&[32]);
        assert_eq!(dice(&z, &z).unwrap(), 1.0);
        assert!(dice(&Tensor::<f64>::full(&[32], 0.5), &z).is_err());
    }
}
