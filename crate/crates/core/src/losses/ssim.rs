//! Differentiable Gaussian-window SSIM and MS-SSIM on `[B, 1, D, H, W]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 7,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 2.0,
        }
    }
}

impl SsimConfig {
    fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }

    /// Number of scales a volume of these dims supports (at most five).
    pub fn scales(&self, dims: [usize; 3]) -> usize {
        let m = *dims.iter().min().unwrap();
        (1..=MS_WEIGHTS.len()).take_while(|&s| m >= self.window << (s - 1)).last().unwrap_or(0)
    }

    /// Scale weights truncated to `n` scales and renormalised.
    pub fn weights(n: usize) -> Vec<f64> {
        let w = &MS_WEIGHTS[..n.min(MS_WEIGHTS.len())];
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    }
}

/// Separable valid Gaussian filtering.
fn blur<T: Scalar>(x: &Tensor<T>, kernel: &[f64]) -> Result<Tensor<T>> {
    let w = kernel.len();
    let mut y = x.clone();
    for shape in [[1, 1, w, 1, 1], [1, 1, 1, w, 1], [1, 1, 1, 1, w]] {
        let k = Tensor::<T>::from_f64(kernel, &shape)?;
        y = y.conv3d(&k, None, 1, 0)?;
    }
    Ok(y)
}

/// Per-sample mean SSIM and contrast-structure terms, each `[B]`.
fn ssim_cs<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, ..] = x.dims5()?;
    let stacked = Tensor::concat(&[x, y, &x.square()?, &y.square()?, &x.mul(y)?], 0)?;
    let f = blur(&stacked, &cfg.kernel())?;
    let part = |i: usize| f.narrow(0, i * b, b);
    let (mx, my, exx, eyy, exy) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mxy = mx.mul(&my)?;
    let (mxx, myy) = (mx.square()?, my.square()?);
    let sxx = exx.sub(&mxx)?;
    let syy = eyy.sub(&myy)?;
    let sxy = exy.sub(&mxy)?;
    let cs_map = sxy.mul_scalar(2.0)?.add_scalar(c2)?.div(&sxx.add(&syy)?.add_scalar(c2)?)?;
    let lum = mxy.mul_scalar(2.0)?.add_scalar(c1)?.div(&mxx.add(&myy)?.add_scalar(c1)?)?;
    let ssim_map = lum.mul(&cs_map)?;
    let mean = |t: &Tensor<T>| -> Result<Tensor<T>> { t.mean_axes(&[1, 2, 3, 4], false) };
    Ok((mean(&ssim_map)?, mean(&cs_map)?))
}

fn check<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig, op: &'static str) -> Result<[usize; 3]> {
    let [_, c, d, h, w] = x.dims5()?;
    if x.shape() != y.shape() || c != 1 {
        return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    if [d, h, w].iter().any(|&n| n < cfg.window) {
        return Err(Error::shape(op, format!("volume {:?} smaller than the {} voxel window", [d, h, w], cfg.window)));
    }
    Ok([d, h, w])
}

/// Per-sample SSIM, `[B]`.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<Tensor<T>> {
    check(x, y, cfg, "ssim")?;
    Ok(ssim_cs(x, y, cfg)?.0)
}

/// Per-sample MS-SSIM, `[B]`: the weighted mean of the contrast-structure
/// terms at the finer scales and the full SSIM at the coarsest one.
pub fn ms_ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<Tensor<T>> {
    let dims = check(x, y, cfg, "ms_ssim")?;
    let n = cfg.scales(dims);
    let weights = SsimConfig::weights(n);
    let (mut xs, mut ys) = (x.clone(), y.clone());
    let mut total: Option<Tensor<T>> = None;
    for (j, &w) in weights.iter().enumerate() {
        let (s, cs) = ssim_cs(&xs, &ys, cfg)?;
        let term = if j + 1 == n { s } else { cs }.mul_scalar(w)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
        if j + 1 < n {
            xs = xs.avg_pool3d(2)?;
            ys = ys.avg_pool3d(2)?;
        }
    }
    Ok(total.expect("at least one scale"))
}
