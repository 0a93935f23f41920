use log::warn;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CLIP_LOW: f64 = 0.1;
pub const CLIP_HIGH: f64 = 99.9;

/// Percentiles (in percent) with linear interpolation between order
/// statistics: rank `p/100 * (n-1)`.
pub fn percentiles(values: &[f64], ps: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Data("percentile of an empty volume".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("volume contains non-finite intensities".into()));
    }
    let mut buf = values.to_vec();
    let n = buf.len();
    let mut out = Vec::with_capacity(ps.len());
    for &p in ps {
        if !(0.0..=100.0).contains(&p) {
            return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
        }
        let rank = p / 100.0 * (n - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let (_, &mut a, rest) = buf.select_nth_unstable_by(lo, f64::total_cmp);
        // the next order statistic is the minimum of the upper partition
        let b = if hi == lo { a } else { rest.iter().copied().fold(f64::INFINITY, f64::min) };
        out.push(a + (rank - lo as f64) * (b - a));
    }
    Ok(out)
}

/// Clips to `[p_low, p_high]`.
pub fn percentile_clip(values: &[f64], p_low: f64, p_high: f64) -> Result<Vec<f64>> {
    let q = percentiles(values, &[p_low, p_high])?;
    Ok(values.iter().map(|v| v.clamp(q[0], q[1])).collect())
}

/// Percentile clip followed by min-max scaling onto `[-1, 1]`.
///
/// A volume with no intensity range maps to all `-1` with a warning.
pub fn normalize_volume(values: &[f64]) -> Result<Vec<f64>> {
    let clipped = percentile_clip(values, CLIP_LOW, CLIP_HIGH)?;
    let (lo, hi) = clipped.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        warn!("constant volume; mapping to background");
        return Ok(vec![-1.0; values.len()]);
    }
    Ok(clipped.iter().map(|v| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)).collect())
}

/// Leading and trailing padding per spatial axis: depth is padded at the
/// end, in-plane deficits are split with the odd voxel trailing.
pub fn grid_padding(source: [usize; 3], target: [usize; 3]) -> Result<[(usize, usize); 3]> {
    let mut pads = [(0, 0); 3];
    for a in 0..3 {
        if target[a] < source[a] {
            return Err(Error::shape("pad_to_grid", format!("target {target:?} smaller than source {source:?}")));
        }
        let d = target[a] - source[a];
        pads[a] = if a == 0 { (0, d) } else { (d / 2, d - d / 2) };
    }
    Ok(pads)
}

/// Embeds the trailing three axes of `v` into a `target` grid filled with
/// `pad_value`.
pub fn pad_to_grid<T: Scalar>(v: &Tensor<T>, target: [usize; 3], pad_value: f64) -> Result<Tensor<T>> {
    let r = v.rank();
    if r < 3 {
        return Err(Error::shape("pad_to_grid", format!("need at least 3 axes, got {:?}", v.shape())));
    }
    let s = v.shape();
    let src = [s[r - 3], s[r - 2], s[r - 1]];
    let pads = grid_padding(src, target)?;
    let lead: usize = s[..r - 3].iter().product();
    let (td, th, tw) = (target[0], target[1], target[2]);
    let mut out = vec![T::of(pad_value); lead * td * th * tw];
    let data = v.data();
    for l in 0..lead {
        for z in 0..src[0] {
            for y in 0..src[1] {
                let from = ((l * src[0] + z) * src[1] + y) * src[2];
                let to = ((l * td + z + pads[0].0) * th + y + pads[1].0) * tw + pads[2].0;
                out[to..to + src[2]].copy_from_slice(&data[from..from + src[2]]);
            }
        }
    }
    let mut shape = s[..r - 3].to_vec();
    shape.extend_from_slice(&target);
    Tensor::from_vec(out, &shape)
}
