//! Average pooling and trilinear resizing, both expressed as separable
//! sparse linear maps along single axes.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, BackwardOp, Scalar, Tensor};

/// A sparse `n_out x n_in` matrix applied along one axis.
#[derive(Debug)]
struct AxisMap {
    n_in: usize,
    n_out: usize,
    /// (out index, in index, weight)
    taps: Vec<(usize, usize, f64)>,
}

impl AxisMap {
    fn average(n_in: usize, k: usize) -> Self {
        let n_out = n_in / k;
        let w = 1.0 / k as f64;
        let taps = (0..n_out).flat_map(|o| (0..k).map(move |j| (o, o * k + j, w))).collect();
        Self { n_in, n_out, taps }
    }

    /// Linear interpolation with half-pixel centres.
    fn linear(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut taps = Vec::with_capacity(2 * n_out);
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let lam = src - i0 as f64;
            if i1 == i0 || lam == 0.0 {
                taps.push((o, i0, 1.0));
            } else {
                taps.push((o, i0, 1.0 - lam));
                taps.push((o, i1, lam));
            }
        }
        Self { n_in, n_out, taps }
    }
}

struct Resample {
    axis: usize,
    map: Rc<AxisMap>,
    transpose: bool,
}

fn apply<T: Scalar>(x: &Tensor<T>, axis: usize, map: &Rc<AxisMap>, transpose: bool) -> Result<Tensor<T>> {
    let shape = x.shape();
    let (n_in, n_out) = if transpose { (map.n_out, map.n_in) } else { (map.n_in, map.n_out) };
    if axis >= shape.len() || shape[axis] != n_in {
        return Err(Error::shape("resample", format!("axis {axis} of {:?} should have length {n_in}", shape)));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let src = x.data();
    let taps: Vec<(usize, usize, T)> = map
        .taps
        .iter()
        .map(|&(o, i, w)| if transpose { (i, o, T::of(w)) } else { (o, i, T::of(w)) })
        .collect();
    let mut out = vec![T::zero(); outer * n_out * inner];
    for b in 0..outer {
        let xb = &src[b * n_in * inner..(b + 1) * n_in * inner];
        let yb = &mut out[b * n_out * inner..(b + 1) * n_out * inner];
        if inner == 1 {
            for &(o, i, w) in &taps {
                yb[o] += w * xb[i];
            }
            continue;
        }
        for &(o, i, w) in &taps {
            let xs = &xb[i * inner..(i + 1) * inner];
            let ys = &mut yb[o * inner..(o + 1) * inner];
            for (y, &v) in ys.iter_mut().zip(xs) {
                *y += w * v;
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = n_out;
    Tensor::from_op(
        out,
        new_shape,
        Resample {
            axis,
            map: map.clone(),
            transpose,
        },
        vec![x.clone()],
    )
}

impl<T: Scalar> BackwardOp<T> for Resample {
    fn name(&self) -> &'static str {
        if self.transpose {
            "resample_adjoint"
        } else {
            "resample"
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(apply(ctx.grad, self.axis, &self.map, !self.transpose)?)])
    }
}

fn check5<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<[usize; 3]> {
    let [_, _, d, h, w] = x.dims5().map_err(|_| Error::shape(op, format!("expected rank 5, got {:?}", x.shape())))?;
    Ok([d, h, w])
}

impl<T: Scalar> Tensor<T> {
    /// Non-overlapping average pooling with window and stride `k`; trailing
    /// voxels that do not fill a window are dropped.
    pub fn avg_pool3d(&self, k: usize) -> Result<Tensor<T>> {
        self.avg_pool3d_axes([k; 3])
    }

    /// Average pooling with a separate window (= stride) per spatial axis.
    pub fn avg_pool3d_axes(&self, k: [usize; 3]) -> Result<Tensor<T>> {
        let dims = check5(self, "avg_pool3d")?;
        if k.iter().zip(&dims).any(|(&k, &n)| k == 0 || n < k) {
            return Err(Error::shape("avg_pool3d", format!("window {:?} on {:?}", k, self.shape())));
        }
        let mut y = self.clone();
        for (i, &n) in dims.iter().enumerate() {
            if k[i] > 1 {
                y = apply(&y, 2 + i, &Rc::new(AxisMap::average(n, k[i])), false)?;
            }
        }
        Ok(y)
    }

    /// Trilinear resize to `size` (half-pixel centres, edges clamped).
    pub fn upsample_trilinear(&self, size: [usize; 3]) -> Result<Tensor<T>> {
        let dims = check5(self, "upsample_trilinear")?;
        if size.iter().zip(&dims).any(|(&n, &m)| n < m) {
            return Err(Error::shape(
                "upsample_trilinear",
                format!("target {:?} is smaller than source {:?}", size, dims),
            ));
        }
        let mut y = self.clone();
        for i in 0..3 {
            if dims[i] != size[i] {
                y = apply(&y, 2 + i, &Rc::new(AxisMap::linear(dims[i], size[i])), false)?;
            }
        }
        Ok(y)
    }

    /// Global average over the spatial axes, `[B, C, ...] -> [B, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        if self.rank() < 3 {
            return Err(Error::shape("global_avg_pool", format!("{:?}", self.shape())));
        }
        let axes: Vec<usize> = (2..self.rank()).collect();
        self.mean_axes(&axes, false)
    }
}
