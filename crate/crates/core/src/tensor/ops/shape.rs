use super::elementwise::{broadcast_kernel, broadcast_shape, sum_to_kernel};
use crate::error::{Error, Result};
use crate::tensor::{numel, BackwardCtx, BackwardOp, Scalar, Tensor};

struct Reshape {
    in_shape: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(ctx.grad.reshape(&self.in_shape)?)])
    }
}

struct Permute {
    inverse: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(ctx.grad.permute(&self.inverse)?)])
    }
}

struct BroadcastTo {
    in_shape: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for BroadcastTo {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(ctx.grad.sum_to(&self.in_shape)?)])
    }
}

struct SumTo {
    in_shape: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for SumTo {
    fn name(&self) -> &'static str {
        "sum_to"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(ctx.grad.broadcast_to(&self.in_shape)?)])
    }
}

struct Concat {
    axis: usize,
    sizes: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(self.sizes.len());
        for (i, &len) in self.sizes.iter().enumerate() {
            out.push(if ctx.needs(i) {
                Some(ctx.grad.narrow(self.axis, start, len)?)
            } else {
                None
            });
            start += len;
        }
        Ok(out)
    }
}

struct Narrow {
    axis: usize,
    start: usize,
    full: usize,
}

impl<T: Scalar> BackwardOp<T> for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(ctx.grad.pad_axis(self.axis, self.start, self.full)?)])
    }
}

struct PadAxis {
    axis: usize,
    start: usize,
    len: usize,
}

impl<T: Scalar> BackwardOp<T> for PadAxis {
    fn name(&self) -> &'static str {
        "pad_axis"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(ctx.grad.narrow(self.axis, self.start, self.len)?)])
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

impl<T: Scalar> Tensor<T> {
    /// Same buffer, new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Ok(self.view_op(
            shape.to_vec(),
            Reshape {
                in_shape: self.shape().to_vec(),
            },
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("bad permutation {perm:?} for rank {r}")));
        }
        let in_shape = self.shape();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let mut in_strides = vec![1; r];
        for i in (0..r.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = self.data();
        let mut data = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..self.numel() {
            data.push(src[off]);
            for d in (0..r).rev() {
                idx[d] += 1;
                off += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= src_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        let mut inverse = vec![0; r];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Tensor::from_op(data, out_shape, Permute { inverse }, vec![self.clone()])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(self.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("{:?} -> {:?}", self.shape(), shape),
                ))
            }
        }
        let data = broadcast_kernel(self.data(), self.shape(), shape);
        Tensor::from_op(
            data,
            shape.to_vec(),
            BroadcastTo {
                in_shape: self.shape().to_vec(),
            },
            vec![self.clone()],
        )
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(shape, self.shape()) {
            Some(s) if s == self.shape() => {}
            _ => {
                return Err(Error::shape(
                    "sum_to",
                    format!("{:?} -> {:?}", self.shape(), shape),
                ))
            }
        }
        let data = sum_to_kernel(self.data(), self.shape(), shape);
        Tensor::from_op(
            data,
            shape.to_vec(),
            SumTo {
                in_shape: self.shape().to_vec(),
            },
            vec![self.clone()],
        )
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let r = first.rank();
        if axis >= r {
            return Err(Error::invalid(format!("concat axis {axis} for rank {r}")));
        }
        for p in parts {
            let ok = p.rank() == r
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = sizes.iter().sum();
        let (outer, inner) = outer_inner(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&sizes) {
                let chunk = len * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::from_op(
            data,
            out_shape,
            Concat { axis, sizes },
            parts.iter().map(|p| (*p).clone()).collect(),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let full = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::invalid(format!("narrow axis {axis} for rank {}", self.rank())))?;
        if start + len > full {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis of size {full}", start + len),
            ));
        }
        if start == 0 && len == full {
            return Ok(self.clone());
        }
        let (outer, inner) = outer_inner(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let src = self.data();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        Tensor::from_op(data, out_shape, Narrow { axis, start, full }, vec![self.clone()])
    }

    /// Zero-pads along `axis` so this tensor occupies `[start, start + n)` of
    /// an axis of size `full`. Adjoint of [`Tensor::narrow`].
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Result<Tensor<T>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::invalid(format!("pad axis {axis} for rank {}", self.rank())))?;
        if start + len > full {
            return Err(Error::shape("pad_axis", format!("{len} at {start} into {full}")));
        }
        let (outer, inner) = outer_inner(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = full;
        let mut data = vec![T::zero(); numel(&out_shape)];
        let src = self.data();
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            data[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        Tensor::from_op(data, out_shape, PadAxis { axis, start, len }, vec![self.clone()])
    }
}
