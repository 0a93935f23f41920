use crate::error::Result;
use crate::tensor::{numel, BackwardCtx, BackwardOp, Scalar, Tensor};

struct Softmax {
    axis: usize,
}

impl<T: Scalar> BackwardOp<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    // dx = y * (g - sum(g * y, axis))
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let y = ctx.output;
        let dot = ctx.grad.mul(y)?.sum_axes(&[self.axis], true)?;
        Ok(vec![Some(y.mul(&ctx.grad.sub(&dot)?)?)])
    }
}

struct LogSoftmax {
    axis: usize,
}

impl<T: Scalar> BackwardOp<T> for LogSoftmax {
    fn name(&self) -> &'static str {
        "log_softmax"
    }

    // dx = g - softmax(x) * sum(g, axis)
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let p = ctx.output.exp()?;
        let total = ctx.grad.sum_axes(&[self.axis], true)?;
        Ok(vec![Some(ctx.grad.sub(&p.mul(&total)?)?)])
    }
}

fn softmax_kernel<T: Scalar>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let n = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    let outer = numel(&shape[..axis]);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let m = (0..n).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..n).map(|k| (x[at(k)] - m).exp()).sum();
            let lz = z.ln();
            for k in 0..n {
                let shifted = x[at(k)] - m;
                out[at(k)] = if log { shifted - lz } else { shifted.exp() / z };
            }
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    /// Softmax along `axis` (negative counts from the end).
    pub fn softmax(&self, axis: isize) -> Result<Tensor<T>> {
        let axis = self.axis(axis)?;
        let data = softmax_kernel(self.data(), self.shape(), axis, false);
        Tensor::from_op(data, self.shape().to_vec(), Softmax { axis }, vec![self.clone()])
    }

    pub fn log_softmax(&self, axis: isize) -> Result<Tensor<T>> {
        let axis = self.axis(axis)?;
        let data = softmax_kernel(self.data(), self.shape(), axis, true);
        Tensor::from_op(data, self.shape().to_vec(), LogSoftmax { axis }, vec![self.clone()])
    }
}
