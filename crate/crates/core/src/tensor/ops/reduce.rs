use super::elementwise::sum_to_kernel;
use crate::error::{Error, Result};
use crate::tensor::{numel, BackwardCtx, BackwardOp, Scalar, Tensor};

struct SumAxes {
    in_shape: Vec<usize>,
    keep_shape: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for SumAxes {
    fn name(&self) -> &'static str {
        "sum_axes"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx.grad.reshape(&self.keep_shape)?.broadcast_to(&self.in_shape)?;
        Ok(vec![Some(g)])
    }
}

impl<T: Scalar> Tensor<T> {
    /// Sum over `axes`; with `keepdim` the reduced axes stay as size 1.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        let r = self.rank();
        if let Some(&a) = axes.iter().find(|&&a| a >= r) {
            return Err(Error::invalid(format!("sum axis {a} for rank {r}")));
        }
        let keep_shape: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = if keepdim {
            keep_shape.clone()
        } else {
            self.shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let data = sum_to_kernel(self.data(), self.shape(), &keep_shape);
        Tensor::from_op(
            data,
            out_shape,
            SumAxes {
                in_shape: self.shape().to_vec(),
                keep_shape,
            },
            vec![self.clone()],
        )
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        let count: usize = axes.iter().filter_map(|&a| self.shape().get(a)).product();
        if count == 0 {
            return Err(Error::invalid("mean over an empty extent"));
        }
        self.sum_axes(axes, keepdim)?.mul_scalar(1.0 / count as f64)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let n = numel(self.shape());
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        self.sum_all()?.mul_scalar(1.0 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_over_spatial_axes() {
        let x = Tensor::<f64>::from_vec((0..16).map(f64::from).collect(), &[2, 2, 2, 2]).unwrap();
        let s = x.sum_axes(&[2, 3], true).unwrap();
        assert_eq!(s.shape(), &[2, 2, 1, 1]);
        assert_eq!(s.data(), &[6.0, 22.0, 38.0, 54.0]);
        let m = x.mean_axes(&[0], false).unwrap();
        assert_eq!(m.shape(), &[2, 2, 2]);
        assert_eq!(m.data()[0], 4.0);
        assert_eq!(x.sum_all().unwrap().item().unwrap(), 120.0);
    }
}
