use crate::error::{Error, Result};
use crate::tensor::{gemm, BackwardCtx, BackwardOp, MatRef, Scalar, Tensor};

struct Bmm {
    ta: bool,
    tb: bool,
}

impl<T: Scalar> BackwardOp<T> for Bmm {
    fn name(&self) -> &'static str {
        "bmm"
    }

    // C = op(A) op(B). Each case stays a single bmm, so the rule is closed
    // under differentiation.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b, g) = (ctx.input(0), ctx.input(1), ctx.grad);
        let ga = if ctx.needs(0) {
            Some(if self.ta {
                b.bmm(g, self.tb, true)?
            } else {
                g.bmm(b, false, !self.tb)?
            })
        } else {
            None
        };
        let gb = if ctx.needs(1) {
            Some(if self.tb {
                g.bmm(a, true, self.ta)?
            } else {
                a.bmm(g, !self.ta, false)?
            })
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

impl<T: Scalar> Tensor<T> {
    /// Batched product `op(self) @ op(other)` of rank-3 tensors, where `op`
    /// transposes the last two axes when the corresponding flag is set.
    pub fn bmm(&self, other: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
        let (&[ba, ra, ca], &[bb, rb, cb]) = (self.shape(), other.shape()) else {
            return Err(Error::shape(
                "bmm",
                format!("expected rank-3 operands, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if ba != bb || k != k2 {
            return Err(Error::shape(
                "bmm",
                format!(
                    "{:?}{} x {:?}{}",
                    self.shape(),
                    if ta { "^T" } else { "" },
                    other.shape(),
                    if tb { "^T" } else { "" }
                ),
            ));
        }
        let mut data = vec![T::zero(); ba * m * n];
        let (sa, sb) = (ra * ca, rb * cb);
        for i in 0..ba {
            let mut am = MatRef::new(&self.data()[i * sa..(i + 1) * sa], ra, ca);
            let mut bm = MatRef::new(&other.data()[i * sb..(i + 1) * sb], rb, cb);
            if ta {
                am = am.t();
            }
            if tb {
                bm = bm.t();
            }
            gemm(T::one(), am, bm, T::zero(), &mut data[i * m * n..(i + 1) * m * n]);
        }
        Tensor::from_op(data, vec![ba, m, n], Bmm { ta, tb }, vec![self.clone(), other.clone()])
    }

    /// Plain `[n, k] @ [k, m]` product.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (&[n, k], &[k2, m]) = (self.shape(), other.shape()) else {
            return Err(Error::shape(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        };
        self.reshape(&[1, n, k])?
            .bmm(&other.reshape(&[1, k2, m])?, false, false)?
            .reshape(&[n, m])
    }
}
