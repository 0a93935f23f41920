use crate::error::{Error, Result};
use crate::tensor::{numel, BackwardCtx, BackwardOp, Scalar, Tensor};

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when read as broadcast to `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let off = r - shape.len();
    let mut strides = vec![0; r];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + off] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_offset, [offset into each operand])` for every row of `out`,
/// where a row is the innermost axis. Returns the inner strides.
fn for_each_row<const N: usize>(
    out: &[usize],
    shapes: [&[usize]; N],
    mut f: impl FnMut(usize, [usize; N], [usize; N], usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, [0; N], [0; N], 1);
        return;
    }
    let r = out.len();
    let strides: Vec<Vec<usize>> = shapes.iter().map(|s| broadcast_strides(s, out)).collect();
    let inner = out[r - 1];
    let mut inner_strides = [0; N];
    for k in 0..N {
        inner_strides[k] = strides[k][r - 1];
    }
    let mut idx = vec![0usize; r - 1];
    let mut offs = [0usize; N];
    let mut out_off = 0;
    while out_off < total {
        f(out_off, offs, inner_strides, inner);
        out_off += inner;
        for d in (0..r.saturating_sub(1)).rev() {
            idx[d] += 1;
            for k in 0..N {
                offs[k] += strides[k][d];
            }
            if idx[d] < out[d] {
                break;
            }
            for k in 0..N {
                offs[k] -= strides[k][d] * out[d];
            }
            idx[d] = 0;
        }
    }
}

fn binary_kernel<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        return ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
    }
    if bd.len() == 1 && ad.len() == numel(out_shape) {
        let y = bd[0];
        return ad.iter().map(|&x| f(x, y)).collect();
    }
    if ad.len() == 1 && bd.len() == numel(out_shape) {
        let x = ad[0];
        return bd.iter().map(|&y| f(x, y)).collect();
    }
    let mut out = vec![T::zero(); numel(out_shape)];
    for_each_row(out_shape, [a.shape(), b.shape()], |o, [oa, ob], [sa, sb], n| {
        let row = &mut out[o..o + n];
        for (j, v) in row.iter_mut().enumerate() {
            *v = f(ad[oa + j * sa], bd[ob + j * sb]);
        }
    });
    out
}

/// Sums `big` (shaped `big_shape`) down to `small_shape`.
pub(crate) fn sum_to_kernel<T: Scalar>(big: &[T], big_shape: &[usize], small_shape: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); numel(small_shape)];
    if out.len() == 1 {
        out[0] = big.iter().copied().sum();
        return out;
    }
    for_each_row(big_shape, [small_shape], |o, [os], [ss], n| {
        let row = &big[o..o + n];
        if ss == 0 {
            out[os] += row.iter().copied().sum::<T>();
        } else {
            for (j, &v) in row.iter().enumerate() {
                out[os + j * ss] += v;
            }
        }
    });
    out
}

pub(crate) fn broadcast_kernel<T: Scalar>(small: &[T], small_shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); numel(out_shape)];
    for_each_row(out_shape, [small_shape], |o, [os], [ss], n| {
        let row = &mut out[o..o + n];
        for (j, v) in row.iter_mut().enumerate() {
            *v = small[os + j * ss];
        }
    });
    out
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary(BinaryKind);

impl<T: Scalar> BackwardOp<T> for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b, g) = (ctx.input(0), ctx.input(1), ctx.grad);
        let ga = if ctx.needs(0) {
            let full = match self.0 {
                BinaryKind::Add | BinaryKind::Sub => g.clone(),
                BinaryKind::Mul => g.mul(b)?,
                BinaryKind::Div => g.div(b)?,
            };
            Some(full.sum_to(a.shape())?)
        } else {
            None
        };
        let gb = if ctx.needs(1) {
            let full = match self.0 {
                BinaryKind::Add => g.clone(),
                BinaryKind::Sub => g.neg()?,
                BinaryKind::Mul => g.mul(a)?,
                // d(a/b)/db = -a/b^2 = -out/b
                BinaryKind::Div => g.mul(ctx.output)?.div(b)?.neg()?,
            };
            Some(full.sum_to(b.shape())?)
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Softplus,
    Powf(f64),
    AddScalar(f64),
    MulScalar(f64),
}

struct Unary(UnaryKind);

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> BackwardOp<T> for Unary {
    fn name(&self) -> &'static str {
        match self.0 {
            UnaryKind::Neg => "neg",
            UnaryKind::Exp => "exp",
            UnaryKind::Ln => "ln",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Abs => "abs",
            UnaryKind::Relu => "relu",
            UnaryKind::LeakyRelu(_) => "leaky_relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Powf(_) => "powf",
            UnaryKind::AddScalar(_) => "add_scalar",
            UnaryKind::MulScalar(_) => "mul_scalar",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, y, g) = (ctx.input(0), ctx.output, ctx.grad);
        let gx = match self.0 {
            UnaryKind::Neg => g.neg()?,
            UnaryKind::Exp => g.mul(y)?,
            UnaryKind::Ln => g.div(x)?,
            UnaryKind::Sqrt => g.div(y)?.mul_scalar(0.5)?,
            UnaryKind::Abs => g.mul(&x.map_const(|v| v.signum() * T::of((v != T::zero()) as u8 as f64)))?,
            UnaryKind::Relu => g.mul(&x.map_const(|v| if v > T::zero() { T::one() } else { T::zero() }))?,
            UnaryKind::LeakyRelu(s) => {
                let s = T::of(s);
                g.mul(&x.map_const(|v| if v > T::zero() { T::one() } else { s }))?
            }
            UnaryKind::Sigmoid => g.mul(&y.mul(&y.neg()?.add_scalar(1.0)?)?)?,
            UnaryKind::Tanh => g.mul(&y.mul(y)?.neg()?.add_scalar(1.0)?)?,
            UnaryKind::Softplus => g.mul(&x.sigmoid()?)?,
            UnaryKind::Powf(p) => g.mul(&x.powf(p - 1.0)?.mul_scalar(p)?)?,
            UnaryKind::AddScalar(_) => g.clone(),
            UnaryKind::MulScalar(c) => g.mul_scalar(c)?,
        };
        Ok(vec![Some(gx)])
    }
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
        let op = Binary(kind);
        let out_shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| {
            Error::shape(
                BackwardOp::<T>::name(&op),
                format!("cannot broadcast {:?} with {:?}", self.shape(), other.shape()),
            )
        })?;
        let data = match kind {
            BinaryKind::Add => binary_kernel(self, other, &out_shape, |x, y| x + y),
            BinaryKind::Sub => binary_kernel(self, other, &out_shape, |x, y| x - y),
            BinaryKind::Mul => binary_kernel(self, other, &out_shape, |x, y| x * y),
            BinaryKind::Div => binary_kernel(self, other, &out_shape, |x, y| x / y),
        };
        Tensor::from_op(data, out_shape, op, vec![self.clone(), other.clone()])
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Div)
    }

    fn unary(&self, kind: UnaryKind) -> Result<Tensor<T>> {
        let f: Box<dyn Fn(T) -> T> = match kind {
            UnaryKind::Neg => Box::new(|v: T| -v),
            UnaryKind::Exp => Box::new(|v: T| v.exp()),
            UnaryKind::Ln => Box::new(|v: T| v.ln()),
            UnaryKind::Sqrt => Box::new(|v: T| v.sqrt()),
            UnaryKind::Abs => Box::new(|v: T| v.abs()),
            UnaryKind::Relu => Box::new(|v: T| v.max(T::zero())),
            UnaryKind::LeakyRelu(s) => {
                let s = T::of(s);
                Box::new(move |v: T| if v > T::zero() { v } else { v * s })
            }
            UnaryKind::Sigmoid => Box::new(sigmoid),
            UnaryKind::Tanh => Box::new(|v: T| v.tanh()),
            UnaryKind::Softplus => Box::new(softplus),
            UnaryKind::Powf(p) => {
                let p = T::of(p);
                Box::new(move |v: T| v.powf(p))
            }
            UnaryKind::AddScalar(c) => {
                let c = T::of(c);
                Box::new(move |v: T| v + c)
            }
            UnaryKind::MulScalar(c) => {
                let c = T::of(c);
                Box::new(move |v: T| v * c)
            }
        };
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Unary(kind), vec![self.clone()])
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Neg)
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Ln)
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn abs(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Abs)
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor<T>> {
        self.unary(UnaryKind::LeakyRelu(slope))
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Tanh)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn powf(&self, p: f64) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Powf(p))
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.mul(self)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<T>> {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor<T>> {
        self.unary(UnaryKind::MulScalar(c))
    }
}
