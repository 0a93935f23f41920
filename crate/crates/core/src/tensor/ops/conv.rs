//! 3-D cross-correlation via im2col + GEMM, with data/filter gradient
//! kernels that are themselves differentiable operations.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_ld, BackwardCtx, BackwardOp, MatRef, Scalar, Tensor};

/// Output spatial dims of a convolution, `floor((n + 2p - k) / s) + 1`.
pub fn conv3d_output_dims(input: [usize; 3], kernel: [usize; 3], stride: usize, pad: usize) -> Result<[usize; 3]> {
    if stride == 0 {
        return Err(Error::invalid("convolution stride must be positive"));
    }
    let mut out = [0; 3];
    for i in 0..3 {
        let padded = input[i] + 2 * pad;
        if kernel[i] == 0 || padded < kernel[i] {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "kernel {:?} does not fit input {:?} with padding {pad}",
                    kernel, input
                ),
            ));
        }
        out[i] = (padded - kernel[i]) / stride + 1;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    stride: usize,
    pad: usize,
}

impl Geom {
    fn new(batch: usize, cin: usize, cout: usize, input: [usize; 3], kernel: [usize; 3], stride: usize, pad: usize) -> Result<Self> {
        let out = conv3d_output_dims(input, kernel, stride, pad)?;
        Ok(Self {
            batch,
            cin,
            cout,
            input,
            kernel,
            out,
            stride,
            pad,
        })
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the im2col matrix.
    fn k_rows(&self) -> usize {
        self.cin * self.k_vol()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.pad == 0
    }

    fn in_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cin, self.input[0], self.input[1], self.input[2]]
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.out[0], self.out[1], self.out[2]]
    }

    fn w_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.kernel[0], self.kernel[1], self.kernel[2]]
    }

    /// Range of output positions `o` along an axis for which
    /// `o * stride + k - pad` lands inside `[0, n)`.
    fn valid_range(&self, k: usize, n: usize, out_n: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= n - 1
        let hi_num = n as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.min(out_n as isize);
        let hi = (hi + 1).clamp(lo, out_n as isize);
        (lo as usize, hi as usize)
    }
}

/// Output z-slabs per im2col block, sized so a block stays cache-resident.
fn slab_depth(g: &Geom) -> usize {
    const TARGET: usize = 1 << 18;
    let per_slab = g.k_rows() * g.out[1] * g.out[2];
    (TARGET / per_slab.max(1)).clamp(1, g.out[0])
}

/// Unfolds output slabs `z0..z1` of one sample `[cin, D, H, W]` into
/// `cols[k_rows, (z1 - z0) * oh * ow]`.
fn im2col<T: Scalar>(x: &[T], g: &Geom, z0: usize, z1: usize, cols: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.out;
    let [kd, kh, kw] = g.kernel;
    let (s, p) = (g.stride, g.pad);
    let l = (z1 - z0) * oh * ow;
    cols[..g.k_rows() * l].fill(T::zero());
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            let (za, zb) = g.valid_range(a, d, od);
            let (za, zb) = (za.max(z0), zb.min(z1));
            for b in 0..kh {
                let (y0, y1) = g.valid_range(b, h, oh);
                for c in 0..kw {
                    let (x0, x1) = g.valid_range(c, w, ow);
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for z in za..zb {
                        let iz = z * s + a - p;
                        for y in y0..y1 {
                            let iy = y * s + b - p;
                            let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let o = ((z - z0) * oh + y) * ow;
                            let drow = &mut dst[o..o + ow];
                            if s == 1 {
                                let ix0 = x0 + c - p;
                                drow[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for xo in x0..x1 {
                                    drow[xo] = src[xo * s + c - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a block of columns into one sample.
fn col2im<T: Scalar>(cols: &[T], g: &Geom, z0: usize, z1: usize, x: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.out;
    let [kd, kh, kw] = g.kernel;
    let (s, p) = (g.stride, g.pad);
    let l = (z1 - z0) * oh * ow;
    for ci in 0..g.cin {
        let xc = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            let (za, zb) = g.valid_range(a, d, od);
            let (za, zb) = (za.max(z0), zb.min(z1));
            for b in 0..kh {
                let (y0, y1) = g.valid_range(b, h, oh);
                for c in 0..kw {
                    let (x0, x1) = g.valid_range(c, w, ow);
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    let src = &cols[row * l..(row + 1) * l];
                    for z in za..zb {
                        let iz = z * s + a - p;
                        for y in y0..y1 {
                            let iy = y * s + b - p;
                            let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let o = ((z - z0) * oh + y) * ow;
                            let srow = &src[o..o + ow];
                            if s == 1 {
                                let ix0 = x0 + c - p;
                                for (dv, sv) in dst[ix0..ix0 + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                                    *dv += *sv;
                                }
                            } else {
                                for xo in x0..x1 {
                                    dst[xo * s + c - p] += srow[xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slabs(g: &Geom) -> impl Iterator<Item = (usize, usize)> {
    let (od, step) = (g.out[0], slab_depth(g));
    (0..od).step_by(step).map(move |z0| (z0, (z0 + step).min(od)))
}

fn forward_kernel<T: Scalar>(x: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let (in_n, out_n, l, k) = (g.cin * g.in_vol(), g.cout * g.out_vol(), g.out_vol(), g.k_rows());
    let plane = g.out[1] * g.out[2];
    let mut out = vec![T::zero(); g.batch * out_n];
    let wm = MatRef::new(w, g.cout, k);
    out.par_chunks_mut(out_n).enumerate().for_each(|(bi, ob)| {
        let xb = &x[bi * in_n..(bi + 1) * in_n];
        if g.is_pointwise() {
            gemm(T::one(), wm, MatRef::new(xb, k, l), T::zero(), ob);
            return;
        }
        let mut cols = vec![T::zero(); k * slab_depth(g) * plane];
        for (z0, z1) in slabs(g) {
            let lb = (z1 - z0) * plane;
            im2col(xb, g, z0, z1, &mut cols);
            gemm_ld(T::one(), wm, MatRef::new(&cols[..k * lb], k, lb), T::zero(), &mut ob[z0 * plane..], l);
        }
    });
    out
}

fn data_grad_kernel<T: Scalar>(gout: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let (in_n, out_n, l, k) = (g.cin * g.in_vol(), g.cout * g.out_vol(), g.out_vol(), g.k_rows());
    let plane = g.out[1] * g.out[2];
    let mut gx = vec![T::zero(); g.batch * in_n];
    let wt = MatRef::new(w, g.cout, k).t();
    gx.par_chunks_mut(in_n).enumerate().for_each(|(bi, xb)| {
        let gb = &gout[bi * out_n..(bi + 1) * out_n];
        if g.is_pointwise() {
            gemm(T::one(), wt, MatRef::new(gb, g.cout, l), T::zero(), xb);
            return;
        }
        let mut cols = vec![T::zero(); k * slab_depth(g) * plane];
        for (z0, z1) in slabs(g) {
            let lb = (z1 - z0) * plane;
            let gblk = MatRef::strided(&gb[z0 * plane..], g.cout, lb, l);
            gemm(T::one(), wt, gblk, T::zero(), &mut cols[..k * lb]);
            col2im(&cols, g, z0, z1, xb);
        }
    });
    gx
}

fn filter_grad_kernel<T: Scalar>(x: &[T], gout: &[T], g: &Geom) -> Vec<T> {
    let (in_n, out_n, l, k) = (g.cin * g.in_vol(), g.cout * g.out_vol(), g.out_vol(), g.k_rows());
    let plane = g.out[1] * g.out[2];
    let partials: Vec<Vec<T>> = (0..g.batch)
        .into_par_iter()
        .map(|bi| {
            let xb = &x[bi * in_n..(bi + 1) * in_n];
            let gb = &gout[bi * out_n..(bi + 1) * out_n];
            let mut gw = vec![T::zero(); g.cout * k];
            if g.is_pointwise() {
                gemm(T::one(), MatRef::new(gb, g.cout, l), MatRef::new(xb, k, l).t(), T::zero(), &mut gw);
                return gw;
            }
            let mut cols = vec![T::zero(); k * slab_depth(g) * plane];
            for (z0, z1) in slabs(g) {
                let lb = (z1 - z0) * plane;
                im2col(xb, g, z0, z1, &mut cols);
                let gblk = MatRef::strided(&gb[z0 * plane..], g.cout, lb, l);
                gemm(T::one(), gblk, MatRef::new(&cols[..k * lb], k, lb).t(), T::one(), &mut gw);
            }
            gw
        })
        .collect();
    // Fixed summation order keeps the result independent of thread count.
    let mut acc = vec![T::zero(); g.cout * k];
    for p in partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

struct Conv {
    stride: usize,
    pad: usize,
}

impl<T: Scalar> BackwardOp<T> for Conv {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w, g) = (ctx.input(0), ctx.input(1), ctx.grad);
        let in_dims = spatial(x.shape());
        let k_dims = spatial(w.shape());
        let gx = if ctx.needs(0) {
            Some(conv_data(g, w, self.stride, self.pad, in_dims)?)
        } else {
            None
        };
        let gw = if ctx.needs(1) {
            Some(conv_filter(x, g, self.stride, self.pad, k_dims)?)
        } else {
            None
        };
        Ok(vec![gx, gw])
    }
}

struct ConvData {
    stride: usize,
    pad: usize,
}

impl<T: Scalar> BackwardOp<T> for ConvData {
    fn name(&self) -> &'static str {
        "conv3d_data_grad"
    }

    // out = D(g, w), linear in both: <h, D(g, w)> = <conv(h, w), g>
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (g, w, h) = (ctx.input(0), ctx.input(1), ctx.grad);
        let gg = if ctx.needs(0) {
            Some(h.conv3d_raw(w, self.stride, self.pad)?)
        } else {
            None
        };
        let gw = if ctx.needs(1) {
            Some(conv_filter(h, g, self.stride, self.pad, spatial(w.shape()))?)
        } else {
            None
        };
        Ok(vec![gg, gw])
    }
}

struct ConvFilter {
    stride: usize,
    pad: usize,
}

impl<T: Scalar> BackwardOp<T> for ConvFilter {
    fn name(&self) -> &'static str {
        "conv3d_filter_grad"
    }

    // out = F(x, g): <H, F(x, g)> = <conv(x, H), g>
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, g, hh) = (ctx.input(0), ctx.input(1), ctx.grad);
        let gx = if ctx.needs(0) {
            Some(conv_data(g, hh, self.stride, self.pad, spatial(x.shape()))?)
        } else {
            None
        };
        let gg = if ctx.needs(1) {
            Some(x.conv3d_raw(hh, self.stride, self.pad)?)
        } else {
            None
        };
        Ok(vec![gx, gg])
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

/// Gradient of a convolution with respect to its input.
fn conv_data<T: Scalar>(g: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize, in_dims: [usize; 3]) -> Result<Tensor<T>> {
    let [b, cout, ..] = g.dims5()?;
    let [wc_out, cin, kd, kh, kw] = w.dims5()?;
    let geom = Geom::new(b, cin, cout, in_dims, [kd, kh, kw], stride, pad)?;
    if wc_out != cout || spatial(g.shape()) != geom.out {
        return Err(Error::shape("conv3d_data_grad", format!("{:?} vs weight {:?}", g.shape(), w.shape())));
    }
    let data = data_grad_kernel(g.data(), w.data(), &geom);
    Tensor::from_op(data, geom.in_shape(), ConvData { stride, pad }, vec![g.clone(), w.clone()])
}

/// Gradient of a convolution with respect to its weight.
fn conv_filter<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, stride: usize, pad: usize, k_dims: [usize; 3]) -> Result<Tensor<T>> {
    let [b, cin, d, h, w] = x.dims5()?;
    let [gb, cout, ..] = g.dims5()?;
    let geom = Geom::new(b, cin, cout, [d, h, w], k_dims, stride, pad)?;
    if gb != b || spatial(g.shape()) != geom.out {
        return Err(Error::shape("conv3d_filter_grad", format!("{:?} vs input {:?}", g.shape(), x.shape())));
    }
    let data = filter_grad_kernel(x.data(), g.data(), &geom);
    Tensor::from_op(data, geom.w_shape(), ConvFilter { stride, pad }, vec![x.clone(), g.clone()])
}

impl<T: Scalar> Tensor<T> {
    fn conv3d_raw(&self, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let [b, cin, d, h, w] = self.dims5()?;
        let [cout, wcin, kd, kh, kw] = weight.dims5()?;
        if cin != wcin {
            return Err(Error::shape(
                "conv3d",
                format!("input {:?} has {cin} channels, weight {:?} expects {wcin}", self.shape(), weight.shape()),
            ));
        }
        let geom = Geom::new(b, cin, cout, [d, h, w], [kd, kh, kw], stride, pad)?;
        let data = forward_kernel(self.data(), weight.data(), &geom);
        Tensor::from_op(data, geom.out_shape(), Conv { stride, pad }, vec![self.clone(), weight.clone()])
    }

    /// Cross-correlation of `[B, Cin, D, H, W]` with `[Cout, Cin, kd, kh, kw]`.
    pub fn conv3d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let y = self.conv3d_raw(weight, stride, pad)?;
        match bias {
            None => Ok(y),
            Some(b) => {
                let cout = weight.shape()[0];
                if b.numel() != cout {
                    return Err(Error::shape("conv3d", format!("bias {:?} for {cout} output channels", b.shape())));
                }
                y.add(&b.reshape(&[1, cout, 1, 1, 1])?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Vec<f64> {
        let [b, cin, d, h, wd] = x.dims5().unwrap();
        let [cout, _, kd, kh, kw] = w.dims5().unwrap();
        let [od, oh, ow] = conv3d_output_dims([d, h, wd], [kd, kh, kw], s, p).unwrap();
        let mut out = vec![0.0; b * cout * od * oh * ow];
        let xv = x.data();
        let wv = w.data();
        for n in 0..b {
            for co in 0..cout {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..cin {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for c in 0..kw {
                                            let iz = (z * s + a) as isize - p as isize;
                                            let iy = (y * s + bb) as isize - p as isize;
                                            let ix = (xx * s + c) as isize - p as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((n * cin + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                            let wi = (((co * cin + ci) * kd + a) * kh + bb) * kw + c;
                                            acc += xv[xi] * wv[wi];
                                        }
                                    }
                                }
                            }
                            out[(((n * cout + co) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops_for_several_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(shape, wshape, s, p) in &[
            ([1, 2, 4, 4, 4], [3, 2, 3, 3, 3], 1, 1),
            ([2, 2, 5, 6, 7], [2, 2, 3, 3, 3], 2, 1),
            ([1, 2, 8, 8, 8], [3, 2, 4, 4, 4], 2, 1),
            ([2, 3, 3, 4, 5], [4, 3, 1, 1, 1], 1, 0),
            ([1, 1, 9, 5, 5], [1, 1, 7, 1, 1], 1, 0),
        ] {
            let x = Tensor::<f64>::uniform(&shape, -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::uniform(&wshape, -1.0, 1.0, &mut rng);
            let y = x.conv3d(&w, None, s, p).unwrap();
            let r = naive(&x, &w, s, p);
            for (a, b) in y.data().iter().zip(&r) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn identity_kernel_and_sum_of_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::uniform(&[1, 1, 3, 3, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::ones(&[1, 1, 1, 1, 1]);
        assert_eq!(x.conv3d(&w, None, 1, 0).unwrap().data(), x.data());
        let ones = Tensor::<f32>::ones(&[1, 1, 2, 2, 2]);
        let y = ones.conv3d(&ones, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn gradient_kernels_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[2, 2, 5, 5, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[3, 2, 4, 4, 4], -1.0, 1.0, &mut rng);
        let y = x.conv3d(&w, None, 2, 1).unwrap();
        let g = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let gx = conv_data(&g, &w, 2, 1, [5, 5, 5]).unwrap();
        let gw = conv_filter(&x, &g, 2, 1, [4, 4, 4]).unwrap();
        let lhs = dot(y.data(), g.data());
        assert!((lhs - dot(x.data(), gx.data())).abs() < 1e-10);
        assert!((lhs - dot(w.data(), gw.data())).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 2, 5, 5, 5]);
        assert!(x.conv3d(&w, None, 1, 0).is_err());
        let w = Tensor::<f32>::zeros(&[1, 3, 1, 1, 1]);
        assert!(x.conv3d(&w, None, 1, 0).is_err());
    }
}
