use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use rand::Rng;

use super::plan::{plan_attention, pool_windows, AttentionBudget, AttentionPlan, PlanMode};
use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::{reduced_width, SEGate};
use crate::nn::{join, Buffer, Conv3d, Module, Param, SpectralConv3d};
use crate::tensor::{Scalar, Tensor};

thread_local! {
    static PEAK_AFFINITY: Cell<usize> = const { Cell::new(0) };
}

/// Largest affinity matrix (in elements) materialised on this thread since
/// the last [`reset_peak_affinity`].
pub fn peak_affinity() -> usize {
    PEAK_AFFINITY.with(|p| p.get())
}

pub fn reset_peak_affinity() {
    PEAK_AFFINITY.with(|p| p.set(0));
}

fn note_affinity(n: usize) {
    PEAK_AFFINITY.with(|p| p.set(p.get().max(n)));
}

/// Spectrally normalised 1x1x1 query/key/value/output projections.
pub struct NonLocal<T: Scalar = f32> {
    pub theta: SpectralConv3d<T>,
    pub phi: SpectralConv3d<T>,
    pub g: SpectralConv3d<T>,
    pub w_o: SpectralConv3d<T>,
}

impl_module!(NonLocal { theta, phi, g, w_o });

impl<T: Scalar> NonLocal<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, reduced: usize, rng: &mut R) -> Self {
        let proj = |n: &str, cin: usize, cout: usize, rng: &mut R| {
            let conv = Conv3d::pointwise(&join(name, n), cin, cout, true, rng);
            SpectralConv3d::new(&join(name, n), conv, rng)
        };
        Self {
            theta: proj("theta", channels, reduced, rng),
            phi: proj("phi", channels, reduced, rng),
            g: proj("g", channels, reduced, rng),
            w_o: proj("w_o", reduced, channels, rng),
        }
    }

    pub fn reduced(&self) -> usize {
        self.theta.conv.out_channels()
    }

    pub fn set_spectral(&mut self, on: bool) {
        for p in [&mut self.theta, &mut self.phi, &mut self.g, &mut self.w_o] {
            p.enabled = on;
        }
    }

    /// Per-sample affinity `softmax(Q^T K / sqrt(C'))`, `[1, N_q, M_k]`.
    fn affinity(&self, q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
        let scale = 1.0 / (self.reduced() as f64).sqrt();
        let logits = q.bmm(k, true, false)?;
        note_affinity(logits.numel());
        logits.mul_scalar(scale)?.softmax(2)
    }

    fn project(&self, x_q: &Tensor<T>, x_kv: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let [b, ..] = x_q.dims5()?;
        let c = self.reduced();
        let flat = |t: Tensor<T>| {
            let n = t.numel() / (b * c);
            t.reshape(&[b, c, n])
        };
        Ok((
            flat(self.theta.forward(x_q)?)?,
            flat(self.phi.forward(x_kv)?)?,
            flat(self.g.forward(x_kv)?)?,
        ))
    }

    /// Attention from pooled queries to pooled keys, resized to `out_dims`
    /// and projected back to the input width.
    pub fn forward(&self, x_q: &Tensor<T>, x_kv: &Tensor<T>, out_dims: [usize; 3]) -> Result<Tensor<T>> {
        let [b, _, dq, hq, wq] = x_q.dims5()?;
        let c = self.reduced();
        let (q, k, v) = self.project(x_q, x_kv)?;
        let mut ys = Vec::with_capacity(b);
        // One sample at a time keeps each affinity matrix within budget.
        for i in 0..b {
            let (qi, ki, vi) = (q.narrow(0, i, 1)?, k.narrow(0, i, 1)?, v.narrow(0, i, 1)?);
            let a = self.affinity(&qi, &ki)?;
            ys.push(vi.bmm(&a, false, true)?);
        }
        let refs: Vec<&Tensor<T>> = ys.iter().collect();
        let mut y = Tensor::concat(&refs, 0)?.reshape(&[b, c, dq, hq, wq])?;
        if [dq, hq, wq] != out_dims {
            y = y.upsample_trilinear(out_dims)?;
        }
        self.w_o.forward(&y)
    }

    fn affinities(&self, x_q: &Tensor<T>, x_kv: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (q, k, _) = self.project(x_q, x_kv)?;
        (0..q.shape()[0])
            .map(|i| self.affinity(&q.narrow(0, i, 1)?, &k.narrow(0, i, 1)?))
            .collect()
    }
}

/// Memory-bounded hybrid attention: pooled non-local attention under token
/// and affinity caps, plus a squeeze-and-excitation residual; falls back to
/// the SE residual alone when the caps cannot be met.
pub struct Mbha<T: Scalar = f32> {
    pub se: SEGate<T>,
    pub nl: NonLocal<T>,
    pub budget: AttentionBudget,
    plans: RefCell<HashMap<[usize; 3], AttentionPlan>>,
}

impl<T: Scalar> Module<T> for Mbha<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.se.visit_params(f);
        self.nl.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.se.visit_params_mut(f);
        self.nl.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.nl.visit_buffers(f);
    }
}

impl<T: Scalar> Mbha<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, budget: AttentionBudget, rng: &mut R) -> Self {
        let reduced = reduced_width(channels, budget.r);
        Self {
            se: SEGate::new(&join(name, "se"), channels, reduced, rng),
            nl: NonLocal::new(&join(name, "nl"), channels, reduced, rng),
            budget,
            plans: RefCell::new(HashMap::new()),
        }
    }

    pub fn plan(&self, dims: [usize; 3]) -> Result<AttentionPlan> {
        if let Some(p) = self.plans.borrow().get(&dims) {
            return Ok(*p);
        }
        let p = plan_attention(dims, &self.budget)?;
        self.plans.borrow_mut().insert(dims, p);
        Ok(p)
    }

    fn check(&self, x: &Tensor<T>) -> Result<[usize; 3]> {
        let [_, c, d, h, w] = x.dims5()?;
        let expect = self.se.w1.in_channels();
        if c != expect {
            return Err(Error::shape("mbha", format!("block expects {expect} channels, got {c}")));
        }
        Ok([d, h, w])
    }

    fn pooled(&self, x: &Tensor<T>, dims: [usize; 3], s: usize) -> Result<Tensor<T>> {
        if s == 1 {
            Ok(x.clone())
        } else {
            x.avg_pool3d_axes(pool_windows(dims, s))
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self.check(x)?;
        let plan = self.plan(dims)?;
        let x_se = self.se.forward(x)?;
        let y = x.add(&x_se.mul_scalar(self.budget.beta)?)?;
        if plan.mode == PlanMode::SeOnly {
            return Ok(y);
        }
        let x_q = self.pooled(x, dims, plan.s_q)?;
        let x_kv = self.pooled(x, dims, plan.s_kv)?;
        let x_nl = self.nl.forward(&x_q, &x_kv, dims)?;
        y.add(&x_nl.mul_scalar(self.budget.alpha)?)
    }

    /// Affinity matrices of the pooled branch, one per sample; empty when
    /// the plan is SE-only.
    pub fn affinities(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let dims = self.check(x)?;
        let plan = self.plan(dims)?;
        if plan.mode == PlanMode::SeOnly {
            return Ok(Vec::new());
        }
        self.nl.affinities(&self.pooled(x, dims, plan.s_q)?, &self.pooled(x, dims, plan.s_kv)?)
    }
}

/// Unpooled 3-D self-attention `y = x + alpha * W_O(softmax(QK)V)`.
pub struct SelfAttention3d<T: Scalar = f32> {
    pub nl: NonLocal<T>,
    pub alpha: f64,
    /// Largest affinity (N^2 elements) allowed before erroring.
    pub max_affinity: usize,
}

impl_module!(SelfAttention3d { nl });

impl<T: Scalar> SelfAttention3d<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, budget: AttentionBudget, rng: &mut R) -> Self {
        Self {
            nl: NonLocal::new(&join(name, "nl"), channels, reduced_width(channels, budget.r), rng),
            alpha: budget.alpha,
            max_affinity: budget.t_attn,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, d, h, w] = x.dims5()?;
        let expect = self.nl.theta.conv.in_channels();
        if c != expect {
            return Err(Error::shape("self_attention3d", format!("block expects {expect} channels, got {c}")));
        }
        let n = d * h * w;
        if n.saturating_mul(n) > self.max_affinity {
            return Err(Error::invalid(format!(
                "full attention over {n} voxels needs {} affinity entries, cap is {}",
                n.saturating_mul(n),
                self.max_affinity
            )));
        }
        x.add(&self.nl.forward(x, x, [d, h, w])?.mul_scalar(self.alpha)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Mbha,
    Full,
    None,
}

/// Attention stage chosen by placement.
pub enum Attention<T: Scalar = f32> {
    Mbha(Mbha<T>),
    Full(SelfAttention3d<T>),
    None,
}

impl<T: Scalar> Attention<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, kind: AttentionKind, channels: usize, budget: AttentionBudget, rng: &mut R) -> Self {
        match kind {
            AttentionKind::Mbha => Self::Mbha(Mbha::new(name, channels, budget, rng)),
            AttentionKind::Full => Self::Full(SelfAttention3d::new(name, channels, budget, rng)),
            AttentionKind::None => Self::None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Self::Mbha(m) => m.forward(x),
            Self::Full(f) => f.forward(x),
            Self::None => Ok(x.clone()),
        }
    }
}

impl<T: Scalar> Module<T> for Attention<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Self::Mbha(m) => m.visit_params(f),
            Self::Full(a) => a.visit_params(f),
            Self::None => {}
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Self::Mbha(m) => m.visit_params_mut(f),
            Self::Full(a) => a.visit_params_mut(f),
            Self::None => {}
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        match self {
            Self::Mbha(m) => m.visit_buffers(f),
            Self::Full(a) => a.visit_buffers(f),
            Self::None => {}
        }
    }
}
