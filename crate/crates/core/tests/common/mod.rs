//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use mcsagan::attention::{plan_attention, AttentionBudget, Mbha, PlanMode, SelfAttention3d};
use mcsagan::data::{pad_to_grid, percentile_clip};
use mcsagan::gradcheck::{check_fn, check_module, CheckConfig, CheckReport};
use mcsagan::layers::{AttentionGate, ResidualBlock, SEGate};
use mcsagan::losses::{self, GeneratorParts, LossWeights, SsimConfig};
use mcsagan::networks::{Contrast, FeatureConfig, FeatureExtractor, Segmenter, SegmenterConfig};
use mcsagan::nn::{normalize, Conv3d, ModuleExt, NormKind};
use mcsagan::metrics::{self, mfd, FeatureStats};
use mcsagan::tensor::{inference, Tensor};
use mcsagan::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type T64 = Tensor<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> T64 {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> T64 {
    Tensor::uniform(shape, lo, hi, &mut rng(seed))
}

/// Values in `[lo, hi]` with random signs, kept away from zero.
pub fn signed_away_from_zero(shape: &[usize], lo: f64, hi: f64, seed: u64) -> T64 {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = r.gen_range(lo..hi);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(v, shape).unwrap()
}

pub fn binary_mask(shape: &[usize], p: f64, seed: u64) -> T64 {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| if r.gen::<f64>() < p { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(v, shape).unwrap()
}

pub struct GradCase {
    pub name: String,
    pub report: Result<CheckReport>,
}

fn cfg() -> CheckConfig {
    CheckConfig::default()
}

/// Attention outputs sum thousands of O(1) terms; a larger step keeps
/// round-off in the difference quotient below the tolerance.
fn wide_cfg() -> CheckConfig {
    CheckConfig {
        eps: 1e-4,
        ..CheckConfig::default()
    }
}

type Fun = Box<dyn Fn(&[T64]) -> Result<T64>>;

fn fun_cases() -> Vec<(&'static str, Vec<T64>, Fun)> {
    let pos = |s: &[usize], seed| uniform(s, 0.5, 2.0, seed);
    let x = |s: &[usize], seed| randn(s, seed);
    let mut v: Vec<(&'static str, Vec<T64>, Fun)> = vec![
        ("add_broadcast", vec![x(&[2, 3, 4], 1), x(&[1, 3, 1], 2)], Box::new(|a| a[0].add(&a[1]))),
        ("sub_broadcast", vec![x(&[2, 3, 4], 3), x(&[4], 4)], Box::new(|a| a[0].sub(&a[1]))),
        ("mul_broadcast", vec![x(&[2, 3, 4], 5), x(&[2, 1, 4], 6)], Box::new(|a| a[0].mul(&a[1]))),
        ("div", vec![x(&[3, 4], 7), pos(&[3, 4], 8)], Box::new(|a| a[0].div(&a[1]))),
        ("div_broadcast", vec![x(&[3, 4], 9), pos(&[3, 1], 10)], Box::new(|a| a[0].div(&a[1]))),
        ("neg", vec![x(&[5], 11)], Box::new(|a| a[0].neg())),
        ("exp", vec![x(&[2, 5], 12)], Box::new(|a| a[0].exp())),
        ("ln", vec![pos(&[2, 5], 13)], Box::new(|a| a[0].ln())),
        ("sqrt", vec![pos(&[2, 5], 14)], Box::new(|a| a[0].sqrt())),
        ("abs", vec![signed_away_from_zero(&[12], 0.1, 1.0, 15)], Box::new(|a| a[0].abs())),
        ("relu", vec![signed_away_from_zero(&[12], 0.1, 1.0, 16)], Box::new(|a| a[0].relu())),
        ("leaky_relu", vec![signed_away_from_zero(&[12], 0.1, 1.0, 17)], Box::new(|a| a[0].leaky_relu(0.2))),
        ("sigmoid", vec![x(&[12], 18)], Box::new(|a| a[0].sigmoid())),
        ("tanh", vec![x(&[12], 19)], Box::new(|a| a[0].tanh())),
        ("softplus", vec![x(&[12], 20).mul_scalar(4.0).unwrap()], Box::new(|a| a[0].softplus())),
        ("powf", vec![pos(&[12], 21)], Box::new(|a| a[0].powf(1.5))),
        ("square", vec![x(&[12], 22)], Box::new(|a| a[0].square())),
        ("add_scalar", vec![x(&[6], 23)], Box::new(|a| a[0].add_scalar(0.7))),
        ("mul_scalar", vec![x(&[6], 24)], Box::new(|a| a[0].mul_scalar(-1.3))),
        ("matmul", vec![x(&[3, 4], 25), x(&[4, 5], 26)], Box::new(|a| a[0].matmul(&a[1]))),
        ("bmm", vec![x(&[2, 3, 4], 27), x(&[2, 4, 5], 28)], Box::new(|a| a[0].bmm(&a[1], false, false))),
        ("bmm_ta", vec![x(&[2, 4, 3], 29), x(&[2, 4, 5], 30)], Box::new(|a| a[0].bmm(&a[1], true, false))),
        ("bmm_tb", vec![x(&[2, 3, 4], 31), x(&[2, 5, 4], 32)], Box::new(|a| a[0].bmm(&a[1], false, true))),
        ("bmm_ta_tb", vec![x(&[2, 4, 3], 33), x(&[2, 5, 4], 34)], Box::new(|a| a[0].bmm(&a[1], true, true))),
        (
            "conv3d_same",
            vec![x(&[2, 2, 5, 5, 5], 35), x(&[3, 2, 3, 3, 3], 36), x(&[3], 37)],
            Box::new(|a| a[0].conv3d(&a[1], Some(&a[2]), 1, 1)),
        ),
        (
            "conv3d_strided_even_kernel",
            vec![x(&[1, 2, 6, 6, 6], 38), x(&[2, 2, 4, 4, 4], 39), x(&[2], 40)],
            Box::new(|a| a[0].conv3d(&a[1], Some(&a[2]), 2, 1)),
        ),
        (
            "conv3d_valid_no_bias",
            vec![x(&[1, 3, 5, 4, 6], 41), x(&[2, 3, 3, 3, 3], 42)],
            Box::new(|a| a[0].conv3d(&a[1], None, 2, 0)),
        ),
        ("avg_pool3d", vec![x(&[1, 2, 4, 4, 4], 43)], Box::new(|a| a[0].avg_pool3d(2))),
        ("avg_pool3d_axes", vec![x(&[1, 2, 2, 6, 4], 44)], Box::new(|a| a[0].avg_pool3d_axes([1, 3, 2]))),
        ("upsample_trilinear", vec![x(&[1, 2, 3, 3, 2], 45)], Box::new(|a| a[0].upsample_trilinear([5, 6, 4]))),
        ("global_avg_pool", vec![x(&[2, 3, 2, 3, 2], 46)], Box::new(|a| a[0].global_avg_pool())),
        ("sum_axes", vec![x(&[2, 3, 4], 47)], Box::new(|a| a[0].sum_axes(&[0, 2], false))),
        ("mean_axes_keepdim", vec![x(&[2, 3, 4], 48)], Box::new(|a| a[0].mean_axes(&[1], true))),
        ("sum_all", vec![x(&[2, 3], 49)], Box::new(|a| a[0].sum_all())),
        ("mean_all", vec![x(&[2, 3], 50)], Box::new(|a| a[0].mean_all())),
        ("reshape", vec![x(&[2, 6], 51)], Box::new(|a| a[0].reshape(&[3, 4])?.square())),
        ("permute", vec![x(&[2, 3, 4], 52)], Box::new(|a| a[0].permute(&[2, 0, 1])?.mul(&randn(&[4, 2, 3], 99)))),
        ("broadcast_to", vec![x(&[3, 1], 53)], Box::new(|a| a[0].broadcast_to(&[2, 3, 4]))),
        ("sum_to", vec![x(&[2, 3, 4], 54)], Box::new(|a| a[0].sum_to(&[3, 1]))),
        ("concat", vec![x(&[2, 1, 3], 55), x(&[2, 2, 3], 56)], Box::new(|a| Tensor::concat(&[&a[0], &a[1]], 1))),
        ("narrow", vec![x(&[3, 5], 57)], Box::new(|a| a[0].narrow(1, 1, 3))),
        ("pad_axis", vec![x(&[2, 3], 58)], Box::new(|a| a[0].pad_axis(1, 2, 6))),
        ("softmax", vec![x(&[3, 5], 59)], Box::new(|a| a[0].softmax(1))),
        ("log_softmax", vec![x(&[3, 5], 60)], Box::new(|a| a[0].log_softmax(-1))),
        ("instance_norm", vec![x(&[2, 3, 3, 3, 2], 61)], Box::new(|a| normalize(&a[0], NormKind::Instance, 1e-5))),
        ("group_norm", vec![x(&[2, 4, 2, 3, 2], 62)], Box::new(|a| normalize(&a[0], NormKind::Group(2), 1e-5))),
    ];

    // losses
    let vol = [2, 1, 4, 4, 4];
    v.push((
        "critic_wgan_loss",
        vec![x(&[4], 70), x(&[4], 71)],
        Box::new(|a| losses::critic_wgan_loss(&a[0], &a[1])),
    ));
    v.push(("generator_adv_loss", vec![x(&[4], 72)], Box::new(|a| losses::generator_adv_loss(&a[0]))));
    v.push((
        "gradient_penalty",
        vec![x(&[3, 2, 3, 3, 3], 75)],
        Box::new(|a| {
            // real and fake are detached inside the penalty; only the
            // scorer weights receive gradients
            let (real, fake) = (randn(&[2, 2, 4, 4, 4], 73), randn(&[2, 2, 4, 4, 4], 74));
            let w = a[0].clone();
            let scorer = move |y: &T64| y.conv3d(&w, None, 1, 1)?.tanh()?.sum_all();
            losses::gradient_penalty_at(scorer, &real, &fake, &[0.3, 0.8])
        }),
    ));
    v.push((
        "classification_loss",
        vec![x(&[3, 3], 76)],
        Box::new(|a| losses::classification_loss(&a[0], &[Contrast::T2f, Contrast::T1c, Contrast::T1n])),
    ));
    let mask = binary_mask(&vol, 0.3, 77);
    let y = randn(&vol, 78);
    {
        let (mask, y) = (mask.clone(), y.clone());
        v.push((
            "reconstruction_loss",
            vec![x(&vol, 79)],
            Box::new(move |a| losses::reconstruction_loss(&a[0], &y, &mask, 4.0)),
        ));
    }
    {
        let y = uniform(&[1, 1, 8, 8, 8], -1.0, 1.0, 80);
        let extractor = FeatureExtractor::<f64>::new(&FeatureConfig {
            widths: [2, 3, 3, 4],
            seed: 5,
        });
        v.push((
            "perceptual_loss",
            vec![uniform(&[1, 1, 8, 8, 8], -1.0, 1.0, 81)],
            Box::new(move |a| losses::perceptual_loss(&a[0], &y, &extractor, &losses::PERCEPTUAL_WEIGHTS)),
        ));
    }
    let small = SsimConfig {
        window: 3,
        ..SsimConfig::default()
    };
    {
        let y = uniform(&[1, 1, 8, 8, 8], -1.0, 1.0, 82);
        v.push((
            "msssim_loss",
            vec![uniform(&[1, 1, 8, 8, 8], -1.0, 1.0, 83)],
            Box::new(move |a| losses::msssim_loss(&a[0], &y, &small)),
        ));
    }
    v.push((
        "ssim",
        vec![uniform(&[1, 1, 6, 6, 6], -1.0, 1.0, 84), uniform(&[1, 1, 6, 6, 6], -1.0, 1.0, 85)],
        Box::new(move |a| losses::ssim(&a[0], &a[1], &small)),
    ));
    {
        let mask = mask.clone();
        v.push(("bce_with_logits", vec![x(&vol, 86)], Box::new(move |a| losses::bce_with_logits(&a[0], &mask))));
    }
    {
        let mask = mask.clone();
        v.push((
            "soft_dice_loss",
            vec![uniform(&vol, 0.05, 0.95, 87)],
            Box::new(move |a| losses::soft_dice_loss(&a[0], &mask)),
        ));
    }
    {
        let mask = mask.clone();
        v.push(("seg_terms", vec![x(&vol, 88)], Box::new(move |a| losses::seg_terms(&a[0], &mask))));
    }
    {
        let mask = mask.clone();
        v.push((
            "segmenter_pretrain_loss",
            vec![x(&vol, 89)],
            Box::new(move |a| losses::segmenter_pretrain_loss(&a[0], &mask)),
        ));
    }
    {
        let mut seg = Segmenter::<f64>::new(
            &SegmenterConfig {
                base_width: 2,
                levels: 2,
            },
            4,
            &mut rng(90),
        )
        .unwrap();
        seg.set_trainable(false);
        let mask = mask.clone();
        v.push((
            "seg_consistency_loss",
            vec![x(&vol, 91)],
            Box::new(move |a| losses::seg_consistency_loss(&a[0], &[Contrast::T1c, Contrast::T2f], &mask, &seg)),
        ));
    }
    v.push((
        "generator_total",
        (0..6).map(|i| x(&[], 92 + i)).collect(),
        Box::new(|a| {
            let parts = GeneratorParts {
                adv: a[0].clone(),
                cls: a[1].clone(),
                rec: a[2].clone(),
                seg: a[3].clone(),
                perc: a[4].clone(),
                msssim: a[5].clone(),
            };
            Ok(losses::generator_total(&parts, &LossWeights::default())?.0)
        }),
    ));
    v.push((
        "critic_total",
        (0..3).map(|i| x(&[], 98 + i)).collect(),
        Box::new(|a| Ok(losses::critic_total(&a[0], &a[1], &a[2], &LossWeights::default())?.0)),
    ));
    v
}

fn block_cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    let mut push = |name: &str, report: Result<CheckReport>| {
        out.push(GradCase {
            name: name.to_string(),
            report,
        })
    };

    let mut r = rng(200);
    let mut res = ResidualBlock::<f64>::new("res", 2, 4, NormKind::Instance, &mut r);
    push(
        "residual_block_projection",
        check_module(&mut res, &[randn(&[1, 2, 5, 5, 5], 201)], |m, x| m.forward(&x[0]), cfg()),
    );
    let mut res = ResidualBlock::<f64>::new("res", 4, 4, NormKind::Group(2), &mut r);
    push(
        "residual_block_identity",
        check_module(&mut res, &[randn(&[2, 4, 4, 4, 4], 202)], |m, x| m.forward(&x[0]), cfg()),
    );

    let mut se = SEGate::<f64>::new("se", 8, 4, &mut r);
    push("se_gate", check_module(&mut se, &[randn(&[2, 8, 3, 3, 3], 203)], |m, x| m.forward(&x[0]), cfg()));

    let mut gate = AttentionGate::<f64>::new("ag", 4, 6, &mut r);
    push(
        "attention_gate",
        check_module(
            &mut gate,
            &[randn(&[1, 4, 8, 8, 8], 204), randn(&[1, 6, 4, 4, 4], 205)],
            |m, x| m.forward(&x[0], &x[1]),
            cfg(),
        ),
    );

    let pooled = AttentionBudget {
        t_q: 64,
        t_kv: 8,
        ..AttentionBudget::default()
    };
    let mut mbha = Mbha::<f64>::new("mbha", 8, pooled, &mut r);
    mbha.nl.set_spectral(false);
    push(
        "mbha_pooled",
        check_module(&mut mbha, &[randn(&[2, 8, 8, 8, 8], 206)], |m, x| m.forward(&x[0]), wide_cfg()),
    );
    let se_only = AttentionBudget {
        t_q: 8,
        t_kv: 8,
        ..AttentionBudget::default()
    };
    let mut mbha = Mbha::<f64>::new("mbha", 8, se_only, &mut r);
    push(
        "mbha_se_only",
        check_module(&mut mbha, &[randn(&[1, 8, 8, 8, 8], 207)], |m, x| m.forward(&x[0]), wide_cfg()),
    );

    let mut full = SelfAttention3d::<f64>::new("sa", 8, AttentionBudget::default(), &mut r);
    full.nl.set_spectral(false);
    push(
        "self_attention_full",
        check_module(&mut full, &[randn(&[2, 8, 4, 4, 3], 208)], |m, x| m.forward(&x[0]), wide_cfg()),
    );

    let mut conv = Conv3d::<f64>::new("conv", 2, 3, 3, 2, 1, true, &mut r);
    push(
        "conv3d_layer",
        check_module(&mut conv, &[randn(&[1, 2, 6, 6, 6], 209)], |m, x| m.forward(&x[0]), cfg()),
    );
    out
}

/// Every differentiable primitive, block and loss term, checked against
/// central finite differences in f64.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut out: Vec<GradCase> = fun_cases()
        .into_iter()
        .map(|(name, inputs, f)| GradCase {
            name: name.to_string(),
            report: check_fn(&inputs, |xs| f(xs), cfg()),
        })
        .collect();
    out.extend(block_cases());
    out
}

/// Smallest stride whose clamped pooled grid fits `cap`, by exhaustive scan.
pub fn stride_oracle(dims: [usize; 3], cap: usize) -> usize {
    let max = *dims.iter().max().unwrap();
    for s in 1..=max {
        let n: usize = dims.iter().map(|&d| (d / s).max(1)).product();
        if n <= cap {
            return s;
        }
    }
    max
}

/// One randomized planner case and the violations found, if any.
pub fn check_plan_case(dims: [usize; 3], budget: &AttentionBudget) -> std::result::Result<(), String> {
    let plan = plan_attention(dims, budget).map_err(|e| e.to_string())?;
    let n_full: usize = dims.iter().product();
    let sq = stride_oracle(dims, budget.t_q);
    let skv = stride_oracle(dims, budget.t_kv);
    if plan.s_q != sq || plan.s_kv != skv {
        return Err(format!("{dims:?} {budget:?}: strides ({}, {}) vs oracle ({sq}, {skv})", plan.s_q, plan.s_kv));
    }
    if plan.n_full != n_full {
        return Err(format!("{dims:?}: n_full {}", plan.n_full));
    }
    if plan.n_q > budget.t_q || plan.m_k > budget.t_kv {
        return Err(format!("{dims:?} {budget:?}: token caps exceeded by {plan:?}"));
    }
    if plan.mode == PlanMode::PooledAttention && plan.n_q * plan.m_k > budget.t_attn {
        return Err(format!("{dims:?} {budget:?}: affinity cap exceeded by {plan:?}"));
    }
    let fail_safe = n_full > budget.kappa * budget.t_q;
    if fail_safe && plan.mode != PlanMode::SeOnly {
        return Err(format!("{dims:?} {budget:?}: fail-safe not triggered"));
    }
    // With an affinity cap that can never bind, SE-only happens exactly when
    // the fail-safe fires.
    let affinity_slack = budget.t_attn >= budget.t_q.saturating_mul(budget.t_kv);
    if affinity_slack && (plan.mode == PlanMode::SeOnly) != fail_safe {
        return Err(format!("{dims:?} {budget:?}: mode {:?} but fail-safe = {fail_safe}", plan.mode));
    }
    Ok(())
}

pub fn random_plan_case(r: &mut ChaCha8Rng) -> ([usize; 3], AttentionBudget) {
    let dims = [r.gen_range(1..=48), r.gen_range(1..=96), r.gen_range(1..=96)];
    let t_q = r.gen_range(1..=6000);
    let t_kv = r.gen_range(1..=6000);
    let t_attn = if r.gen::<bool>() {
        t_q * t_kv + r.gen_range(0..1000)
    } else {
        r.gen_range(1..=1 << 22)
    };
    let kappa = if r.gen_range(0..4) == 0 { r.gen_range(1..=16) } else { 8 };
    (
        dims,
        AttentionBudget {
            t_q,
            t_kv,
            t_attn,
            kappa,
            ..AttentionBudget::default()
        },
    )
}

fn conv1x1(w: &T64, b: &T64, x: &[f64]) -> Vec<f64> {
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let (w, b) = (w.data(), b.data());
    (0..cout).map(|o| b[o] + (0..cin).map(|i| w[o * cin + i] * x[i]).sum::<f64>()).collect()
}

fn voxel(x: &[f64], c: usize, n: usize, sample: usize, i: usize) -> Vec<f64> {
    (0..c).map(|k| x[(sample * c + k) * n + i]).collect()
}

/// Dense-loop squeeze-and-excitation residual `x + beta * x * s(x)`.
pub fn se_residual_oracle(m: &Mbha<f64>, x: &T64) -> Vec<f64> {
    let [b, c, d, h, w] = x.dims5().unwrap();
    let n = d * h * w;
    let xs = x.data();
    let mut out = xs.to_vec();
    let (w1, b1) = (m.se.w1.weight.tensor(), m.se.w1.bias.as_ref().unwrap().tensor());
    let (w2, b2) = (m.se.w2.weight.tensor(), m.se.w2.bias.as_ref().unwrap().tensor());
    for s in 0..b {
        let z: Vec<f64> = (0..c).map(|k| xs[(s * c + k) * n..(s * c + k + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let hidden: Vec<f64> = conv1x1(w1, b1, &z).into_iter().map(|v| v.max(0.0)).collect();
        let gate: Vec<f64> = conv1x1(w2, b2, &hidden).into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        for k in 0..c {
            for i in 0..n {
                let idx = (s * c + k) * n + i;
                out[idx] += m.budget.beta * xs[idx] * gate[k];
            }
        }
    }
    out
}

/// Dense-loop full-resolution attention branch plus the SE residual.
pub fn mbha_unpooled_oracle(m: &Mbha<f64>, x: &T64) -> Vec<f64> {
    let [b, c, d, h, w] = x.dims5().unwrap();
    let n = d * h * w;
    let mut out = se_residual_oracle(m, x);
    let weights = |p: &mcsagan::nn::SpectralConv3d<f64>| {
        (inference(|| p.normalized_weight()).unwrap(), p.conv.bias.as_ref().unwrap().tensor().clone())
    };
    let (wt, bt) = weights(&m.nl.theta);
    let (wp, bp) = weights(&m.nl.phi);
    let (wg, bg) = weights(&m.nl.g);
    let (wo, bo) = weights(&m.nl.w_o);
    let cr = wt.shape()[0] as f64;
    let xs = x.data();
    for s in 0..b {
        let vox: Vec<Vec<f64>> = (0..n).map(|i| voxel(xs, c, n, s, i)).collect();
        let q: Vec<Vec<f64>> = vox.iter().map(|v| conv1x1(&wt, &bt, v)).collect();
        let k: Vec<Vec<f64>> = vox.iter().map(|v| conv1x1(&wp, &bp, v)).collect();
        let g: Vec<Vec<f64>> = vox.iter().map(|v| conv1x1(&wg, &bg, v)).collect();
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / cr.sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut y = vec![0.0; g[0].len()];
            for j in 0..n {
                for (yc, gc) in y.iter_mut().zip(&g[j]) {
                    *yc += e[j] / z * gc;
                }
            }
            let o = conv1x1(&wo, &bo, &y);
            for kk in 0..c {
                out[(s * c + kk) * n + i] += m.budget.alpha * o[kk];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn penalty_of_sum_scorer(n: usize) -> f64 {
    let shape = match n {
        8 => [2, 1, 2, 2, 2],
        16 => [2, 1, 2, 2, 4],
        64 => [2, 1, 4, 4, 4],
        _ => unreachable!(),
    };
    let real = randn(&shape, n as u64);
    let fake = randn(&shape, n as u64 + 1);
    losses::gradient_penalty_at(|y| y.sum_all(), &real, &fake, &[0.25, 0.9]).unwrap().item().unwrap()
}

pub fn unit_generator_total() -> (f64, f64) {
    let one = || Tensor::<f64>::scalar(1.0);
    let parts = GeneratorParts {
        adv: one(),
        cls: one(),
        rec: one(),
        seg: one(),
        perc: one(),
        msssim: one(),
    };
    let (t, report) = losses::generator_total(&parts, &LossWeights::default()).unwrap();
    (t.item().unwrap(), report.reconstruct())
}

pub fn metric_identities() -> Vec<(&'static str, f64, f64)> {
    let x = uniform(&[1, 1, 16, 16, 16], -1.0, 1.0, 11);
    let m = binary_mask(&[1, 1, 16, 16, 16], 0.1, 12);
    let rows: Vec<Vec<f64>> = (0..40).map(|i| randn(&[6], 100 + i).to_vec()).collect();
    let s = FeatureStats::from_features(&rows).unwrap();
    let diag = |a: f64, b: f64| FeatureStats {
        mu: vec![0.0, 0.0],
        sigma: vec![a, 0.0, 0.0, b],
        n: 10,
    };
    vec![
        ("ssim(x, x)", metrics::ssim(&x, &x).unwrap(), 1.0),
        ("ms_ssim(x, x)", metrics::ms_ssim(&x, &x).unwrap(), 1.0),
        ("mse(x, x)", metrics::mse(&x, &x).unwrap(), 0.0),
        ("dice(m, m)", metrics::dice(&m, &m).unwrap(), 1.0),
        ("mfd(s, s)", mfd(&s, &s).unwrap(), 0.0),
        ("mfd(diag(1,4), diag(4,1))", mfd(&diag(1.0, 4.0), &diag(4.0, 1.0)).unwrap(), 2.0),
    ]
}

/// Percentile by full sort and linear interpolation of order statistics.
pub fn sorted_percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn percentile_clip_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let v: Vec<f64> = (0..1_000_000).map(|_| r.gen::<f64>().powi(3) * 4000.0 - 50.0).collect();
    let mut s = v.clone();
    s.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted_percentile(&s, 0.1), sorted_percentile(&s, 99.9));
    let got = percentile_clip(&v, 0.1, 99.9).unwrap();
    got.iter().zip(&v).map(|(g, x)| (g - x.clamp(lo, hi)).abs()).fold(0.0, f64::max)
}

/// Leading and trailing pad counts along each axis of a padded all-ones
/// volume.
pub fn measured_padding(src: [usize; 3], target: [usize; 3]) -> [(usize, usize); 3] {
    let v = Tensor::<f32>::ones(&src);
    let p = pad_to_grid(&v, target, -1.0).unwrap();
    let [_, th, tw] = target;
    let at = |z: usize, y: usize, x: usize| p.data()[(z * th + y) * tw + x];
    let (cz, cy, cx) = (target[0] / 2, target[1] / 2, target[2] / 2);
    let lead = |f: &dyn Fn(usize) -> f32, n: usize| (0..n).take_while(|&i| f(i) == -1.0).count();
    let trail = |f: &dyn Fn(usize) -> f32, n: usize| (0..n).rev().take_while(|&i| f(i) == -1.0).count();
    let fz = |i| at(i, cy, cx);
    let fy = |i| at(cz, i, cx);
    let fx = |i| at(cz, cy, i);
    let ones = p.data().iter().filter(|&&v| v == 1.0).count();
    assert_eq!(ones, src.iter().product::<usize>());
    [
        (lead(&fz, target[0]), trail(&fz, target[0])),
        (lead(&fy, target[1]), trail(&fy, target[1])),
        (lead(&fx, target[2]), trail(&fx, target[2])),
    ]
}

/// SE-only block with the residual it should produce.
pub fn se_only_case(seed: u64) -> (Mbha<f64>, T64) {
    let mut r = rng(seed);
    let budget = AttentionBudget { t_q: 4, t_kv: 4, ..AttentionBudget::default() };
    let c = [8, 16][seed as usize % 2];
    let m = Mbha::<f64>::new("m", c, budget, &mut r);
    let dims = [3 + seed as usize % 4, 6, 5];
    assert_eq!(m.plan(dims).unwrap().mode, PlanMode::SeOnly);
    let x = randn(&[2, c, dims[0], dims[1], dims[2]], 100 + seed);
    (m, x)
}

pub fn se_identity_error(seed: u64) -> f64 {
    let (m, x) = se_only_case(seed);
    let y = inference(|| m.forward(&x)).unwrap();
    max_abs_diff(y.data(), &se_residual_oracle(&m, &x))
}

/// Unit-stride pooled attention against the dense-loop oracle.
pub fn unpooled_oracle_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let budget = AttentionBudget { t_q: 512, t_kv: 512, ..AttentionBudget::default() };
    let m = Mbha::<f64>::new("m", 8, budget, &mut r);
    let dims = [2 + seed as usize % 3, 4, 3];
    let plan = m.plan(dims).unwrap();
    assert_eq!((plan.s_q, plan.s_kv, plan.mode), (1, 1, PlanMode::PooledAttention));
    let x = randn(&[2, 8, dims[0], dims[1], dims[2]], 50 + seed);
    let y = inference(|| m.forward(&x)).unwrap();
    max_abs_diff(y.data(), &mbha_unpooled_oracle(&m, &x))
}
