use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token and affinity caps plus residual scales of the hybrid attention block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionBudget {
    pub t_q: usize,
    pub t_kv: usize,
    pub t_attn: usize,
    pub kappa: usize,
    pub alpha: f64,
    pub beta: f64,
    pub r: usize,
}

impl Default for AttentionBudget {
    fn default() -> Self {
        Self {
            t_q: 4096,
            t_kv: 4096,
            t_attn: 1 << 22,
            kappa: 8,
            alpha: 0.2,
            beta: 0.2,
            r: 8,
        }
    }
}

impl AttentionBudget {
    pub fn validate(&self) -> Result<()> {
        if self.t_q == 0 || self.t_kv == 0 || self.t_attn == 0 || self.kappa == 0 || self.r == 0 {
            return Err(Error::invalid(format!("attention caps must be positive: {self:?}")));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlanMode {
    SeOnly,
    PooledAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionPlan {
    pub n_full: usize,
    pub mode: PlanMode,
    pub s_q: usize,
    pub s_kv: usize,
    pub q_dims: [usize; 3],
    pub k_dims: [usize; 3],
    pub n_q: usize,
    pub m_k: usize,
}

/// Pooled extent per axis; axes shorter than `s` collapse to one voxel.
pub fn pooled_dims(dims: [usize; 3], s: usize) -> [usize; 3] {
    dims.map(|d| (d / s).max(1))
}

/// Pooling window per axis matching [`pooled_dims`].
pub fn pool_windows(dims: [usize; 3], s: usize) -> [usize; 3] {
    dims.map(|d| s.min(d))
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("attention dims must be positive, got {:?}", dims)));
    }
    Ok(())
}

/// Smallest stride whose pooled token count fits under `cap`.
pub fn plan_stride(dims: [usize; 3], cap: usize) -> Result<usize> {
    check_dims(dims)?;
    if cap == 0 {
        return Err(Error::invalid("token cap must be positive"));
    }
    let max = *dims.iter().max().unwrap();
    // The clamped count is non-increasing in s and reaches 1 at s = max.
    Ok((1..=max)
        .find(|&s| pooled_dims(dims, s).iter().product::<usize>() <= cap)
        .unwrap_or(max))
}

pub fn plan_attention(dims: [usize; 3], budget: &AttentionBudget) -> Result<AttentionPlan> {
    check_dims(dims)?;
    budget.validate()?;
    let n_full: usize = dims.iter().product();
    let s_q = plan_stride(dims, budget.t_q)?;
    let s_kv = plan_stride(dims, budget.t_kv)?;
    let q_dims = pooled_dims(dims, s_q);
    let k_dims = pooled_dims(dims, s_kv);
    let n_q: usize = q_dims.iter().product();
    let m_k: usize = k_dims.iter().product();
    let too_big = n_full > budget.kappa.saturating_mul(budget.t_q);
    let over_affinity = n_q.saturating_mul(m_k) > budget.t_attn;
    let mode = if too_big || over_affinity {
        PlanMode::SeOnly
    } else {
        PlanMode::PooledAttention
    };
    Ok(AttentionPlan {
        n_full,
        mode,
        s_q,
        s_kv,
        q_dims,
        k_dims,
        n_q,
        m_k,
    })
}
