//! Budgeted hybrid attention and plain 3-D self-attention.

mod block;
mod plan;

pub use block::{peak_affinity, reset_peak_affinity, Attention, AttentionKind, Mbha, NonLocal, SelfAttention3d};
pub use plan::{plan_attention, plan_stride, pool_windows, pooled_dims, AttentionBudget, AttentionPlan, PlanMode};
