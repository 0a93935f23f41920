//! Prints how the hybrid attention block would handle a range of volumes.

use mcsagan::attention::{plan_attention, AttentionBudget, PlanMode};

fn main() -> mcsagan::Result<()> {
    let default = AttentionBudget::default();
    let roomy = AttentionBudget { t_attn: 1 << 26, ..default };
    let sizes = [[8, 8, 8], [16, 16, 16], [8, 16, 16], [32, 32, 32], [64, 64, 64], [160, 256, 256]];
    for (label, budget) in [("default budget", default), ("64M affinity entries", roomy)] {
        println!("{label}: t_q {} t_kv {} t_attn {} kappa {}", budget.t_q, budget.t_kv, budget.t_attn, budget.kappa);
        println!("{:>12} {:>9} {:>4} {:>4} {:>7} {:>7} {:>12}  mode", "dims", "voxels", "s_q", "s_kv", "n_q", "m_k", "affinity");
        for dims in sizes {
            let p = plan_attention(dims, &budget)?;
            let mode = match p.mode {
                PlanMode::SeOnly => "SE only",
                PlanMode::PooledAttention => "pooled attention",
            };
            println!(
                "{:>12} {:>9} {:>4} {:>4} {:>7} {:>7} {:>12}  {mode}",
                format!("{}x{}x{}", dims[0], dims[1], dims[2]),
                p.n_full,
                p.s_q,
                p.s_kv,
                p.n_q,
                p.m_k,
                p.n_q * p.m_k
            );
        }
        println!();
    }
    Ok(())
}
