//! A few adversarial steps with a deliberately small model on 16^3 phantoms.
//!
//! Set `RUST_LOG=info` to see per-step losses from the trainer.

use mcsagan::attention::AttentionKind;
use mcsagan::data::{generate_cohort, PhantomSpec};
use mcsagan::engine::{pretrain_segmenter, train_gan, train_val_split, GanTrainer, TrainConfig};
use mcsagan::networks::{ArchConfig, CriticConfig, GeneratorConfig, SegmenterConfig};

fn main() -> mcsagan::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let spec = PhantomSpec {
        dims: [16, 16, 16],
        ..Default::default()
    };
    let ds = generate_cohort(&spec, 12, 1)?;
    let (train, val) = train_val_split(&ds, 2, 0)?;

    let mut config = TrainConfig {
        epochs: 3,
        steps_per_epoch: Some(8),
        lr_milestones: vec![2],
        validation: 2,
        validate_every: 4,
        arch: ArchConfig {
            generator: GeneratorConfig {
                widths: vec![8, 16],
                encoder_attention: vec![AttentionKind::Mbha, AttentionKind::None],
                decoder_attention: vec![AttentionKind::Mbha],
                bottleneck_attention: AttentionKind::Full,
                groups: 4,
                head_width: 4,
                ..Default::default()
            },
            critic: CriticConfig { widths: vec![8, 16] },
            segmenter: SegmenterConfig { base_width: 4, levels: 2 },
            ..Default::default()
        },
        ..Default::default()
    };
    config.segmenter.epochs = 5;

    let (seg, history) = pretrain_segmenter(&train, Some(&val), &config, &mut |_| {})?;
    println!("segmenter held-out dice {:.3}", history.last().and_then(|h| h.val_dice).unwrap_or(0.0));

    let mut trainer = GanTrainer::new(config, Some(seg))?;
    train_gan(
        &mut trainer,
        &train,
        Some(&val),
        &mut |log| {
            let val = log.val_masked_l1.map(|v| format!("  val masked L1 {v:.4}")).unwrap_or_default();
            println!(
                "step {:3} epoch {} lr {:.1e}  G {:8.4}  C {:8.4}  W {:+.4}{val}",
                log.step,
                log.epoch,
                log.lr,
                log.generator.total,
                log.critic.last().map_or(0.0, |r| r.total),
                log.wasserstein
            );
            Ok(())
        },
        &mut |_, epoch| {
            println!("-- epoch {epoch} done");
            Ok(())
        },
    )?;
    println!("critic updates {} generator updates {}", trainer.critic_updates(), trainer.generator_updates());
    Ok(())
}
