//! Trains briefly, synthesizes every missing contrast and prints the
//! evaluation report.

use mcsagan::attention::AttentionKind;
use mcsagan::data::{generate_cohort, PhantomSpec};
use mcsagan::engine::{evaluate, synthesize, train_downstream, train_gan, train_val_split, GanTrainer, TrainConfig};
use mcsagan::networks::{ArchConfig, Contrast, CriticConfig, GeneratorConfig, SegmenterConfig};

fn main() -> mcsagan::Result<()> {
    let spec = PhantomSpec {
        dims: [16, 16, 16],
        ..Default::default()
    };
    let ds = generate_cohort(&spec, 10, 5)?;
    let (train, test) = train_val_split(&ds, 3, 0)?;
    let mut config = TrainConfig {
        epochs: 2,
        steps_per_epoch: Some(10),
        lr_milestones: vec![],
        use_seg: false,
        validate_every: 0,
        arch: ArchConfig {
            generator: GeneratorConfig {
                widths: vec![8, 16],
                encoder_attention: vec![AttentionKind::Mbha, AttentionKind::None],
                decoder_attention: vec![AttentionKind::Mbha],
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
    config.segmenter.downstream_epochs = 4;

    let mut trainer = GanTrainer::new(config.clone(), None)?;
    train_gan(&mut trainer, &train, None, &mut |_| Ok(()), &mut |_, _| Ok(()))?;
    trainer.downstream = Some(train_downstream(&train, None, &config, &mut |_| {})?.0);

    let subject = &test.samples[0];
    for c in Contrast::ALL {
        let y = synthesize(&trainer.generator, &subject.source, c)?;
        let err: f32 = y.data().iter().zip(subject.target(c).data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / y.numel() as f32;
        println!("{} {}: shape {:?}, mean abs error {err:.4}", subject.subject_id, c.name(), y.shape());
    }

    let report = evaluate(&trainer, &test)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
