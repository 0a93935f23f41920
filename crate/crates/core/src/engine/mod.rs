//! Training orchestration, checkpoints and evaluation.

pub mod checkpoint;
mod config;
mod eval;
mod gan;
mod segmentation;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Blob, Checkpoint, CheckpointHeader, RngState};
pub use config::{SegmenterTraining, TrainConfig};
pub use eval::{evaluate, fidelity_report, synthesize, synthesize_dataset, ContrastReport, DiceReport, EvalReport, Summary, VolumeScores, DATA_RANGE};
pub use gan::{load_segmenter, train_gan, GanTrainer, StepLog};
pub use segmentation::{conditional_dice, downstream_dice, downstream_input, pretrain_segmenter, train_downstream, SegEpochLog};

use crate::data::{dataset_split, Dataset};
use crate::error::{Error, Result};
use crate::networks::{Contrast, Segmenter};

/// Uniform contrast draw.
pub fn sample_contrast<R: Rng + ?Sized>(rng: &mut R) -> Contrast {
    Contrast::ALL[rng.gen_range(0..3)]
}

/// Seeded train/validation partition holding out `validation` subjects.
pub fn train_val_split(ds: &Dataset, validation: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if validation >= ds.len() {
        return Err(Error::Data(format!("cannot hold out {validation} of {} subjects", ds.len())));
    }
    let ids: Vec<usize> = (0..ds.len()).collect();
    let parts = dataset_split(&ids, &[ds.len() - validation, validation], seed)?;
    Ok((ds.subset(&parts[0])?, ds.subset(&parts[1])?))
}

/// Stores the frozen conditional segmenter and optionally the four-channel
/// one.
pub fn segmenter_checkpoint(config: &TrainConfig, seg: &Segmenter<f32>, downstream: Option<&Segmenter<f32>>) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(CheckpointHeader {
        kind: "segmenter".into(),
        config: serde_json::to_value(config)?,
        config_hash: config.hash(),
        ..Default::default()
    });
    c.add_module("segmenter", seg);
    if let Some(d) = downstream {
        c.add_module("downstream", d);
    }
    Ok(c)
}

/// Reads back [`segmenter_checkpoint`] using `config` for the architecture.
pub fn load_segmenters(ckpt: &Checkpoint, config: &TrainConfig) -> Result<(Segmenter<f32>, Option<Segmenter<f32>>)> {
    if ckpt.header.kind != "segmenter" {
        return Err(Error::Format(format!("expected a segmenter checkpoint, got `{}`", ckpt.header.kind)));
    }
    let seg = load_segmenter(ckpt, "segmenter", config)?.ok_or_else(|| Error::Format("checkpoint lacks a segmenter".into()))?;
    Ok((seg, load_segmenter(ckpt, "downstream", config)?))
}

/// Frequencies of `n` uniform contrast draws.
pub fn contrast_histogram(seed: u64, n: usize) -> [usize; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = [0; 3];
    for _ in 0..n {
        h[sample_contrast(&mut rng).index()] += 1;
    }
    h
}
