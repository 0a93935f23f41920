mod common;

use std::collections::BTreeMap;

use mcsagan::attention::{AttentionBudget, AttentionKind};
use mcsagan::networks::{
    ArchConfig, Contrast, Critic, CriticConfig, FeatureConfig, FeatureExtractor, Generator, GeneratorConfig, Segmenter,
    SegmenterConfig,
};
use mcsagan::nn::{spectral_normalize, Buffer, ModuleExt};
use mcsagan::tensor::inference;
use mcsagan::{Error, Tensor};
use nalgebra::DMatrix;

fn vol(b: usize, d: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform(&[b, 1, d, d, d], -1.0, 1.0, &mut common::rng(seed))
}

fn param_counts() -> BTreeMap<String, usize> {
    let arch = ArchConfig::default();
    let mut r = common::rng(0);
    let mut out = BTreeMap::new();
    let g = Generator::<f32>::new(&arch.generator, arch.budget, &mut r).unwrap();
    out.insert("generator".to_string(), g.num_params());
    let mut no_mbha = arch.generator.clone();
    no_mbha.replace_mbha(AttentionKind::None);
    out.insert(
        "generator_without_mbha".to_string(),
        Generator::<f32>::new(&no_mbha, arch.budget, &mut r).unwrap().num_params(),
    );
    out.insert("critic".to_string(), Critic::<f32>::new(&arch.critic, &mut r).unwrap().num_params());
    out.insert("segmenter".to_string(), Segmenter::<f32>::new(&arch.segmenter, 4, &mut r).unwrap().num_params());
    out.insert("features".to_string(), FeatureExtractor::<f32>::new(&arch.features).num_params());
    out
}

#[test]
fn parameter_counts_match_golden_file() {
    let golden: BTreeMap<String, usize> =
        serde_json::from_str(include_str!("golden/param_counts.json")).expect("golden file parses");
    assert_eq!(param_counts(), golden);
}

#[test]
fn critic_parameter_count_by_hand() {
    let widths = [16usize, 32, 64];
    let mut cin = 2;
    let mut n = 0;
    for &c in &widths {
        n += c * cin * 64 + c;
        cin = c;
    }
    n += cin * 27 + 1 + cin * 3 + 3;
    let critic = Critic::<f32>::new(&CriticConfig { widths: widths.to_vec() }, &mut common::rng(0)).unwrap();
    assert_eq!(critic.num_params(), n);
}

#[test]
fn generator_shapes_and_range() {
    let arch = ArchConfig::default();
    let g = Generator::<f32>::new(&arch.generator, arch.budget, &mut common::rng(1)).unwrap();
    assert_eq!(g.config.divisor(), 16);
    let x = vol(2, 32, 2);
    let y = inference(|| g.forward(&x, &[Contrast::T2f, Contrast::T1n])).unwrap();
    assert_eq!(y.shape(), &[2, 1, 32, 32, 32]);
    assert!(y.data().iter().all(|v| v.abs() < 1.0));
    // the code changes the output
    let z = inference(|| g.forward(&x, &[Contrast::T1c, Contrast::T1n])).unwrap();
    let first = 32 * 32 * 32;
    assert_ne!(y.data()[..first], z.data()[..first]);
    assert_eq!(y.data()[first..], z.data()[first..]);

    let odd = vol(1, 24, 3);
    assert!(matches!(g.forward(&odd, &[Contrast::T2f]), Err(Error::Shape { .. })));
    assert!(g.forward(&x, &[Contrast::T2f]).is_err());
}

#[test]
fn every_attention_placement_builds_and_runs() {
    for kind in [AttentionKind::Mbha, AttentionKind::Full, AttentionKind::None] {
        let cfg = GeneratorConfig {
            widths: vec![8, 8],
            encoder_attention: vec![kind, kind],
            decoder_attention: vec![kind],
            bottleneck_attention: kind,
            ..GeneratorConfig::default()
        };
        let g = Generator::<f32>::new(&cfg, AttentionBudget::default(), &mut common::rng(4)).unwrap();
        let y = inference(|| g.forward(&vol(1, 8, 5), &[Contrast::T1c])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8, 8]);
    }
    let bad = GeneratorConfig {
        encoder_attention: vec![AttentionKind::None],
        ..GeneratorConfig::default()
    };
    assert!(Generator::<f32>::new(&bad, AttentionBudget::default(), &mut common::rng(0)).is_err());
}

#[test]
fn critic_map_and_logits() {
    let c = Critic::<f32>::new(&CriticConfig::default(), &mut common::rng(6)).unwrap();
    let (map, logits) = inference(|| c.forward(&vol(2, 32, 7), &vol(2, 32, 8))).unwrap();
    assert_eq!(map.shape(), &[2, 1, 4, 4, 4]);
    assert_eq!(logits.shape(), &[2, 3]);
    assert_eq!(Critic::score(&map).unwrap().shape(), &[2]);
    assert!(c.forward(&vol(2, 32, 7), &vol(1, 32, 8)).is_err());
}

#[test]
fn segmenter_and_features() {
    let seg = Segmenter::<f32>::new(&SegmenterConfig::default(), 4, &mut common::rng(9)).unwrap();
    let logits = inference(|| seg.forward(&vol(2, 16, 10), &[Contrast::T2f, Contrast::T1c])).unwrap();
    assert_eq!(logits.shape(), &[2, 1, 16, 16, 16]);
    let raw = Tensor::<f32>::zeros(&[1, 4, 16, 16, 16]);
    assert_eq!(inference(|| seg.forward_raw(&raw)).unwrap().shape(), &[1, 1, 16, 16, 16]);
    assert!(seg.forward_raw(&Tensor::zeros(&[1, 3, 16, 16, 16])).is_err());

    let fx = FeatureExtractor::<f32>::new(&FeatureConfig::default());
    let feats = inference(|| fx.forward(&vol(2, 32, 11))).unwrap();
    assert_eq!(feats.len(), 4);
    assert_eq!(feats[3].shape()[..2], [2, 64]);
    let pooled = inference(|| fx.pooled(&vol(2, 32, 11))).unwrap();
    assert_eq!(pooled.shape(), &[2, 64]);
    assert!(fx.forward(&vol(1, 4, 12)).is_err());
    // same seed, same weights
    let again = FeatureExtractor::<f32>::new(&FeatureConfig::default());
    assert_eq!(again.param_tensors()[0].data(), fx.param_tensors()[0].data());
}

#[test]
fn spectral_estimate_converges_to_the_largest_singular_value() {
    for seed in 0..5 {
        let w = common::randn(&[6, 10], seed);
        let svd = DMatrix::from_row_slice(6, 10, w.data()).singular_values();
        let top = svd.iter().cloned().fold(0.0, f64::max);
        let u = Buffer::new("u", common::randn(&[6], seed + 50).to_vec());
        let (wn, sigma) = spectral_normalize(&w, &u, 200).unwrap();
        assert!((sigma - top).abs() < 1e-6 * top, "{sigma} vs {top}");
        let s2 = DMatrix::from_row_slice(6, 10, wn.data()).singular_values();
        assert!((s2.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-6);
        // frozen estimates leave the stored vector untouched
        let before = u.data.borrow().clone();
        inference(|| spectral_normalize(&w, &u, 3)).unwrap();
        assert_eq!(*u.data.borrow(), before);
    }
}
