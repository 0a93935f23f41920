//! Paired phantoms, preprocessing and on-disk volumes.

mod io;
mod phantom;
mod preprocess;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Contrast;
use crate::tensor::Tensor;

pub use io::{decode_volume, encode_volume, read_volume, write_volume, MAGIC, VERSION};
pub use phantom::{generate_raw, PhantomSpec, RawPhantom, Transfer};
pub use preprocess::{grid_padding, normalize_volume, pad_to_grid, percentile_clip, percentiles, CLIP_HIGH, CLIP_LOW};

/// A paired record: T2w source, three targets, tumour mask. Volumes are
/// `[D, H, W]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub subject_id: String,
    pub source: Tensor<f32>,
    /// Indexed by [`Contrast::index`].
    pub targets: [Tensor<f32>; 3],
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.source.shape();
        [s[0], s[1], s[2]]
    }

    pub fn target(&self, c: Contrast) -> &Tensor<f32> {
        &self.targets[c.index()]
    }

    /// Checks shared dims, the `[-1, 1]` range and a binary mask.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("{}: {m}", self.subject_id)));
        if self.source.rank() != 3 {
            return bad(format!("volumes must be 3-D, got {:?}", self.source.shape()));
        }
        let vols = std::iter::once(&self.source).chain(&self.targets);
        for v in vols.clone().chain(std::iter::once(&self.mask)) {
            if v.shape() != self.source.shape() {
                return bad(format!("dims {:?} vs {:?}", v.shape(), self.source.shape()));
            }
        }
        if vols.flat_map(|v| v.data()).any(|x| !(-1.0..=1.0).contains(x)) {
            return bad("intensities outside [-1, 1]".into());
        }
        if self.mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return bad("mask is not binary".into());
        }
        Ok(())
    }
}

fn to_volume(v: &[f64], dims: [usize; 3]) -> Result<Tensor<f32>> {
    Tensor::from_vec(v.iter().map(|&x| x as f32).collect(), &dims)
}

/// Phantom with every sequence normalized independently.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Sample> {
    sample_from_raw(&generate_raw(spec)?, format!("phantom-{:016x}", spec.seed))
}

fn normalized(raw: &RawPhantom) -> Result<[Vec<f64>; 4]> {
    let mut out: [Vec<f64>; 4] = Default::default();
    for (o, v) in out.iter_mut().zip(&raw.volumes) {
        *o = normalize_volume(v)?;
    }
    Ok(out)
}

fn sample_from_raw(raw: &RawPhantom, subject_id: String) -> Result<Sample> {
    assemble(raw, normalized(raw)?, subject_id)
}

fn assemble(raw: &RawPhantom, [s, a, b, c]: [Vec<f64>; 4], subject_id: String) -> Result<Sample> {
    let dims = raw.dims;
    let sample = Sample {
        subject_id,
        source: to_volume(&s, dims)?,
        targets: [to_volume(&a, dims)?, to_volume(&b, dims)?, to_volume(&c, dims)?],
        mask: to_volume(&raw.mask(), dims)?,
    };
    sample.validate()?;
    Ok(sample)
}

/// Seeds of a phantom cohort; independent of thread count.
pub fn cohort_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen()).collect()
}

/// `count` phantoms generated in parallel, returned in seed order.
pub fn generate_cohort(spec: &PhantomSpec, count: usize, seed: u64) -> Result<Dataset> {
    let seeds = cohort_seeds(seed, count);
    let raws: Vec<Result<(RawPhantom, [Vec<f64>; 4])>> = seeds
        .par_iter()
        .map(|&s| {
            let raw = generate_raw(&PhantomSpec { seed: s, ..spec.clone() })?;
            let norm = normalized(&raw)?;
            Ok((raw, norm))
        })
        .collect();
    let mut samples = Vec::with_capacity(count);
    for (i, r) in raws.into_iter().enumerate() {
        let (raw, norm) = r?;
        samples.push(assemble(&raw, norm, format!("phantom-{i:04}"))?);
    }
    Dataset::new(samples)
}

/// Seeded shuffle of `ids` cut into consecutive disjoint pieces.
pub fn dataset_split<T: Clone>(ids: &[T], counts: &[usize], seed: u64) -> Result<Vec<Vec<T>>> {
    let need: usize = counts.iter().sum();
    if need > ids.len() {
        return Err(Error::invalid(format!("split of {need} requested from {} ids", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut start = 0;
    Ok(counts
        .iter()
        .map(|&n| {
            let part = order[start..start + n].iter().map(|&i| ids[i].clone()).collect();
            start += n;
            part
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub source: PathBuf,
    /// Keyed by lowercase contrast name.
    pub targets: BTreeMap<String, PathBuf>,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub dims: [usize; 3],
    pub subjects: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// A stacked batch: `[B, 1, D, H, W]` volumes and one contrast per sample.
pub struct Batch {
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub codes: Vec<Contrast>,
}

/// In-memory collection of samples sharing one grid.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let dims = first.dims();
            for s in &samples {
                s.validate()?;
                if s.dims() != dims {
                    return Err(Error::Data(format!("{}: dims {:?} differ from {:?}", s.subject_id, s.dims(), dims)));
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> Option<[usize; 3]> {
        self.samples.first().map(Sample::dims)
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| self.samples.get(i).cloned().ok_or_else(|| Error::invalid(format!("sample index {i} out of range"))))
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    /// Stacks the chosen samples with their requested target contrasts.
    pub fn batch(&self, indices: &[usize], codes: &[Contrast]) -> Result<Batch> {
        if indices.len() != codes.len() || indices.is_empty() {
            return Err(Error::invalid(format!("{} indices for {} codes", indices.len(), codes.len())));
        }
        let dims = self.dims().ok_or_else(|| Error::Data("empty dataset".into()))?;
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        let mut mask = Vec::new();
        for (&i, &c) in indices.iter().zip(codes) {
            let s = self.samples.get(i).ok_or_else(|| Error::invalid(format!("sample index {i} out of range")))?;
            src.extend_from_slice(s.source.data());
            tgt.extend_from_slice(s.target(c).data());
            mask.extend_from_slice(s.mask.data());
        }
        let shape = [indices.len(), 1, dims[0], dims[1], dims[2]];
        Ok(Batch {
            source: Tensor::from_vec(src, &shape)?,
            target: Tensor::from_vec(tgt, &shape)?,
            mask: Tensor::from_vec(mask, &shape)?,
            codes: codes.to_vec(),
        })
    }

    /// Writes every volume plus a manifest into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut subjects = Vec::new();
        for s in &self.samples {
            let file = |suffix: &str| PathBuf::from(format!("{}_{suffix}.mcsv", s.subject_id));
            write_volume(dir.join(file("t2w")), &s.source)?;
            let mut targets = BTreeMap::new();
            for c in Contrast::ALL {
                write_volume(dir.join(file(c.name())), s.target(c))?;
                targets.insert(c.name().to_string(), file(c.name()));
            }
            write_volume(dir.join(file("mask")), &s.mask)?;
            subjects.push(ManifestEntry {
                subject_id: s.subject_id.clone(),
                source: file("t2w"),
                targets,
                mask: file("mask"),
            });
        }
        let manifest = Manifest {
            dims: self.dims().unwrap_or([0; 3]),
            subjects,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Reads a directory written by [`Dataset::save`]. Nonzero mask labels
    /// are binarized to 1.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut samples = Vec::with_capacity(manifest.subjects.len());
        for e in &manifest.subjects {
            let target = |c: Contrast| -> Result<Tensor<f32>> {
                let p = e
                    .targets
                    .get(c.name())
                    .ok_or_else(|| Error::Data(format!("{}: no {} volume", e.subject_id, c.name())))?;
                read_volume(dir.join(p))
            };
            let mask = read_volume(dir.join(&e.mask))?;
            let bin = mask.data().iter().map(|&m| if m != 0.0 { 1.0 } else { 0.0 }).collect();
            samples.push(Sample {
                subject_id: e.subject_id.clone(),
                source: read_volume(dir.join(&e.source))?,
                targets: [target(Contrast::T2f)?, target(Contrast::T1c)?, target(Contrast::T1n)?],
                mask: Tensor::from_vec(bin, mask.shape())?,
            });
        }
        let ds = Self::new(samples)?;
        if ds.dims().is_some_and(|d| d != manifest.dims) {
            return Err(Error::Data(format!("manifest dims {:?} disagree with volumes", manifest.dims)));
        }
        Ok(ds)
    }
}
