use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Monotone intensity map of the anatomy field plus additive tumour
/// structure: `offset + gain * g(a) + edema * rim + core * core`, where
/// `g(a) = a^gamma` or `1 - a^gamma` when inverted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub offset: f64,
    pub gain: f64,
    pub gamma: f64,
    pub invert: bool,
    pub edema: f64,
    pub core: f64,
}

impl Transfer {
    const fn new(offset: f64, gain: f64, gamma: f64, invert: bool, edema: f64, core: f64) -> Self {
        Self { offset, gain, gamma, invert, edema, core }
    }

    /// Tissue intensity; `label` is 0 outside the tumour, 1 in the rim and
    /// 2 in the core.
    pub fn apply(&self, a: f64, label: u8) -> f64 {
        let g = a.powf(self.gamma);
        let base = self.offset + self.gain * if self.invert { 1.0 - g } else { g };
        base + match label {
            1 => self.edema,
            2 => self.core,
            _ => 0.0,
        }
    }
}

/// Generation parameters; radii are fractions of the volume extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub blob_count: (usize, usize),
    pub blob_radius: (f64, f64),
    pub tumour_radius: (f64, f64),
    /// Core radii relative to the tumour radii.
    pub core_scale: f64,
    pub tumour_fraction: (f64, f64),
    /// Source (T2w) first, then T2f, T1c, T1n.
    pub transfers: [Transfer; 4],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            blob_count: (6, 12),
            blob_radius: (0.08, 0.2),
            tumour_radius: (0.1, 0.2),
            core_scale: 0.5,
            tumour_fraction: (0.005, 0.10),
            transfers: [
                Transfer::new(0.1, 0.8, 1.0, false, 0.45, 0.3),
                Transfer::new(0.1, 0.7, 1.5, false, 0.55, 0.1),
                Transfer::new(0.15, 0.7, 0.8, true, 0.55, -0.15),
                Transfer::new(0.1, 0.8, 0.7, true, -0.25, -0.35),
            ],
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

fn ordered(name: &str, r: (f64, f64), lo: f64, hi: f64) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite() && lo <= r.0 && r.0 <= r.1 && r.1 <= hi) {
        return Err(Error::invalid(format!("{name} range {r:?} must be ordered within [{lo}, {hi}]")));
    }
    Ok(())
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::invalid(format!("phantom dims {:?} must be at least 8", self.dims)));
        }
        if self.blob_count.0 > self.blob_count.1 {
            return Err(Error::invalid("blob count range must be ordered"));
        }
        ordered("blob radius", self.blob_radius, 1e-3, 1.0)?;
        ordered("tumour radius", self.tumour_radius, 1e-3, 0.5)?;
        ordered("tumour fraction", self.tumour_fraction, 0.0, 1.0)?;
        if !(self.core_scale > 0.0 && self.core_scale < 1.0) {
            return Err(Error::invalid("core scale must lie in (0, 1)"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be finite and non-negative"));
        }
        for t in &self.transfers {
            if !(t.gain > 0.0 && t.gamma > 0.0) || [t.offset, t.gain, t.gamma, t.edema, t.core].iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("transfer {t:?} is not strictly monotone")));
            }
        }
        Ok(())
    }
}

/// Un-normalized phantom: the shared fields and the four raw contrasts.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPhantom {
    pub dims: [usize; 3],
    /// Anatomy in (0, 1); `None` outside the head.
    pub anatomy: Vec<Option<f64>>,
    /// 0 healthy, 1 tumour rim, 2 tumour core.
    pub labels: Vec<u8>,
    /// Source first, then T2f, T1c, T1n.
    pub volumes: [Vec<f64>; 4],
}

impl RawPhantom {
    pub fn mask(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| f64::from(l > 0)).collect()
    }

    pub fn tumour_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l > 0).count() as f64 / self.labels.len() as f64
    }
}

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.centre[a]) / self.radii[a]).powi(2)).sum()
    }
}

fn coords(dims: [usize; 3]) -> impl Iterator<Item = [f64; 3]> {
    let [d, h, w] = dims;
    (0..d).flat_map(move |z| (0..h).flat_map(move |y| (0..w).map(move |x| [z as f64, y as f64, x as f64])))
}

pub fn generate_raw(spec: &PhantomSpec) -> Result<RawPhantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = spec.dims;
    let ext = dims.map(|d| d as f64);
    let mid = ext.map(|e| (e - 1.0) / 2.0);
    let head = Ellipsoid {
        centre: mid,
        radii: ext.map(|e| 0.45 * e),
    };

    let n_blobs = rng.gen_range(spec.blob_count.0..=spec.blob_count.1);
    let blobs: Vec<([f64; 3], f64, f64)> = (0..n_blobs)
        .map(|_| {
            let c = [0, 1, 2].map(|a| mid[a] + rng.gen_range(-0.35..0.35) * ext[a]);
            let r = rng.gen_range(spec.blob_radius.0..=spec.blob_radius.1) * ext.iter().copied().fold(f64::INFINITY, f64::min);
            let amp = rng.gen_range(-1.0..1.0);
            (c, r, amp)
        })
        .collect();
    let anatomy: Vec<Option<f64>> = coords(dims)
        .map(|p| {
            (head.level(p) <= 1.0).then(|| {
                let s: f64 = blobs
                    .iter()
                    .map(|(c, r, amp)| {
                        let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                        amp * (-d2 / (2.0 * r * r)).exp()
                    })
                    .sum();
                1.0 / (1.0 + (-2.5 * s).exp())
            })
        })
        .collect();

    for _attempt in 0..1000 {
        let radii = ext.map(|e| rng.gen_range(spec.tumour_radius.0..=spec.tumour_radius.1) * e);
        let centre = [0, 1, 2].map(|a| mid[a] + rng.gen_range(-0.2..0.2) * ext[a]);
        let outer = Ellipsoid { centre, radii };
        let inner = Ellipsoid {
            centre,
            radii: radii.map(|r| r * spec.core_scale),
        };
        let labels: Vec<u8> = coords(dims)
            .zip(&anatomy)
            .map(|(p, a)| match a {
                Some(_) if inner.level(p) <= 1.0 => 2,
                Some(_) if outer.level(p) <= 1.0 => 1,
                _ => 0,
            })
            .collect();
        let frac = labels.iter().filter(|&&l| l > 0).count() as f64 / labels.len() as f64;
        if (spec.tumour_fraction.0..=spec.tumour_fraction.1).contains(&frac) {
            let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
            let volumes = spec.transfers.map(|t| {
                anatomy
                    .iter()
                    .zip(&labels)
                    .map(|(a, &l)| match a {
                        Some(a) => t.apply(*a, l) + if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 },
                        None => 0.0,
                    })
                    .collect()
            });
            return Ok(RawPhantom { dims, anatomy, labels, volumes });
        }
    }
    Err(Error::invalid(format!(
        "no tumour within fraction {:?} after 1000 draws; widen the radius range",
        spec.tumour_fraction
    )))
}
