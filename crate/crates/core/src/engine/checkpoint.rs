use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::optim::Adam;

pub const MAGIC: &[u8; 4] = b"MCSK";
pub const VERSION: u8 = 1;

/// Position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `"gan"` or `"segmenter"`.
    pub kind: String,
    pub step: u64,
    pub epoch: usize,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub rng: Option<RngState>,
    pub optimizer_steps: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Header JSON followed by named little-endian `f32` blobs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blobs: Vec<Blob>,
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let s = bytes.get(*pos..*pos + n).ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
    *pos += n;
    Ok(s)
}

fn take_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader) -> Self {
        Self { header, blobs: Vec::new() }
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) {
        self.blobs.push(Blob { name, shape, data });
    }

    pub fn get(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.blobs.iter().any(|b| b.name.starts_with(prefix))
    }

    /// Parameters then buffers of `module`, each named `prefix/name`.
    pub fn add_module<M: Module<f32> + ?Sized>(&mut self, prefix: &str, module: &M) {
        module.visit_params(&mut |p| {
            self.blobs.push(Blob {
                name: format!("{prefix}/{}", p.name),
                shape: p.shape().to_vec(),
                data: p.tensor().to_vec(),
            })
        });
        module.visit_buffers(&mut |b| {
            let data = b.data.borrow().clone();
            self.blobs.push(Blob {
                name: format!("{prefix}/buffer/{}", b.name),
                shape: vec![data.len()],
                data,
            })
        });
    }

    /// Overwrites every parameter and buffer of `module` from the blobs.
    pub fn load_module<M: Module<f32> + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let mut result = Ok(());
        module.visit_params_mut(&mut |p| {
            if result.is_err() {
                return;
            }
            let name = format!("{prefix}/{}", p.name);
            result = match self.get(&name) {
                Some(b) if b.shape == p.shape() => p.set_data(b.data.clone()),
                Some(b) => Err(Error::Format(format!("`{name}` has shape {:?}, model expects {:?}", b.shape, p.shape()))),
                None => Err(Error::Format(format!("checkpoint lacks `{name}`"))),
            };
        });
        result?;
        let mut result = Ok(());
        module.visit_buffers(&mut |buf| {
            let name = format!("{prefix}/buffer/{}", buf.name);
            let mut data = buf.data.borrow_mut();
            match self.get(&name) {
                Some(b) if b.data.len() == data.len() => data.copy_from_slice(&b.data),
                _ if result.is_ok() => result = Err(Error::Format(format!("checkpoint lacks buffer `{name}`"))),
                _ => {}
            }
        });
        result
    }

    pub fn add_optimizer(&mut self, prefix: &str, opt: &Adam<f32>) {
        self.header.optimizer_steps.insert(prefix.to_string(), opt.step_count());
        for (name, m, v) in opt.moments() {
            self.push(format!("{prefix}/m/{name}"), vec![m.len()], m.clone());
            self.push(format!("{prefix}/v/{name}"), vec![v.len()], v.clone());
        }
    }

    pub fn load_optimizer(&self, prefix: &str, opt: &mut Adam<f32>) -> Result<()> {
        let step = *self
            .header
            .optimizer_steps
            .get(prefix)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer `{prefix}`")))?;
        let mprefix = format!("{prefix}/m/");
        let mut moments = Vec::new();
        for b in self.blobs.iter().filter(|b| b.name.starts_with(&mprefix)) {
            let name = &b.name[mprefix.len()..];
            let v = self
                .get(&format!("{prefix}/v/{name}"))
                .ok_or_else(|| Error::Format(format!("optimizer `{prefix}` lacks second moment of `{name}`")))?;
            moments.push((name.to_string(), b.data.clone(), v.data.clone()));
        }
        opt.restore(step, moments);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            if b.shape.iter().product::<usize>() != b.data.len() {
                return Err(Error::invalid(format!("blob `{}` shape {:?} disagrees with its data", b.name, b.shape)));
            }
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.shape.len() as u8);
            for &d in &b.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in &b.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unknown checkpoint version {}", bytes[4])));
        }
        let mut pos = 5;
        let hlen = take_u32(bytes, &mut pos)? as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(bytes, &mut pos, hlen)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = take_u32(bytes, &mut pos)?;
        let mut blobs = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = take_u32(bytes, &mut pos)? as usize;
            let name = String::from_utf8(take(bytes, &mut pos, nlen)?.to_vec())
                .map_err(|_| Error::Format("blob name is not UTF-8".into()))?;
            let ndim = take(bytes, &mut pos, 1)?[0] as usize;
            let shape = (0..ndim).map(|_| take_u32(bytes, &mut pos).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = take(bytes, &mut pos, 4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blobs.push(Blob { name, shape, data });
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { header, blobs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rng_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: [u64; 7] = rng.gen();
        let state = RngState::capture(&rng);
        let mut back = state.restore().unwrap();
        assert_eq!(rng.gen::<u64>(), back.gen::<u64>());
    }

    #[test]
    fn bytes_round_trip() {
        let mut c = Checkpoint::new(CheckpointHeader {
            kind: "gan".into(),
            step: 3,
            ..Default::default()
        });
        c.push("a/w".into(), vec![2, 1], vec![1.0, -0.5]);
        let b = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
    }
}
