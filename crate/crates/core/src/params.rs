//! Named weight collections, checkpoint archives, and the Adam optimizer.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 4] = b"GSCK";

/// Named parameters. Iteration order is lexicographic by name, so two sets
/// built from the same seed serialize identically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Seeded initializer used while registering parameters.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, c: usize, h: usize, w: usize, bound: f64) -> Tensor {
        Tensor::from_fn(c, h, w, |_, _, _| self.rng.gen_range(-bound..=bound))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers a conv kernel `(out, in/groups, k*k)` with He-uniform init and a zero bias.
    pub fn init_conv(&mut self, init: &mut Init, name: &str, c_in: usize, c_out: usize, k: usize, groups: usize) {
        let fan_in = (c_in / groups) * k * k;
        let bound = (6.0 / fan_in as f64).sqrt() * 0.5;
        self.insert(format!("{name}.w"), init.uniform(c_out, c_in / groups, k * k, bound));
        self.insert(format!("{name}.b"), Tensor::zeros(c_out, 1, 1));
    }

    /// Overwrite the bias of an already registered conv.
    pub fn set_bias(&mut self, name: &str, values: &[f64]) {
        let b = self.tensors.get_mut(&format!("{name}.b")).expect("bias registered");
        b.data_mut().copy_from_slice(values);
    }

    /// Archive layout: magic `GSCK`, u32 manifest length, UTF-8 manifest
    /// (`name c h w` per line), then one GST1 blob per manifest entry.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        for (name, t) in &self.tensors {
            let [c, h, w] = t.shape();
            manifest.push_str(&format!("{name} {c} {h} {w}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in self.tensors.values() {
            out.extend_from_slice(&t.to_gst1());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CKPT_MAGIC {
            return Err(Error::Format("checkpoint: bad magic".into()));
        }
        let mlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let manifest = bytes
            .get(8..8 + mlen)
            .ok_or_else(|| Error::Format("checkpoint: truncated manifest".into()))?;
        let manifest =
            std::str::from_utf8(manifest).map_err(|_| Error::Format("checkpoint: manifest not UTF-8".into()))?;
        let mut pos = 8 + mlen;
        let mut tensors = BTreeMap::new();
        for line in manifest.lines() {
            let mut parts = line.split_whitespace();
            let name = parts.next().ok_or_else(|| Error::Format("checkpoint: empty manifest line".into()))?;
            let dims: Vec<usize> = parts
                .map(|p| p.parse().map_err(|_| Error::Format(format!("checkpoint: bad dim in `{line}`"))))
                .collect::<Result<_>>()?;
            if dims.len() != 3 {
                return Err(Error::Format(format!("checkpoint: bad manifest line `{line}`")));
            }
            let (t, used) = Tensor::parse_gst1_prefix(&bytes[pos..])?;
            if t.shape() != [dims[0], dims[1], dims[2]] {
                return Err(Error::Format(format!("checkpoint: `{name}` shape disagrees with manifest")));
            }
            pos += used;
            tensors.insert(name.to_string(), t);
        }
        if pos != bytes.len() {
            return Err(Error::Format("checkpoint: trailing bytes".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// One-byte digest of the serialized checkpoint, carried in the stream header.
    pub fn short_hash(&self) -> u8 {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().fold(0u8, |a, b| a ^ b)
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let [c, h, w] = g.shape();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(c, h, w));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(c, h, w));
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            }
        }
    }
}
