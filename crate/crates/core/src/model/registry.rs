//! Named parameter store with a metadata/storage split.
//!
//! Every learnable tensor in a model is registered exactly once under a
//! unique dotted name, carrying its shape, group, trainable flag, and init
//! recipe. Registration alone allocates nothing; parameter counting and
//! checkpoint manifests work from metadata, so a full-scale configuration
//! can be audited without ever touching buffers. `materialize` fills in
//! storage, seeding each entry from a hash of its name so the realized
//! values do not depend on registration order or on which other entries
//! already exist.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the network an entry belongs to. Groups are the unit of
/// bulk freezing and of checkpoint bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Encoder,
    Neck,
    Decoder,
    Adapter,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Neck => "neck",
            Group::Decoder => "decoder",
            Group::Adapter => "adapter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Group::Encoder),
            "neck" => Ok(Group::Neck),
            "decoder" => Ok(Group::Decoder),
            "adapter" => Ok(Group::Adapter),
            other => Err(Error::Checkpoint(format!("unknown parameter group '{other}'"))),
        }
    }
}

/// How an entry is filled in when materialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Truncated normal: resample until |x| <= 2 * std.
    TruncNormal { std: f64 },
    /// Uniform on (-bound, bound).
    Uniform { bound: f64 },
}

#[derive(Debug)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    group: Group,
    trainable: bool,
    init: Init,
    tensor: Option<Tensor>,
}

/// Ordered name -> parameter map. Iteration order is registration order,
/// which is also the serialization order for checkpoints.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter slot without allocating its storage.
    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        group: Group,
        trainable: bool,
        init: Init,
    ) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Config(format!(
                "parameter '{name}' has degenerate shape {shape:?}"
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            group,
            trainable,
            init,
            tensor: None,
        });
        Ok(())
    }

    /// Allocates and initializes every entry that does not yet have storage.
    /// Entries materialized by an earlier call are left untouched, so base
    /// weights and later-registered adapter weights can use distinct seeds.
    pub fn materialize(&mut self, seed: u64) {
        for e in &mut self.entries {
            if e.tensor.is_some() {
                continue;
            }
            let n: usize = e.shape.iter().product();
            let data = match e.init {
                Init::Zeros => vec![0.0f32; n],
                Init::Ones => vec![1.0f32; n],
                Init::TruncNormal { std } => {
                    let mut rng = entry_rng(seed, &e.name);
                    let dist = Normal::new(0.0f32, std as f32).expect("valid std");
                    (0..n)
                        .map(|_| loop {
                            let x = dist.sample(&mut rng);
                            if x.abs() <= 2.0 * std as f32 {
                                break x;
                            }
                        })
                        .collect()
                }
                Init::Uniform { bound } => {
                    let mut rng = entry_rng(seed, &e.name);
                    let b = bound as f32;
                    (0..n).map(|_| rng.gen_range(-b..b)).collect()
                }
            };
            let t = Tensor::from_vec(&e.shape, data).expect("registered shape is valid");
            t.set_requires_grad(e.trainable);
            e.tensor = Some(t);
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_some())
    }

    /// Fetches a materialized parameter by name.
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        self.entries[i]
            .tensor
            .as_ref()
            .ok_or_else(|| Error::Config(format!("parameter '{name}' is not materialized")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn shape_of(&self, name: &str) -> Result<&[usize]> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        Ok(&self.entries[i].shape)
    }

    pub fn group_of(&self, name: &str) -> Result<Group> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        Ok(self.entries[i].group)
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        Ok(self.entries[i].trainable)
    }

    /// Flips the trainable flag, mirroring it onto the tensor when storage
    /// exists so autograd agrees with the metadata.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        let e = &mut self.entries[i];
        e.trainable = trainable;
        if let Some(t) = &e.tensor {
            t.set_requires_grad(trainable);
        }
        Ok(())
    }

    pub fn set_group_trainable(&mut self, group: Group, trainable: bool) {
        for e in &mut self.entries {
            if e.group == group {
                e.trainable = trainable;
                if let Some(t) = &e.tensor {
                    t.set_requires_grad(trainable);
                }
            }
        }
    }

    /// Number of scalars in trainable entries, computed from shapes alone.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }

    pub fn count_total(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }

    pub fn count_group(&self, group: Group) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }

    /// Registered names in registration order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// (name, tensor) pairs for trainable entries, in registration order.
    pub fn trainable_params(&self) -> Vec<(&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .filter_map(|e| e.tensor.as_ref().map(|t| (e.name.as_str(), t)))
            .collect()
    }

    /// Metadata rows for manifests: (name, shape, group, trainable).
    pub fn manifest_rows(&self) -> Vec<(&str, &[usize], Group, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.shape.as_slice(), e.group, e.trainable))
            .collect()
    }
}

/// FNV-1a over the name, mixed with the run seed through splitmix64. Each
/// entry gets an independent stream regardless of registration order.
fn entry_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ h))
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
