//! Encoder-decoder assembly.
//!
//! ```text
//! stem 3x3 -> [level i blocks -> skip_i -> to_channel(2) + 1x1]  i < L
//!          -> level L blocks (latent)
//!          -> [1x1 + to_space(2) -> concat(prompt_i(skip_i), up) -> 1x1 -> level i blocks]  i = L-1 .. 1
//!          -> head 3x3
//! ```

mod config;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use config::{NetworkConfig, IMAGE_CHANNELS, SCALE};

use crate::blocks::{Block, Pointwise};
use crate::error::{Error, Result};
use crate::grad::{gradient_descent, Tape, Var};
use crate::ops::{ConvSpec, Rearrange};
use crate::params::{AccessAudit, Init, Initializer, Param, ParamReader, ParamSource};
use crate::prompt::{PromptCodebook, PromptDims};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::weights::{DType, WeightStore};

#[derive(Debug, Clone)]
pub struct Conv3<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv3<T> {
    fn new(src: &mut impl ParamSource<T>, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Conv3 {
            weight: src.take(&format!("{prefix}.weight"), &[c_out, 3, 3, c_in], Init::TruncNormal(0.02))?,
            bias: src.take(&format!("{prefix}.bias"), &[c_out], Init::Zeros)?,
        })
    }

    fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.conv2d(x, &tape.param(&self.weight), Some(&tape.param(&self.bias)), ConvSpec::same3())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLevel<T> {
    pub blocks: Vec<Block<T>>,
    pub down: Pointwise<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderLevel<T> {
    pub up: Pointwise<T>,
    pub prompt: PromptCodebook<T>,
    pub fuse: Pointwise<T>,
    pub blocks: Vec<Block<T>>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub stem: Conv3<T>,
    /// Levels 1 .. L-1.
    pub encoder: Vec<EncoderLevel<T>>,
    pub latent: Vec<Block<T>>,
    pub latent_prompt: Option<PromptCodebook<T>>,
    /// Levels L-1 .. 1, in execution order.
    pub decoder: Vec<DecoderLevel<T>>,
    pub head: Conv3<T>,
}

/// Feature extents recorded at each stage of a forward pass.
pub type StageTrace = Vec<(String, Shape)>;

impl<T: Scalar> Network<T> {
    pub fn new(src: &mut impl ParamSource<T>, config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let l = cfg.levels;
        let opt = &cfg.block;
        let blocks = |src: &mut _, level: usize, part: &str| -> Result<Vec<Block<T>>> {
            (0..cfg.blocks[level - 1])
                .map(|j| {
                    Block::new(
                        src,
                        cfg.block_types[level - 1],
                        &format!("level{level}.{part}.block{j}"),
                        cfg.channels[level - 1],
                        cfg.heads[level - 1],
                        opt,
                    )
                })
                .collect()
        };
        let prompt = |src: &mut _, level: usize, prefix: &str| {
            let side = cfg.prompt_size(level);
            PromptCodebook::new(
                src,
                prefix,
                PromptDims {
                    channels: cfg.channels[level - 1],
                    entries: cfg.prompt_entries,
                    height: side,
                    width: side,
                    heads: cfg.heads[level - 1],
                    reduction: opt.reduction,
                },
                opt.normalize_qk,
            )
        };

        let stem = Conv3::new(src, "stem.conv", IMAGE_CHANNELS, cfg.channels[0])?;
        let mut encoder = Vec::new();
        for level in 1..l {
            let c = cfg.channels[level - 1];
            encoder.push(EncoderLevel {
                blocks: blocks(src, level, "enc")?,
                down: Pointwise::new(src, &format!("level{level}.down.proj"), c * SCALE * SCALE, cfg.channels[level])?,
            });
        }
        let latent = blocks(src, l, "enc")?;
        let latent_prompt = if cfg.latent_prompt {
            Some(prompt(src, l, &format!("level{l}.prompt"))?)
        } else {
            None
        };
        let mut decoder = Vec::new();
        for level in (1..l).rev() {
            let c = cfg.channels[level - 1];
            decoder.push(DecoderLevel {
                up: Pointwise::new(src, &format!("level{level}.up.proj"), cfg.channels[level], c * SCALE * SCALE)?,
                prompt: prompt(src, level, &format!("level{level}.prompt"))?,
                fuse: Pointwise::new(src, &format!("level{level}.fuse"), 2 * c, c)?,
                blocks: blocks(src, level, "dec")?,
            });
        }
        let head = Conv3::new(src, "head.conv", cfg.channels[0], IMAGE_CHANNELS)?;
        Ok(Network {
            config: cfg.clone(),
            stem,
            encoder,
            latent,
            latent_prompt,
            decoder,
            head,
        })
    }

    /// Reads the network from `store`, reporting entries the declaration
    /// never touched.
    pub fn load(store: &WeightStore, config: &NetworkConfig) -> Result<(Self, AccessAudit)> {
        let mut reader = ParamReader::new(store);
        let net = Network::new(&mut reader, config)?;
        Ok((net, reader.audit()))
    }

    pub fn forward(&self, tape: &Tape<T>, image: &Var<T>) -> Result<Var<T>> {
        self.run(tape, image, None)
    }

    pub fn forward_traced(&self, tape: &Tape<T>, image: &Var<T>) -> Result<(Var<T>, StageTrace)> {
        let mut trace = Vec::new();
        let y = self.run(tape, image, Some(&mut trace))?;
        Ok((y, trace))
    }

    fn run(&self, tape: &Tape<T>, image: &Var<T>, mut trace: Option<&mut StageTrace>) -> Result<Var<T>> {
        let s = image.shape();
        if s.c() != IMAGE_CHANNELS {
            return Err(Error::shape(format!("expected an RGB image, got {s:?}")));
        }
        let m = self.config.multiple();
        let (pad_h, pad_w) = ((m - s.h() % m) % m, (m - s.w() % m) % m);
        let x = if pad_h + pad_w > 0 {
            tape.reflect_pad(image, pad_h, pad_w).map_err(|e| e.in_layer("input.pad"))?
        } else {
            image.clone()
        };
        let mut record = |name: &str, v: &Var<T>| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((name.to_owned(), v.shape()));
            }
        };
        let stage = |name: String, r: Result<Var<T>>| r.map_err(|e| e.in_layer(name));

        let mut h = stage("stem.conv".into(), self.stem.forward(tape, &x))?;
        record("stem", &h);
        let mut skips = Vec::new();
        for (i, level) in self.encoder.iter().enumerate() {
            let n = i + 1;
            for (j, b) in level.blocks.iter().enumerate() {
                h = stage(format!("level{n}.enc.block{j}"), b.forward(tape, &h))?;
            }
            record(&format!("level{n}.enc"), &h);
            skips.push(h.clone());
            let shuffled = stage(format!("level{n}.down"), tape.pixel_rearrange(&h, SCALE, Rearrange::ToChannel))?;
            h = stage(format!("level{n}.down.proj"), level.down.forward(tape, &shuffled))?;
        }
        let l = self.config.levels;
        for (j, b) in self.latent.iter().enumerate() {
            h = stage(format!("level{l}.enc.block{j}"), b.forward(tape, &h))?;
        }
        if let Some(p) = &self.latent_prompt {
            h = stage(format!("level{l}.prompt"), p.forward(tape, &h))?;
        }
        record("latent", &h);
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let n = skips.len() + 1;
            let up = stage(format!("level{n}.up.proj"), level.up.forward(tape, &h))?;
            let up = stage(format!("level{n}.up"), tape.pixel_rearrange(&up, SCALE, Rearrange::ToSpace))?;
            let prompted = stage(format!("level{n}.prompt"), level.prompt.forward(tape, &skip))?;
            let cat = stage(format!("level{n}.fuse"), tape.concat_channels(&prompted, &up))?;
            h = stage(format!("level{n}.fuse"), level.fuse.forward(tape, &cat))?;
            for (j, b) in level.blocks.iter().enumerate() {
                h = stage(format!("level{n}.dec.block{j}"), b.forward(tape, &h))?;
            }
            record(&format!("level{n}.dec"), &h);
        }
        let mut out = stage("head.conv".into(), self.head.forward(tape, &h))?;
        if self.config.global_residual {
            out = stage("head.residual".into(), tape.add(&out, &x))?;
        }
        if pad_h + pad_w > 0 {
            out = stage("output.crop".into(), tape.crop(&out, s.h(), s.w()))?;
        }
        record("output", &out);
        Ok(out)
    }
}

/// Fresh, seeded weights for `config`.
pub fn build(config: &NetworkConfig, seed: u64, dtype: DType) -> Result<WeightStore> {
    let mut store = WeightStore::new();
    {
        let mut init = Initializer::new(&mut store, seed, dtype);
        Network::<f32>::new(&mut init, config)?;
    }
    Ok(store)
}

/// Runs the network on `image` with weights from `store`.
pub fn forward<T: Scalar>(image: &Tensor<T>, store: &WeightStore, config: &NetworkConfig) -> Result<Tensor<T>> {
    let (net, _) = Network::load(store, config)?;
    let tape = Tape::inference();
    Ok(net.forward(&tape, &tape.constant(image.clone()))?.into_tensor())
}

/// Result of running one forward pass with per-parameter read counting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardAudit {
    pub total: usize,
    /// Stored parameters the forward pass never read.
    pub orphans: Vec<String>,
    /// Parameters read more than once, with their counts.
    pub repeated: Vec<(String, usize)>,
    /// Names read that are not in the store.
    pub unknown: Vec<String>,
}

impl ForwardAudit {
    pub fn is_clean(&self) -> bool {
        self.orphans.is_empty() && self.repeated.is_empty() && self.unknown.is_empty()
    }
}

/// Forward pass that also reports how often each stored parameter was read.
pub fn forward_audited<T: Scalar>(
    image: &Tensor<T>,
    store: &WeightStore,
    config: &NetworkConfig,
) -> Result<(Tensor<T>, StageTrace, ForwardAudit)> {
    let (net, _) = Network::load(store, config)?;
    let tape = Tape::inference();
    let (y, trace) = net.forward_traced(&tape, &tape.constant(image.clone()))?;
    let uses = tape.param_uses();
    let audit = ForwardAudit {
        total: store.len(),
        orphans: store.names().filter(|n| !uses.contains_key(*n)).map(str::to_owned).collect(),
        repeated: uses.iter().filter(|(_, &c)| c > 1).map(|(n, &c)| (n.clone(), c)).collect(),
        unknown: uses.keys().filter(|n| !store.contains(n)).cloned().collect(),
    };
    Ok((y.into_tensor(), trace, audit))
}

/// Records declared shapes without allocating values.
#[derive(Default)]
struct ShapeLedger {
    entries: Vec<(String, usize)>,
}

impl<T: Scalar> ParamSource<T> for ShapeLedger {
    fn take(&mut self, name: &str, dims: &[usize], _init: Init) -> Result<Param<T>> {
        self.entries.push((name.to_owned(), dims.iter().product()));
        Ok(Param {
            name: name.to_owned(),
            value: std::sync::Arc::new(Tensor::zeros([0, 0, 0, 0])),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub total: usize,
    /// Counts grouped by the first two name components, e.g. `level1.enc`.
    pub groups: BTreeMap<String, usize>,
    pub per_level: BTreeMap<String, usize>,
}

/// Parameter counts for `config`, grouped by module and by level.
pub fn census(config: &NetworkConfig) -> Result<Census> {
    let mut ledger = ShapeLedger::default();
    Network::<f32>::new(&mut ledger, config)?;
    let mut groups = BTreeMap::new();
    let mut per_level = BTreeMap::new();
    let mut total = 0;
    for (name, n) in ledger.entries {
        total += n;
        let mut parts = name.split('.');
        let first = parts.next().unwrap_or_default().to_owned();
        let group = match parts.next() {
            Some(second) => format!("{first}.{second}"),
            None => first.clone(),
        };
        *groups.entry(group).or_insert(0) += n;
        *per_level.entry(first).or_insert(0) += n;
    }
    Ok(Census { total, groups, per_level })
}

/// Overfits `config` on one degraded/clean pair with plain gradient descent
/// on the mean absolute error. Returns the loss before each step.
pub fn toy_fit(
    config: &NetworkConfig,
    degraded: &Tensor<f32>,
    clean: &Tensor<f32>,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if degraded.shape() != clean.shape() {
        return Err(Error::shape(format!(
            "pair shapes differ: {:?} vs {:?}",
            degraded.shape(),
            clean.shape()
        )));
    }
    let mut store = build(config, seed, DType::F32)?;
    gradient_descent(&mut store, steps, lr, |tape, store| {
        let mut reader = ParamReader::new(store);
        let net = Network::new(&mut reader, config)?;
        let out = net.forward(tape, &tape.constant(degraded.clone()))?;
        let diff = tape.sub(&out, &tape.constant(clean.clone()))?;
        tape.mean(&tape.abs(&diff)?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([1, h, w, 3], |[_, y, x, c]| ((y * 7 + x * 5 + c * 3) % 13) as f32 / 13.0)
    }

    #[test]
    fn tiny_forward_keeps_shape() {
        let cfg = NetworkConfig::tiny();
        let store = build(&cfg, 1, DType::F32).unwrap();
        let y = forward(&image(16, 12), &store, &cfg).unwrap();
        assert_eq!(y.shape().0, [1, 16, 12, 3]);
        assert!(y.first_non_finite().is_none());
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let cfg = NetworkConfig::tiny();
        let store = build(&cfg, 1, DType::F32).unwrap();
        assert_eq!(forward(&image(9, 7), &store, &cfg).unwrap().shape().0, [1, 9, 7, 3]);
    }

    #[test]
    fn build_is_seeded() {
        let cfg = NetworkConfig::tiny();
        assert_eq!(build(&cfg, 3, DType::F32).unwrap(), build(&cfg, 3, DType::F32).unwrap());
        assert_ne!(build(&cfg, 3, DType::F32).unwrap(), build(&cfg, 4, DType::F32).unwrap());
    }

    #[test]
    fn census_matches_store() {
        let cfg = NetworkConfig::tiny();
        let store = build(&cfg, 1, DType::F32).unwrap();
        let c = census(&cfg).unwrap();
        assert_eq!(c.total, store.total_params());
        assert_eq!(c.per_level.values().sum::<usize>(), c.total);
    }

    #[test]
    fn audit_is_clean() {
        let cfg = NetworkConfig::tiny();
        let store = build(&cfg, 1, DType::F32).unwrap();
        let (_, trace, audit) = forward_audited(&image(8, 8), &store, &cfg).unwrap();
        assert!(audit.is_clean(), "{audit:?}");
        let latent = trace.iter().find(|(n, _)| n == "latent").unwrap().1;
        assert_eq!(latent.0, [1, 4, 4, 16]);
    }

    #[test]
    fn extra_entry_is_an_orphan() {
        let cfg = NetworkConfig::tiny();
        let mut store = build(&cfg, 1, DType::F32).unwrap();
        store.insert_tensor("stray", vec![2], &Tensor::<f32>::zeros([1, 1, 1, 2]), DType::F32).unwrap();
        let (_, audit) = Network::<f32>::load(&store, &cfg).unwrap();
        assert_eq!(audit.orphans, vec!["stray".to_owned()]);
    }

    #[test]
    fn missing_entry_is_reported() {
        let cfg = NetworkConfig::tiny();
        let mut store = build(&cfg, 1, DType::F32).unwrap();
        store.remove("head.conv.bias");
        let err = forward(&image(8, 8), &store, &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingParam(ref n) if n == "head.conv.bias"), "{err}");
    }
}
