//! Bidirectional transformer denoiser predicting clean tokens from a
//! corrupted lattice.
//!
//! Parameters live in one flat vector described by a [`ParamLayout`]. The
//! forward pass records a [`ForwardTrace`] from which [`backward`] computes
//! exact gradients. Inference can run block-causally against a [`KvCache`]
//! of committed blocks.

mod checkpoint;
mod model;
pub mod tensor;

use std::ops::Range;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, streams};
use crate::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use model::{
    backward, commit_block, forward, forward_block_causal, forward_cached, forward_segment,
    forward_trace, measure_forward_time, measure_forward_times, ForwardTrace, KvCache, SegmentOutput,
};
pub use tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeEmbed {
    #[default]
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub time_embed: TimeEmbed,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ff_dim: 256,
            vocab_size: crate::corpus::Vocab::new().size(),
            max_len: 64,
            time_embed: TimeEmbed::Sinusoidal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.ff_dim == 0 {
            return bad("model sizes must be positive");
        }
        if self.model_dim % self.heads != 0 {
            return bad("model_dim must be divisible by heads");
        }
        if self.model_dim % 2 != 0 {
            return bad("model_dim must be even for the sinusoidal time embedding");
        }
        if self.vocab_size < 3 || self.max_len == 0 {
            return bad("vocab_size must be >= 3 and max_len positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).total
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// One named tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

/// Shape table of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub time_gain: Range<usize>,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v, l) = (cfg.model_dim, cfg.ff_dim, cfg.vocab_size, cfg.max_len);
        let mut entries = Vec::new();
        let mut at = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            let range = at..at + len;
            at += len;
            entries.push(ParamEntry {
                name,
                shape,
                range: range.clone(),
            });
            range
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![l, d]);
        let time_gain = push("time_gain".into(), vec![d]);
        let layers = (0..cfg.layers)
            .map(|i| LayerSlots {
                ln1_g: push(format!("layer{i}.ln1_g"), vec![d]),
                ln1_b: push(format!("layer{i}.ln1_b"), vec![d]),
                wq: push(format!("layer{i}.wq"), vec![d, d]),
                bq: push(format!("layer{i}.bq"), vec![d]),
                wk: push(format!("layer{i}.wk"), vec![d, d]),
                bk: push(format!("layer{i}.bk"), vec![d]),
                wv: push(format!("layer{i}.wv"), vec![d, d]),
                bv: push(format!("layer{i}.bv"), vec![d]),
                wo: push(format!("layer{i}.wo"), vec![d, d]),
                bo: push(format!("layer{i}.bo"), vec![d]),
                ln2_g: push(format!("layer{i}.ln2_g"), vec![d]),
                ln2_b: push(format!("layer{i}.ln2_b"), vec![d]),
                w1: push(format!("layer{i}.w1"), vec![d, f]),
                b1: push(format!("layer{i}.b1"), vec![f]),
                w2: push(format!("layer{i}.w2"), vec![f, d]),
                b2: push(format!("layer{i}.b2"), vec![d]),
            })
            .collect();
        let lnf_g = push("lnf_g".into(), vec![d]);
        let lnf_b = push("lnf_b".into(), vec![d]);
        let w_out = push("w_out".into(), vec![d, v]);
        let b_out = push("b_out".into(), vec![v]);
        Self {
            entries,
            tok_emb,
            pos_emb,
            time_gain,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total: at,
        }
    }
}

/// Model weights in a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T = f32> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub values: Vec<T>,
}

pub type DenoiserParams = Params<f32>;

impl<T: Real> Params<T> {
    /// Seeded initialization: embeddings ~ N(0, 0.1^2), projections
    /// ~ N(0, 1/fan_in) with residual outputs scaled by 1/sqrt(2 layers),
    /// norms at identity, biases at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut values = vec![T::zero(); layout.total];
        let mut rng = stream_rng(seed, streams::INIT, 0);
        let residual_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        for e in &layout.entries {
            let leaf = e.name.rsplit('.').next().unwrap();
            let std = match leaf {
                "tok_emb" | "pos_emb" => 0.1,
                "time_gain" => 0.0,
                "wq" | "wk" | "wv" | "w1" | "w_out" => 1.0 / (e.shape[0] as f64).sqrt(),
                "wo" | "w2" => residual_scale / (e.shape[0] as f64).sqrt(),
                _ => 0.0,
            };
            let fill_one = leaf.ends_with("_g");
            for x in &mut values[e.range.clone()] {
                *x = if fill_one {
                    T::one()
                } else if std > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::of(z * std)
                } else {
                    T::zero()
                };
            }
        }
        // Small constant gain so the time signal starts weak but trainable.
        for x in &mut values[layout.time_gain.clone()] {
            *x = T::of(0.1);
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    pub fn from_values(config: &ModelConfig, values: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        if values.len() != layout.total {
            return Err(Error::BadCheckpoint(format!(
                "expected {} parameters, got {}",
                layout.total,
                values.len()
            )));
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: self.values.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let cfg = ModelConfig::default();
        let layout = ParamLayout::new(&cfg);
        let mut at = 0;
        for e in &layout.entries {
            assert_eq!(e.range.start, at);
            assert_eq!(e.range.len(), e.shape.iter().product::<usize>());
            at = e.range.end;
        }
        assert_eq!(at, layout.total);
        let (d, f, v, l) = (64, 256, cfg.vocab_size, 64);
        let per_layer = 4 * (d * d + d) + 4 * d + d * f + f + f * d + d;
        assert_eq!(layout.total, v * d + l * d + d + 2 * per_layer + 2 * d + d * v + v);
    }

    #[test]
    fn init_is_seeded_and_finite() {
        let cfg = ModelConfig::default();
        let a = Params::<f32>::init(&cfg, 1).unwrap();
        let b = Params::<f32>::init(&cfg, 1).unwrap();
        let c = Params::<f32>::init(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
        assert!(a.all_finite());
    }

    #[test]
    fn rejects_bad_heads() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
