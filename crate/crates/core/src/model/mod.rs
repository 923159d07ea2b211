//! Scale-wise causal transformer for next-scale token prediction.
//!
//! The flattened sequence is one learned prefix row followed by every token
//! of every scale, coarsest first. Scale `s` is predicted from the pooled
//! running feature sum of scales `< s`; the prompt enters each block only
//! through cross-attention.

mod forward;
mod loss;
mod mask;
mod params;
mod sample;
mod vocab;

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use forward::{Fusion, FusionSite, LogitsPyramid, TeacherItem};
pub use loss::{cell_nll, nll, weighted_nll, ScaleWeights};
pub use mask::{block_causal_mask, BlockMask};
pub use params::{Group, ParamStore, ParamVars, Segment};
pub use sample::{sample_cell, SampleConfig};
pub use vocab::{
    base_words, ConceptToken, Prompt, PromptVocab, BACKGROUNDS, BASE_VOCAB, COLORS, FILLERS, SHAPES, TEXTURES,
};

use crate::container::{ArtifactKind, Container};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::{Codebook, ScaleSchedule};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarConfig {
    pub schedule: ScaleSchedule,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_hidden: usize,
    /// Token vocabulary; equals the codebook size.
    pub vocab: usize,
    /// Codebook width.
    pub code_dim: usize,
    /// Concept rows reserved after the base vocabulary.
    pub max_concepts: usize,
    pub max_prompt_len: usize,
}

impl VarConfig {
    pub fn desk_default() -> Self {
        Self {
            schedule: ScaleSchedule::desk_default(),
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            ffn_hidden: 256,
            vocab: 64,
            code_dim: 8,
            max_concepts: 8,
            max_prompt_len: 8,
        }
    }

    pub fn prompt_vocab(&self) -> usize {
        BASE_VOCAB + self.max_concepts
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ffn_hidden == 0 || self.code_dim == 0 || self.max_prompt_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocab {} must be at least 2", self.vocab)));
        }
        Ok(())
    }

    /// `(name, layer, group, shape)` for every parameter, in storage order.
    fn layout(&self) -> Vec<(String, Option<usize>, Group, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("prompt.embed".to_string(), None, Group::Embedding, vec![self.prompt_vocab(), d]),
            ("prompt.pos".into(), None, Group::Embedding, vec![self.max_prompt_len, d]),
            ("prefix".into(), None, Group::Embedding, vec![1, d]),
            ("sos".into(), None, Group::Embedding, vec![1, d]),
            ("in_proj.w".into(), None, Group::Embedding, vec![self.code_dim, d]),
            ("in_proj.b".into(), None, Group::Embedding, vec![d]),
            ("scale_embed".into(), None, Group::Embedding, vec![self.schedule.len(), d]),
            ("pos_embed".into(), None, Group::Embedding, vec![self.schedule.total_cells(), d]),
        ];
        for l in 0..self.n_layers {
            let p = |n: &str| format!("layer{l}.{n}");
            for ln in ["ln1", "ln2", "ln3"] {
                out.push((p(&format!("{ln}.g")), Some(l), Group::Norm, vec![d]));
                out.push((p(&format!("{ln}.b")), Some(l), Group::Norm, vec![d]));
            }
            for (block, group) in [("sa", Group::SelfAttention), ("ca", Group::CrossAttention)] {
                for m in ["q", "k", "v", "o"] {
                    out.push((p(&format!("{block}.w{m}")), Some(l), group, vec![d, d]));
                    out.push((p(&format!("{block}.b{m}")), Some(l), group, vec![d]));
                }
            }
            out.push((p("ffn.w1"), Some(l), Group::FeedForward, vec![d, self.ffn_hidden]));
            out.push((p("ffn.b1"), Some(l), Group::FeedForward, vec![self.ffn_hidden]));
            out.push((p("ffn.w2"), Some(l), Group::FeedForward, vec![self.ffn_hidden, d]));
            out.push((p("ffn.b2"), Some(l), Group::FeedForward, vec![d]));
        }
        out.push(("ln_f.g".into(), None, Group::Norm, vec![d]));
        out.push(("ln_f.b".into(), None, Group::Norm, vec![d]));
        out.push(("head.w".into(), None, Group::Head, vec![d, self.vocab]));
        out.push(("head.b".into(), None, Group::Head, vec![self.vocab]));
        out
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut offset = 0;
        self.layout()
            .into_iter()
            .map(|(name, layer, group, shape)| {
                let s = Segment {
                    name,
                    layer,
                    group,
                    offset,
                    shape,
                };
                offset += s.len();
                s
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.segments().iter().map(Segment::len).sum()
    }
}

/// Model weights, prompt vocabulary and the frozen codebook used to form
/// next-scale inputs.
#[derive(Debug, Clone)]
pub struct VarModel {
    pub config: VarConfig,
    pub store: ParamStore,
    pub vocab: PromptVocab,
    pub codebook: Codebook,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ModelRecord {
    Header { config: VarConfig, vocab: PromptVocab, codebook_trained: bool },
    Segment(Segment),
}

impl VarModel {
    pub fn init(config: VarConfig, codebook: Codebook, seed: u64) -> Result<Self> {
        config.validate()?;
        if codebook.size() != config.vocab || codebook.dim() != config.code_dim {
            return Err(Error::Config(format!(
                "codebook [{}, {}] does not match vocab {} / code_dim {}",
                codebook.size(),
                codebook.dim(),
                config.vocab,
                config.code_dim
            )));
        }
        let segments = config.segments();
        let mut r = rng::stream(seed, "model-init");
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut values = Vec::new();
        for s in &segments {
            let n = s.len();
            let short = s.name.rsplit('.').next().unwrap_or("");
            let std = match s.name.as_str() {
                "prompt.embed" | "prefix" | "sos" => 1.0,
                "prompt.pos" | "scale_embed" | "pos_embed" => 0.1,
                _ if s.group == Group::Norm => {
                    let fill = if short == "g" { 1.0 } else { 0.0 };
                    values.extend(std::iter::repeat_n(fill, n));
                    continue;
                }
                _ if s.shape.len() == 1 => {
                    values.extend(std::iter::repeat_n(0.0, n));
                    continue;
                }
                _ => {
                    let base = 1.0 / (s.shape[0] as f64).sqrt();
                    if matches!(short, "wo" | "w2") {
                        base * out_scale
                    } else {
                        base
                    }
                }
            };
            let dist = Normal::new(0.0, std).expect("positive std");
            values.extend((0..n).map(|_| dist.sample(&mut r)));
        }
        Ok(Self {
            store: ParamStore::from_segments(segments, values)?,
            config,
            vocab: PromptVocab::default(),
            codebook,
        })
    }

    pub fn prompt(&self, text: &str) -> Result<Prompt> {
        self.vocab.encode(text, self.config.max_prompt_len)
    }

    /// Registers `<name>` and seeds its embedding row from `class_word`.
    pub fn register_concept(&mut self, name: &str, class_word: &str) -> Result<usize> {
        let id = self.vocab.register(name, class_word, self.config.max_concepts)?;
        let src = PromptVocab::base_id(class_word).expect("checked by register");
        let d = self.config.d_model;
        let table = self.store.get_mut("prompt.embed")?;
        let row: Vec<f64> = table[src * d..(src + 1) * d].to_vec();
        table[id * d..(id + 1) * d].copy_from_slice(&row);
        Ok(id)
    }

    /// Flat indices of the embedding row of prompt token `id`.
    pub fn embedding_row_indices(&self, id: usize) -> Result<Vec<usize>> {
        let s = self.store.segment("prompt.embed")?;
        let d = self.config.d_model;
        if id >= s.shape[0] {
            return Err(Error::InvalidArgument(format!("prompt id {id} out of range")));
        }
        Ok((s.offset + id * d..s.offset + (id + 1) * d).collect())
    }

    pub fn to_container(&self, seed: u64) -> Result<Container> {
        let mut c = Container::new(ArtifactKind::Model, seed);
        for s in self.store.segments() {
            c.push_array(s.name.clone(), self.store.tensor(&s.name)?);
        }
        c.push_array("codebook", self.codebook.vectors.clone());
        c.push_record(&ModelRecord::Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            codebook_trained: self.codebook.trained,
        })?;
        for s in self.store.segments() {
            c.push_record(&ModelRecord::Segment(s.clone()))?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ArtifactKind::Model {
            return Err(Error::Artifact(format!("expected model, got {:?}", c.kind)));
        }
        let records: Vec<ModelRecord> = c.decode_records()?;
        let mut header = None;
        let mut segments = Vec::new();
        for r in records {
            match r {
                ModelRecord::Header {
                    config,
                    vocab,
                    codebook_trained,
                } => header = Some((config, vocab, codebook_trained)),
                ModelRecord::Segment(s) => segments.push(s),
            }
        }
        let (config, vocab, trained) = header.ok_or_else(|| Error::Artifact("model header missing".into()))?;
        config.validate()?;
        if segments != config.segments() {
            return Err(Error::Artifact("segment table does not match the model config".into()));
        }
        let mut values = Vec::with_capacity(config.param_count());
        for s in &segments {
            let t = c.array(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Artifact(format!("array `{}` has the wrong shape", s.name)));
            }
            values.extend_from_slice(t.data());
        }
        let codebook = Codebook::new(c.array("codebook")?.clone(), trained)?;
        Ok(Self {
            store: ParamStore::from_segments(segments, values)?,
            config,
            vocab,
            codebook,
        })
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<String> {
        self.to_container(seed)?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, ArtifactKind::Model)?)
    }
}
