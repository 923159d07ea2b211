use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    CrossAttention,
    FeedForward,
    SelfAttention,
    Embedding,
    Head,
    Norm,
}

/// Named contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub layer: Option<usize>,
    pub group: Group,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat `θ` plus a segment table that partitions `[0, D)` in order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    segments: Vec<Segment>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn from_segments(segments: Vec<Segment>, values: Vec<f64>) -> Result<Self> {
        let mut next = 0;
        let mut index = HashMap::new();
        for (k, s) in segments.iter().enumerate() {
            if s.offset != next {
                return Err(Error::Artifact(format!(
                    "segment `{}` starts at {} but the previous one ended at {next}",
                    s.name, s.offset
                )));
            }
            next += s.len();
            if index.insert(s.name.clone(), k).is_some() {
                return Err(Error::Artifact(format!("duplicate segment `{}`", s.name)));
            }
        }
        if next != values.len() {
            return Err(Error::Artifact(format!(
                "segments cover {next} values, store has {}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            segments,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.index
            .get(name)
            .map(|&k| &self.segments[k])
            .ok_or_else(|| Error::Artifact(format!("no parameter segment `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let r = self.segment(name)?.range();
        Ok(&self.values[r])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.segment(name)?.range();
        Ok(&mut self.values[r])
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let s = self.segment(name)?;
        Tensor::new(s.shape.clone(), self.values[s.range()].to_vec())
    }

    /// Ascending flat indices of every parameter tagged `group`.
    pub fn group_indices(&self, group: Group) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| s.group == group)
            .flat_map(|s| s.range())
            .collect()
    }

    /// The cross-attention index space of concept masks.
    pub fn ca_indices(&self) -> Vec<usize> {
        self.group_indices(Group::CrossAttention)
    }

    pub fn content_hash(&self) -> String {
        rng::hash_f64s(&self.values)
    }

    /// Hash of the values at `indices`, in order.
    pub fn hash_of(&self, indices: &[usize]) -> String {
        let v: Vec<f64> = indices.iter().map(|&i| self.values[i]).collect();
        rng::hash_f64s(&v)
    }

    /// Leaves (or constants) for every segment on `tape`.
    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut by_name = HashMap::with_capacity(self.segments.len());
        let mut order = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            let t = Tensor::new(s.shape.clone(), self.values[s.range()].to_vec()).expect("segment shape");
            let v = if trainable { tape.leaf(t) } else { tape.constant(t) };
            by_name.insert(s.name.clone(), v);
            order.push(v);
        }
        ParamVars { by_name, order }
    }

    /// Flat gradient in segment order; zeros where the tape holds none.
    pub fn flat_grad(&self, tape: &Tape, vars: &ParamVars) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.len());
        for (s, v) in self.segments.iter().zip(&vars.order) {
            match tape.grad(*v) {
                Some(gr) => g.extend_from_slice(gr),
                None => g.extend(std::iter::repeat_n(0.0, s.len())),
            }
        }
        g
    }
}

/// Tape handles for one parameter store. Entries may be overridden, for
/// example with `W + A·B` when evaluating a low-rank adapter.
#[derive(Debug, Clone)]
pub struct ParamVars {
    by_name: HashMap<String, Var>,
    order: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from the layout"))
    }

    pub fn get_opt(&self, name: &str) -> Option<Var> {
        self.by_name.get(name).copied()
    }

    /// Replaces the handle used by the forward pass; gradients still flow
    /// to the original leaf through whatever `v` was built from.
    pub fn set(&mut self, name: &str, v: Var) {
        self.by_name.insert(name.to_string(), v);
    }

    /// Original leaves in segment order.
    pub fn leaves(&self) -> &[Var] {
        &self.order
    }
}
