use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit vector over the cross-attention index space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptMask {
    pub len: usize,
    pub task: usize,
    /// Refresh phase, or `None` for a merged task mask.
    pub phase: Option<usize>,
    words: Vec<u64>,
}

impl ConceptMask {
    pub fn zeros(len: usize, task: usize, phase: Option<usize>) -> Self {
        Self {
            len,
            task,
            phase,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_indices(len: usize, task: usize, phase: Option<usize>, idx: &[usize]) -> Self {
        let mut m = Self::zeros(len, task, phase);
        for &i in idx {
            m.set(i);
        }
        m
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.len, "bit {i} outside mask of {}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn popcount(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.len != other.len {
            return Err(Error::shape(
                "concept-mask",
                format!("index spaces differ: {} vs {}", self.len, other.len),
            ));
        }
        Ok(())
    }

    pub fn or_assign(&mut self, other: &Self) -> Result<()> {
        self.check_len(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        Ok(())
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        let mut out = self.clone();
        for (a, b) in out.words.iter_mut().zip(&other.words) {
            *a &= b;
        }
        Ok(out)
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.len == other.len && self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    /// `1.0` on set bits, `0.0` elsewhere.
    pub fn as_f64(&self) -> Vec<f64> {
        (0..self.len).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect()
    }

    /// Packed little-endian bit order, `ceil(len / 8)` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(8)];
        for i in self.ones() {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    pub fn from_bytes(len: usize, task: usize, phase: Option<usize>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Artifact(format!(
                "{} mask bytes for {len} bits",
                bytes.len()
            )));
        }
        let mut m = Self::zeros(len, task, phase);
        for i in 0..len {
            if bytes[i / 8] >> (i % 8) & 1 == 1 {
                m.set(i);
            }
        }
        if len % 8 != 0 && bytes[len / 8] >> (len % 8) != 0 {
            return Err(Error::Artifact("mask padding bits are set".into()));
        }
        Ok(m)
    }
}

/// Number of bits kept for percentage `p` of `len` coordinates.
pub fn selection_size(len: usize, p: f64) -> usize {
    // p·len is exact for the integer-valued percentages in use
    ((p * len as f64) / 100.0).ceil().min(len as f64) as usize
}

/// Top `ceil(p·len/100)` coordinates by `|g|`; ties go to the lower index.
pub fn select_mask(g: &[f64], p: f64, task: usize, phase: Option<usize>) -> Result<ConceptMask> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Config(format!("selection percent {p} outside (0, 100]")));
    }
    if let Some(j) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric("select-mask", format!("non-finite saliency at {j}")));
    }
    let k = selection_size(g.len(), p);
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
    Ok(ConceptMask::from_indices(g.len(), task, phase, &order[..k]))
}

/// Bitwise OR of one task's phase masks.
pub fn merge_phase_masks(masks: &[ConceptMask]) -> Result<ConceptMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no phase masks to merge".into()))?;
    let mut out = ConceptMask::zeros(first.len, first.task, None);
    for m in masks {
        if m.task != first.task {
            return Err(Error::InvalidArgument(format!(
                "phase masks from tasks {} and {}",
                first.task, m.task
            )));
        }
        out.or_assign(m)?;
    }
    Ok(out)
}

/// `λ ‖M ⊙ (θ − θ_old)‖²` over the cross-attention coordinates.
pub fn conflict_reg_loss(theta: &[f64], theta_old: &[f64], m_reg: &ConceptMask, lambda: f64) -> f64 {
    let s: f64 = m_reg
        .ones()
        .map(|j| {
            let d = theta[j] - theta_old[j];
            d * d
        })
        .sum();
    lambda * s
}
