use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Prompt, VarModel};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::TokenPyramid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub temperature: f64,
    /// `None` keeps the whole vocabulary.
    pub top_k: Option<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > vocab {
                return Err(Error::InvalidArgument(format!("top_k {k} outside 1..={vocab}")));
            }
        }
        Ok(())
    }
}

/// Draws one token from `row` given a uniform `u` in `[0, 1)`.
///
/// Candidates are ranked by logit (ties by lower index) and truncated to
/// `top_k`; the draw inverts the cumulative tempered softmax in rank order.
pub fn sample_cell(row: &[f64], cfg: &SampleConfig, u: f64) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let k = cfg.top_k.unwrap_or(row.len()).min(row.len());
    order.truncate(k);
    if k == 1 {
        return order[0];
    }
    let top = row[order[0]];
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((row[i] - top) / cfg.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut target = u * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if target < w {
            return i;
        }
        target -= w;
    }
    // rounding left `target` just past the last positive weight
    order
        .iter()
        .zip(&weights)
        .rev()
        .find(|(_, &w)| w > 0.0)
        .map(|(&i, _)| i)
        .unwrap_or(order[0])
}

impl VarModel {
    /// Scale-by-scale sampling; one uniform per cell, row-major, from a
    /// ChaCha stream seeded by `seed`.
    pub fn sample(&self, prompt: &Prompt, cfg: &SampleConfig, seed: u64) -> Result<TokenPyramid> {
        cfg.validate(self.config.vocab)?;
        let sched = &self.config.schedule;
        let mut r = rng::seeded(seed);
        let mut pyramid = TokenPyramid::empty(sched.finest());
        for s in 0..sched.len() {
            let logits = self.forward_prefix(prompt, &pyramid, s + 1)?;
            let t = &logits.logits[s];
            let grid = (0..sched.cells(s))
                .map(|cell| sample_cell(t.row(cell), cfg, r.random::<f64>()))
                .collect();
            pyramid.push(sched.scales()[s], grid)?;
        }
        Ok(pyramid)
    }
}
