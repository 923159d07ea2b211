use serde::{Deserialize, Serialize};

use super::{LogitsPyramid, ParamVars, TeacherItem, VarModel};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::TokenPyramid;

/// Per-scale loss weights; all ones is neutral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleWeights(pub Vec<f64>);

impl ScaleWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!("scale weight {bad} must be finite and non-negative")));
        }
        Ok(Self(w))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    /// `fine` on the finest third of `n` scales (rounded up), 1 elsewhere.
    pub fn fine_scaled(n: usize, fine: f64) -> Self {
        let k = n.div_ceil(3);
        Self((0..n).map(|s| if s + k >= n { fine } else { 1.0 }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// One weight per token row of `scales`.
    pub fn per_row(&self, scales: &[(usize, usize)]) -> Result<Vec<f64>> {
        if self.0.len() != scales.len() {
            return Err(Error::shape(
                "weighted-nll",
                format!("{} weights for {} scales", self.0.len(), scales.len()),
            ));
        }
        Ok(scales
            .iter()
            .zip(&self.0)
            .flat_map(|((h, w), &wt)| std::iter::repeat_n(wt, h * w))
            .collect())
    }
}

/// `-log softmax(row)[target]`.
pub fn cell_nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

fn row_losses(logits: &LogitsPyramid, pyramid: &TokenPyramid) -> Result<Vec<f64>> {
    if logits.scales != pyramid.scales {
        return Err(Error::shape(
            "nll",
            format!("logit scales {:?} vs pyramid {:?}", logits.scales, pyramid.scales),
        ));
    }
    let mut out = Vec::new();
    for (t, grid) in logits.logits.iter().zip(&pyramid.grids) {
        for (cell, &target) in grid.iter().enumerate() {
            let row = t.row(cell);
            if target >= row.len() {
                return Err(Error::InvalidArgument(format!("token {target} out of range")));
            }
            out.push(cell_nll(row, target));
        }
    }
    Ok(out)
}

/// Summed negative log-likelihood over every cell of every scale.
pub fn nll(logits: &LogitsPyramid, pyramid: &TokenPyramid) -> Result<f64> {
    Ok(row_losses(logits, pyramid)?.iter().sum())
}

/// `Σ_s w_s Σ_cells -log p`, accumulated in the same row order as [`nll`].
pub fn weighted_nll(logits: &LogitsPyramid, pyramid: &TokenPyramid, w: &ScaleWeights) -> Result<f64> {
    let rows = w.per_row(&logits.scales)?;
    Ok(row_losses(logits, pyramid)?.iter().zip(&rows).map(|(l, w)| l * w).sum())
}

impl VarModel {
    /// Tape value of the weighted teacher-forced loss of one item.
    pub fn weighted_loss_on_tape(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        item: &TeacherItem,
        w: &ScaleWeights,
    ) -> Result<Var> {
        let n = item.n_scales();
        let logits = self.forward_on_tape(tape, pv, &[&item.prompt], item.inputs.as_ref(), n, None)?[0];
        self.weighted_loss_from_logits(tape, logits, &item.pyramid, w)
    }

    pub fn weighted_loss_from_logits(
        &self,
        tape: &mut Tape,
        logits: Var,
        pyramid: &TokenPyramid,
        w: &ScaleWeights,
    ) -> Result<Var> {
        let rows = w.per_row(&pyramid.scales)?;
        let ce = tape.cross_entropy(logits, &pyramid.flat())?;
        let ce = tape.mask_mul(ce, &Tensor::from_vec(rows))?;
        tape.sum(ce)
    }
}
