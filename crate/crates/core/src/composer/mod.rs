//! Region-controlled multi-concept sampling.
//!
//! One global branch and `B` local branches share the token context. From
//! the intervention scale on, local branches take the global branch's
//! cross-attention features outside their boxes, their logits are pulled
//! toward the global logits, and a single merged logit grid is sampled for
//! everyone.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_cell, Fusion, FusionSite, Prompt, SampleConfig, VarModel};
use crate::rng;
use crate::tensor::{Tape, Tensor};
use crate::tokenizer::{decode_grid, upsample_grid, FeatureMap, TokenPyramid};

#[cfg(test)]
mod tests;

/// Normalized rectangle; serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxRegion {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxRegion {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if !(inside(x0) && inside(y0) && inside(x1) && inside(y1)) {
            return Err(Error::InvalidArgument(format!(
                "box [{x0}, {y0}, {x1}, {y1}] leaves the unit square"
            )));
        }
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::InvalidArgument(format!("box [{x0}, {y0}, {x1}, {y1}] is empty")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full() -> Self {
        Self { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    pub fn overlaps(&self, other: &BoxRegion) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    /// Overlap area of this box with cell `(r, c)` of an `h × w` grid, in
    /// cell units.
    fn cell_overlap(&self, r: usize, c: usize, (h, w): (usize, usize)) -> f64 {
        let ox = (self.x1 * w as f64).min((c + 1) as f64) - (self.x0 * w as f64).max(c as f64);
        let oy = (self.y1 * h as f64).min((r + 1) as f64) - (self.y0 * h as f64).max(r as f64);
        if ox > 0.0 && oy > 0.0 {
            ox * oy
        } else {
            0.0
        }
    }

    fn center_cell(&self, (h, w): (usize, usize)) -> usize {
        let r = (((self.y0 + self.y1) / 2.0 * h as f64) as usize).min(h - 1);
        let c = (((self.x0 + self.x1) / 2.0 * w as f64) as usize).min(w - 1);
        r * w + c
    }
}

impl TryFrom<[f64; 4]> for BoxRegion {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoxRegion> for [f64; 4] {
    fn from(b: BoxRegion) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Row-major grid with a cell set iff it overlaps `region` with positive
/// area; never empty.
pub fn rasterize_box(region: &BoxRegion, (h, w): (usize, usize)) -> Vec<bool> {
    let mut out: Vec<bool> = (0..h * w)
        .map(|i| region.cell_overlap(i / w, i % w, (h, w)) > 0.0)
        .collect();
    if !out.iter().any(|&b| b) {
        out[region.center_cell((h, w))] = true;
    }
    out
}

/// How cells claimed by more than one branch are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapMode {
    /// Boxes must be disjoint; a grid cell touched by several boxes goes to
    /// the one covering most of it.
    #[default]
    Strict,
    /// Later branches overwrite earlier ones.
    LastWins,
}

/// Which scales receive the multi-branch treatment. Scale numbers start at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Intervention {
    From(usize),
    Only(usize),
}

impl Intervention {
    pub fn active(&self, scale_index: usize) -> bool {
        let s = scale_index + 1;
        match *self {
            Intervention::From(start) => s >= start,
            Intervention::Only(only) => s == only,
        }
    }

    fn validate(&self) -> Result<()> {
        let (Intervention::From(s) | Intervention::Only(s)) = *self;
        if s == 0 {
            return Err(Error::Config("intervention scales are numbered from 1".into()));
        }
        Ok(())
    }
}

/// Per-branch masks at one scale plus the background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleMask {
    pub scale: (usize, usize),
    pub branches: Vec<Vec<bool>>,
    pub background: Vec<bool>,
}

impl ScaleMask {
    /// Rasterizes every box; in strict mode shared cells are handed to a
    /// single branch so the masks partition the grid.
    pub fn build(boxes: &[BoxRegion], scale: (usize, usize), mode: OverlapMode) -> Result<Self> {
        let n = scale.0 * scale.1;
        let mut branches: Vec<Vec<bool>> = boxes.iter().map(|b| rasterize_box(b, scale)).collect();
        if mode == OverlapMode::Strict && boxes.len() > 1 {
            for cell in 0..n {
                let claim: Vec<usize> = (0..boxes.len()).filter(|&i| branches[i][cell]).collect();
                if claim.len() < 2 {
                    continue;
                }
                let area = |i: usize| boxes[i].cell_overlap(cell / scale.1, cell % scale.1, scale);
                // first maximum wins ties
                let owner = claim
                    .iter()
                    .copied()
                    .fold(claim[0], |best, i| if area(i) > area(best) { i } else { best });
                for &i in &claim {
                    branches[i][cell] = i == owner;
                }
            }
            for (i, b) in boxes.iter().enumerate() {
                if branches[i].iter().any(|&v| v) {
                    continue;
                }
                // a starved branch takes its centre cell unless that
                // would starve the owner in turn
                let c = b.center_cell(scale);
                if let Some(j) = (0..boxes.len()).find(|&j| branches[j][c]) {
                    if branches[j].iter().filter(|&&v| v).count() < 2 {
                        return Err(Error::InvalidArgument(format!(
                            "boxes {j} and {i} cannot be separated on the {}x{} grid",
                            scale.0, scale.1
                        )));
                    }
                    branches[j][c] = false;
                }
                branches[i][c] = true;
            }
        }
        let background = (0..n).map(|c| !branches.iter().any(|m| m[c])).collect();
        Ok(Self {
            scale,
            branches,
            background,
        })
    }
}

/// Rows of `f_local` inside the mask, rows of `f_global` elsewhere.
pub fn fuse_features(f_local: &Tensor, f_global: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if f_local.shape() != f_global.shape() {
        return Err(Error::shape(
            "fuse-features",
            format!("{:?} vs {:?}", f_local.shape(), f_global.shape()),
        ));
    }
    let (m, d) = f_local
        .dims2()
        .ok_or_else(|| Error::shape("fuse-features", "expected [rows, d]"))?;
    if mask.len() != m {
        return Err(Error::shape("fuse-features", format!("{} mask rows for {m}", mask.len())));
    }
    let mut out = Vec::with_capacity(m * d);
    for (r, &keep) in mask.iter().enumerate() {
        out.extend_from_slice(if keep { f_local.row(r) } else { f_global.row(r) });
    }
    Tensor::new(vec![m, d], out)
}

/// `α L_G + (1 − α) L_i`, computed as `L_i + α (L_G − L_i)` so both ends
/// of the range reproduce their source bit-exactly.
pub fn blend_logits(global: &Tensor, local: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if global.shape() != local.shape() {
        return Err(Error::shape("blend-logits", format!("{:?} vs {:?}", global.shape(), local.shape())));
    }
    if alpha == 1.0 {
        return Ok(global.clone());
    }
    let data = global
        .data()
        .iter()
        .zip(local.data())
        .map(|(g, l)| l + alpha * (g - l))
        .collect();
    Tensor::new(global.shape().to_vec(), data)
}

/// Per-cell copy of the owning source row: the background takes `L_G`,
/// branch cells take their blended logits.
pub fn merge_logits(global: &Tensor, locals: &[Tensor], mask: &ScaleMask, mode: OverlapMode) -> Result<Tensor> {
    let (n, v) = global
        .dims2()
        .ok_or_else(|| Error::shape("merge-logits", "expected [cells, V]"))?;
    if locals.len() != mask.branches.len() {
        return Err(Error::shape(
            "merge-logits",
            format!("{} logit grids for {} masks", locals.len(), mask.branches.len()),
        ));
    }
    if mask.background.len() != n || mask.branches.iter().any(|m| m.len() != n) {
        return Err(Error::shape("merge-logits", format!("masks do not cover {n} cells")));
    }
    if let Some(l) = locals.iter().find(|l| l.shape() != global.shape()) {
        return Err(Error::shape("merge-logits", format!("{:?} vs {:?}", l.shape(), global.shape())));
    }
    if mode == OverlapMode::Strict {
        let shared: Vec<usize> = (0..n)
            .filter(|&c| mask.branches.iter().filter(|m| m[c]).count() > 1)
            .collect();
        if !shared.is_empty() {
            return Err(Error::InvalidArgument(format!("overlapping branch masks at cells {shared:?}")));
        }
    }
    let mut out = Vec::with_capacity(n * v);
    for c in 0..n {
        let owner = (0..locals.len()).rev().find(|&i| mask.branches[i][c]);
        out.extend_from_slice(match owner {
            Some(i) => locals[i].row(c),
            None => global.row(c),
        });
    }
    Tensor::new(vec![n, v], out)
}

/// One local branch of a composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub prompt: String,
    #[serde(rename = "box")]
    pub region: BoxRegion,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_s_start() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionSpec {
    pub global_prompt: String,
    #[serde(default)]
    pub branches: Vec<BranchSpec>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_s_start")]
    pub s_start: usize,
    #[serde(default)]
    pub seed: u64,
    /// Overrides `s_start` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervention: Option<Intervention>,
    #[serde(default)]
    pub overlap: OverlapMode,
    #[serde(default)]
    pub fusion_site: FusionSite,
}

impl CompositionSpec {
    pub fn new(global_prompt: &str, branches: Vec<BranchSpec>) -> Self {
        Self {
            global_prompt: global_prompt.to_string(),
            branches,
            alpha: default_alpha(),
            s_start: default_s_start(),
            seed: 0,
            intervention: None,
            overlap: OverlapMode::Strict,
            fusion_site: FusionSite::CrossAttention,
        }
    }

    pub fn intervention(&self) -> Intervention {
        self.intervention.unwrap_or(Intervention::From(self.s_start))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.s_start == 0 {
            return Err(Error::Config("s_start is numbered from 1".into()));
        }
        self.intervention().validate()?;
        if self.overlap == OverlapMode::Strict {
            for i in 0..self.branches.len() {
                for j in i + 1..self.branches.len() {
                    if self.branches[i].region.overlaps(&self.branches[j].region) {
                        return Err(Error::Config(format!("boxes of branches {i} and {j} overlap")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("composition spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Running feature sum carried by one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchState {
    pub running_sum: FeatureMap,
}

/// Audit record written beside a composed image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub scale: (usize, usize),
    pub intervened: bool,
    pub branches: Vec<Vec<u8>>,
    pub background: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct ComposeOutcome {
    pub pyramid: TokenPyramid,
    pub masks: Vec<ScaleMask>,
    pub intervened: Vec<bool>,
    /// Global branch first.
    pub states: Vec<BranchState>,
}

impl ComposeOutcome {
    pub fn mask_records(&self) -> Vec<MaskRecord> {
        let bits = |m: &[bool]| m.iter().map(|&b| b as u8).collect();
        self.masks
            .iter()
            .zip(&self.intervened)
            .map(|(m, &on)| MaskRecord {
                scale: m.scale,
                intervened: on,
                branches: m.branches.iter().map(|b| bits(b)).collect(),
                background: bits(&m.background),
            })
            .collect()
    }
}

/// Multi-branch sampling of one pyramid. Consumes one uniform per cell in
/// row-major order, exactly like [`VarModel::sample`], so specs that never
/// change the logits reproduce plain samples.
pub fn compose_sample(model: &VarModel, spec: &CompositionSpec, cfg: &SampleConfig) -> Result<ComposeOutcome> {
    spec.validate()?;
    cfg.validate(model.config.vocab)?;
    let sched = &model.config.schedule;
    let global = model.prompt(&spec.global_prompt)?;
    let locals: Vec<Prompt> = spec
        .branches
        .iter()
        .map(|b| model.prompt(&b.prompt))
        .collect::<Result<_>>()?;
    let boxes: Vec<BoxRegion> = spec.branches.iter().map(|b| b.region).collect();
    let plan = spec.intervention();
    let intervened: Vec<bool> = (0..sched.len()).map(|s| !locals.is_empty() && plan.active(s)).collect();
    // grids too coarse to separate the boxes are fine as long as they are
    // never intervened on; those keep the raw rasterization for the record
    let masks: Vec<ScaleMask> = sched
        .scales()
        .iter()
        .zip(&intervened)
        .map(|(&s, &on)| ScaleMask::build(&boxes, s, if on { spec.overlap } else { OverlapMode::LastWins }))
        .collect::<Result<_>>()?;

    let mut prompts: Vec<&Prompt> = vec![&global];
    prompts.extend(locals.iter());
    let (fh, fw) = sched.finest();
    let mut states = vec![
        BranchState {
            running_sum: FeatureMap::zeros(fh, fw, model.codebook.dim()),
        };
        prompts.len()
    ];
    let mut r = rng::seeded(spec.seed);
    let mut pyramid = TokenPyramid::empty(sched.finest());
    for s in 0..sched.len() {
        let inputs = model.scale_inputs(&pyramid, s + 1)?;
        let mut tape = Tape::new();
        let pv = model.store.vars(&mut tape, false);
        let off = sched.offset(s);
        let cells = sched.cells(s);
        let logits = if intervened[s] {
            let fusion = fusion_plan(spec.fusion_site, &masks, &intervened, s, locals.len());
            let out = model.forward_on_tape(&mut tape, &pv, &prompts, inputs.as_ref(), s + 1, Some(&fusion))?;
            let rows: Vec<Tensor> = out
                .iter()
                .map(|&o| tape.value(o).clone())
                .map(|t| scale_rows(&t, off, cells))
                .collect::<Result<_>>()?;
            let blended: Vec<Tensor> = rows[1..]
                .iter()
                .map(|l| blend_logits(&rows[0], l, spec.alpha))
                .collect::<Result<_>>()?;
            merge_logits(&rows[0], &blended, &masks[s], spec.overlap)?
        } else {
            let out = model.forward_on_tape(&mut tape, &pv, &[&global], inputs.as_ref(), s + 1, None)?;
            scale_rows(tape.value(out[0]), off, cells)?
        };
        let grid: Vec<usize> = (0..cells)
            .map(|cell| sample_cell(logits.row(cell), cfg, r.random::<f64>()))
            .collect();
        let up = upsample_grid(&decode_grid(&grid, sched.scales()[s], &model.codebook)?, (fh, fw));
        for st in &mut states {
            for (a, u) in st.running_sum.values.iter_mut().zip(&up.values) {
                *a += u;
            }
        }
        pyramid.push(sched.scales()[s], grid)?;
    }
    Ok(ComposeOutcome {
        pyramid,
        masks,
        intervened,
        states,
    })
}

/// Rows `[off, off + cells)` of branch logits.
fn scale_rows(t: &Tensor, off: usize, cells: usize) -> Result<Tensor> {
    let (_, v) = t.dims2().ok_or_else(|| Error::shape("compose", "expected [T, V]"))?;
    Tensor::new(vec![cells, v], t.data()[off * v..(off + cells) * v].to_vec())
}

/// Splice plan over the `1 + T` sequence rows of the first `s + 1` scales.
/// Rows of non-intervened scales always take global features; the prefix
/// row has no grid position and keeps the branch's own features.
fn fusion_plan(site: FusionSite, masks: &[ScaleMask], intervened: &[bool], s: usize, n_local: usize) -> Fusion {
    let keep_local = (0..n_local)
        .map(|i| {
            let mut rows = vec![true];
            for k in 0..=s {
                let n = masks[k].scale.0 * masks[k].scale.1;
                if intervened[k] {
                    rows.extend_from_slice(&masks[k].branches[i]);
                } else {
                    rows.extend(std::iter::repeat_n(false, n));
                }
            }
            rows
        })
        .collect();
    Fusion { keep_local, site }
}
