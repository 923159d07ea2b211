use super::mask::block_causal_mask;
use super::{ParamVars, Prompt, VarModel};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{decode_grid, next_scale_input, upsample_grid, FeatureMap, TokenPyramid};

const LN_EPS: f64 = 1e-5;

/// Per-scale logits `[h_s * w_s, V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsPyramid {
    pub scales: Vec<(usize, usize)>,
    pub logits: Vec<Tensor>,
}

impl LogitsPyramid {
    pub fn from_flat(flat: &Tensor, scales: &[(usize, usize)]) -> Result<Self> {
        let (rows, v) = flat
            .dims2()
            .ok_or_else(|| Error::shape("logits", "expected [T, V]"))?;
        let total: usize = scales.iter().map(|(h, w)| h * w).sum();
        if total != rows {
            return Err(Error::shape("logits", format!("{rows} rows for {total} cells")));
        }
        let mut off = 0;
        let mut logits = Vec::with_capacity(scales.len());
        for (h, w) in scales {
            let n = h * w;
            logits.push(Tensor::new(vec![n, v], flat.data()[off * v..(off + n) * v].to_vec())?);
            off += n;
        }
        Ok(Self {
            scales: scales.to_vec(),
            logits,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// Where branch features are spliced during composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSite {
    #[default]
    CrossAttention,
    BlockOutput,
}

/// Row splice plan: branch 0 is global; `keep_local[i]` selects, per
/// sequence row, whether branch `i + 1` keeps its own features (true) or
/// takes the global branch's (false).
#[derive(Debug, Clone)]
pub struct Fusion {
    pub keep_local: Vec<Vec<bool>>,
    pub site: FusionSite,
}

/// A prompt/pyramid pair with its next-scale inputs precomputed.
#[derive(Debug, Clone)]
pub struct TeacherItem {
    pub prompt: Prompt,
    pub pyramid: TokenPyramid,
    pub inputs: Option<Tensor>,
}

impl TeacherItem {
    pub fn n_scales(&self) -> usize {
        self.pyramid.len()
    }
}

struct Layer {
    l: usize,
}

impl Layer {
    fn p(&self, name: &str) -> String {
        format!("layer{}.{name}", self.l)
    }
}

impl VarModel {
    /// Pooled running sums feeding scales `1..n_scales`, as `[cells, c]`.
    ///
    /// Only grids `0..n_scales-1` of `pyramid` are read.
    pub fn scale_inputs(&self, pyramid: &TokenPyramid, n_scales: usize) -> Result<Option<Tensor>> {
        let sched = &self.config.schedule;
        if n_scales == 0 || n_scales > sched.len() {
            return Err(Error::shape(
                "forward",
                format!("{n_scales} scales requested of {}", sched.len()),
            ));
        }
        if pyramid.len() + 1 < n_scales {
            return Err(Error::shape(
                "forward",
                format!("pyramid has {} scales, {n_scales} need {}", pyramid.len(), n_scales - 1),
            ));
        }
        if pyramid.scales[..pyramid.len().min(n_scales)] != sched.scales()[..pyramid.len().min(n_scales)] {
            return Err(Error::shape(
                "forward",
                format!("pyramid scales {:?} drift from the schedule", pyramid.scales),
            ));
        }
        if n_scales == 1 {
            return Ok(None);
        }
        let (h, w) = sched.finest();
        let c = self.codebook.dim();
        let mut acc = FeatureMap::zeros(h, w, c);
        let mut rows = Vec::new();
        for s in 1..n_scales {
            let up = upsample_grid(&decode_grid(&pyramid.grids[s - 1], sched.scales()[s - 1], &self.codebook)?, (h, w));
            for (a, u) in acc.values.iter_mut().zip(&up.values) {
                *a += u;
            }
            rows.extend(next_scale_input(&acc, s, sched)?.values);
        }
        let n = rows.len() / c;
        Ok(Some(Tensor::new(vec![n, c], rows)?))
    }

    pub fn prepare(&self, prompt: Prompt, pyramid: TokenPyramid) -> Result<TeacherItem> {
        pyramid.check_schedule(&self.config.schedule)?;
        let inputs = self.scale_inputs(&pyramid, pyramid.len())?;
        Ok(TeacherItem {
            prompt,
            pyramid,
            inputs,
        })
    }

    fn check_prompt(&self, p: &Prompt) -> Result<()> {
        if p.ids.is_empty() || p.ids.len() > self.config.max_prompt_len {
            return Err(Error::InvalidArgument(format!(
                "prompt length {} outside 1..={}",
                p.ids.len(),
                self.config.max_prompt_len
            )));
        }
        if let Some(&bad) = p.ids.iter().find(|&&id| id >= self.config.prompt_vocab()) {
            return Err(Error::InvalidArgument(format!("prompt id {bad} out of range")));
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn attention(&self, tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let kt = tape.transpose(k)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = if heads == 1 { q } else { tape.slice(q, 1, a, b)? };
            let kh = if heads == 1 { kt } else { tape.slice(kt, 0, a, b)? };
            let vh = if heads == 1 { v } else { tape.slice(v, 1, a, b)? };
            let s = tape.matmul(qh, kh)?;
            let s = tape.scale(s, scale)?;
            let s = match mask {
                Some(m) => tape.add(s, m)?,
                None => s,
            };
            let p = tape.softmax(s)?;
            outs.push(tape.matmul(p, vh)?);
        }
        if heads == 1 {
            Ok(outs[0])
        } else {
            tape.concat(&outs, 1)
        }
    }

    fn norm(&self, tape: &mut Tape, pv: &ParamVars, x: Var, name: &str) -> Result<Var> {
        tape.layer_norm(x, pv.get(&format!("{name}.g")), pv.get(&format!("{name}.b")), LN_EPS)
    }

    /// Embedded sequence `[1 + T, d]` for the first `n_scales` scales.
    fn embed(&self, tape: &mut Tape, pv: &ParamVars, inputs: Option<&Tensor>, n_scales: usize) -> Result<Var> {
        let sched = &self.config.schedule;
        let t: usize = (0..n_scales).map(|s| sched.cells(s)).sum();
        let mut parts = vec![pv.get("sos")];
        if let Some(inp) = inputs {
            let expected = t - 1;
            if inp.dims2() != Some((expected, self.config.code_dim)) {
                return Err(Error::shape(
                    "forward",
                    format!("scale inputs {:?} vs expected [{expected}, {}]", inp.shape(), self.config.code_dim),
                ));
            }
            let x = tape.constant(inp.clone());
            parts.push(self.linear(tape, x, pv.get("in_proj.w"), pv.get("in_proj.b"))?);
        } else if n_scales > 1 {
            return Err(Error::shape("forward", "missing scale inputs"));
        }
        let tokens = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        let pos = tape.slice(pv.get("pos_embed"), 0, 0, t)?;
        let scale_ids: Vec<usize> = (0..n_scales)
            .flat_map(|s| std::iter::repeat_n(s, sched.cells(s)))
            .collect();
        let se = tape.embedding(pv.get("scale_embed"), &scale_ids)?;
        let tokens = tape.add(tokens, pos)?;
        let tokens = tape.add(tokens, se)?;
        tape.concat(&[pv.get("prefix"), tokens], 0)
    }

    fn memory(&self, tape: &mut Tape, pv: &ParamVars, prompt: &Prompt) -> Result<Var> {
        self.check_prompt(prompt)?;
        let e = tape.embedding(pv.get("prompt.embed"), &prompt.ids)?;
        let pos = tape.slice(pv.get("prompt.pos"), 0, 0, prompt.ids.len())?;
        tape.add(e, pos)
    }

    /// Logits `[T, V]` for each prompt branch over the first `n_scales`
    /// scales. Branches share token inputs; `fusion` splices rows between
    /// branch 0 and the rest after every block's fusion site.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        prompts: &[&Prompt],
        inputs: Option<&Tensor>,
        n_scales: usize,
        fusion: Option<&Fusion>,
    ) -> Result<Vec<Var>> {
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("forward needs at least one prompt".into()));
        }
        if let Some(f) = fusion {
            if f.keep_local.len() + 1 != prompts.len() {
                return Err(Error::shape(
                    "forward",
                    format!("{} fusion masks for {} branches", f.keep_local.len(), prompts.len()),
                ));
            }
        }
        let x0 = self.embed(tape, pv, inputs, n_scales)?;
        let rows = tape.shape(x0)[0];
        if let Some(f) = fusion {
            if let Some(bad) = f.keep_local.iter().find(|m| m.len() != rows) {
                return Err(Error::shape("forward", format!("fusion mask of {} rows for {rows}", bad.len())));
            }
        }
        let mask = block_causal_mask(&self.config.schedule, n_scales);
        let mask = tape.constant(mask.additive());
        let mems = prompts
            .iter()
            .map(|p| self.memory(tape, pv, p))
            .collect::<Result<Vec<_>>>()?;
        let mut xs = vec![x0; prompts.len()];
        for l in 0..self.config.n_layers {
            let layer = Layer { l };
            let w = |n: &str| pv.get(&layer.p(n));
            let mut ca_out = Vec::with_capacity(xs.len());
            for (b, x) in xs.iter_mut().enumerate() {
                let h = self.norm(tape, pv, *x, &layer.p("ln1"))?;
                let q = self.linear(tape, h, w("sa.wq"), w("sa.bq"))?;
                let k = self.linear(tape, h, w("sa.wk"), w("sa.bk"))?;
                let v = self.linear(tape, h, w("sa.wv"), w("sa.bv"))?;
                let a = self.attention(tape, q, k, v, Some(mask))?;
                let a = self.linear(tape, a, w("sa.wo"), w("sa.bo"))?;
                *x = tape.add(*x, a)?;

                let h = self.norm(tape, pv, *x, &layer.p("ln2"))?;
                let q = self.linear(tape, h, w("ca.wq"), w("ca.bq"))?;
                let k = self.linear(tape, mems[b], w("ca.wk"), w("ca.bk"))?;
                let v = self.linear(tape, mems[b], w("ca.wv"), w("ca.bv"))?;
                let a = self.attention(tape, q, k, v, None)?;
                ca_out.push(self.linear(tape, a, w("ca.wo"), w("ca.bo"))?);
            }
            if let Some(f) = fusion.filter(|f| f.site == FusionSite::CrossAttention) {
                for (i, keep) in f.keep_local.iter().enumerate() {
                    ca_out[i + 1] = tape.splice_rows(ca_out[i + 1], ca_out[0], keep)?;
                }
            }
            for (x, a) in xs.iter_mut().zip(&ca_out) {
                *x = tape.add(*x, *a)?;
                let h = self.norm(tape, pv, *x, &layer.p("ln3"))?;
                let h = self.linear(tape, h, w("ffn.w1"), w("ffn.b1"))?;
                let h = tape.gelu(h)?;
                let h = self.linear(tape, h, w("ffn.w2"), w("ffn.b2"))?;
                *x = tape.add(*x, h)?;
            }
            if let Some(f) = fusion.filter(|f| f.site == FusionSite::BlockOutput) {
                for (i, keep) in f.keep_local.iter().enumerate() {
                    xs[i + 1] = tape.splice_rows(xs[i + 1], xs[0], keep)?;
                }
            }
        }
        xs.iter()
            .map(|&x| {
                let h = self.norm(tape, pv, x, "ln_f")?;
                let tokens = tape.slice(h, 0, 1, rows)?;
                self.linear(tape, tokens, pv.get("head.w"), pv.get("head.b"))
            })
            .collect()
    }

    /// Teacher-forced logits for every scale of `pyramid`.
    pub fn forward_teacher_forced(&self, prompt: &Prompt, pyramid: &TokenPyramid) -> Result<LogitsPyramid> {
        pyramid.check_schedule(&self.config.schedule)?;
        self.forward_prefix(prompt, pyramid, pyramid.len())
    }

    /// Logits for scales `0..n_scales`, reading grids `0..n_scales-1`.
    pub fn forward_prefix(&self, prompt: &Prompt, pyramid: &TokenPyramid, n_scales: usize) -> Result<LogitsPyramid> {
        let inputs = self.scale_inputs(pyramid, n_scales)?;
        let mut tape = Tape::new();
        let pv = self.store.vars(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &pv, &[prompt], inputs.as_ref(), n_scales, None)?;
        LogitsPyramid::from_flat(tape.value(out[0]), &self.config.schedule.scales()[..n_scales])
    }
}
