//! Continual learners sharing one data stream: GCNS and the comparison
//! methods.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcns::{item_index, train_task, GcnsConfig, TaskLedger, TaskSpec};
use crate::model::{Group, ParamVars, TeacherItem, VarModel};
use crate::optim::Optimizer;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Gcns,
    FullFinetune,
    DistillKl,
    LowrankAdapter,
    Frozen,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Gcns,
        BaselineKind::FullFinetune,
        BaselineKind::DistillKl,
        BaselineKind::LowrankAdapter,
        BaselineKind::Frozen,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Gcns => "gcns",
            BaselineKind::FullFinetune => "full_finetune",
            BaselineKind::DistillKl => "distill_kl",
            BaselineKind::LowrankAdapter => "lowrank_adapter",
            BaselineKind::Frozen => "frozen",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Weight of the teacher KL term for `distill_kl`.
    pub distill_weight: f64,
    pub adapter_rank: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            distill_weight: 1.0,
            adapter_rank: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdapterTarget {
    name: String,
    d_in: usize,
    d_out: usize,
    offset: usize,
}

/// One shared `W + A·B` pair per cross-attention and feed-forward matrix.
/// `B` starts at zero so the adapted model equals the base model.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub rank: usize,
    targets: Vec<AdapterTarget>,
    pub values: Vec<f64>,
}

impl LowRankAdapter {
    pub fn new(model: &VarModel, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let mut r = rng::stream(seed, "adapter-init");
        let mut targets = Vec::new();
        let mut values = Vec::new();
        for s in model.store.segments() {
            if !matches!(s.group, Group::CrossAttention | Group::FeedForward) || s.shape.len() != 2 {
                continue;
            }
            let (d_in, d_out) = (s.shape[0], s.shape[1]);
            let dist = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("positive std");
            targets.push(AdapterTarget {
                name: s.name.clone(),
                d_in,
                d_out,
                offset: values.len(),
            });
            values.extend((0..d_in * rank).map(|_| dist.sample(&mut r)));
            values.extend(std::iter::repeat_n(0.0, rank * d_out));
        }
        Ok(Self { rank, targets, values })
    }

    /// `8 · r · (d_in + d_out)` per adapted matrix.
    pub fn bytes(&self) -> usize {
        self.values.len() * std::mem::size_of::<f64>()
    }

    fn parts(&self, t: &AdapterTarget) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let a = t.offset..t.offset + t.d_in * self.rank;
        let b = a.end..a.end + self.rank * t.d_out;
        (a, b)
    }

    /// Leaves for every factor, with the adapted matrices installed in `pv`.
    fn install(&self, tape: &mut Tape, pv: &mut ParamVars) -> Result<Vec<(Var, Var)>> {
        let mut leaves = Vec::with_capacity(self.targets.len());
        for t in &self.targets {
            let (ra, rb) = self.parts(t);
            let a = tape.leaf(Tensor::new(vec![t.d_in, self.rank], self.values[ra].to_vec())?);
            let b = tape.leaf(Tensor::new(vec![self.rank, t.d_out], self.values[rb].to_vec())?);
            let ab = tape.matmul(a, b)?;
            let w = tape.add(pv.get(&t.name), ab)?;
            pv.set(&t.name, w);
            leaves.push((a, b));
        }
        Ok(leaves)
    }

    fn flat_grad(&self, tape: &Tape, leaves: &[(Var, Var)]) -> Vec<f64> {
        let mut g = vec![0.0; self.values.len()];
        for (t, &(a, b)) in self.targets.iter().zip(leaves) {
            let (ra, rb) = self.parts(t);
            if let Some(ga) = tape.grad(a) {
                g[ra].copy_from_slice(ga);
            }
            if let Some(gb) = tape.grad(b) {
                g[rb].copy_from_slice(gb);
            }
        }
        g
    }

    /// Folds `A·B` into a copy of the base weights.
    pub fn merge(&self, model: &VarModel) -> Result<VarModel> {
        let mut out = model.clone();
        for t in &self.targets {
            let (ra, rb) = self.parts(t);
            let (a, b) = (&self.values[ra], &self.values[rb]);
            let w = out.store.get_mut(&t.name)?;
            for i in 0..t.d_in {
                for k in 0..self.rank {
                    let av = a[i * self.rank + k];
                    for j in 0..t.d_out {
                        w[i * t.d_out + j] += av * b[k * t.d_out + j];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// What one learned task left behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    pub method: BaselineKind,
    pub task_id: usize,
    pub concept: String,
    /// Total loss before each update.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub mask_popcount: Option<usize>,
    pub overlap_with_history: Option<usize>,
    pub batch_hash: Option<String>,
    pub seconds: f64,
}

/// Hash of the item stream a trainer consumed.
pub fn batch_stream_hash(items: &[TeacherItem], trace: &[usize]) -> String {
    let mut bytes = Vec::new();
    for &i in trace {
        bytes.extend((i as u64).to_le_bytes());
        for &id in &items[i].prompt.ids {
            bytes.extend((id as u64).to_le_bytes());
        }
        for t in items[i].pyramid.flat() {
            bytes.extend((t as u64).to_le_bytes());
        }
    }
    rng::sha256_hex(&bytes)
}

/// One method's model plus whatever state it carries between tasks.
#[derive(Debug, Clone)]
pub struct Learner {
    pub kind: BaselineKind,
    pub model: VarModel,
    pub ledger: TaskLedger,
    pub adapter: Option<LowRankAdapter>,
    pub extra: BaselineConfig,
    learned: usize,
}

impl Learner {
    pub fn new(kind: BaselineKind, base: &VarModel, extra: &BaselineConfig, seed: u64) -> Result<Self> {
        let adapter = match kind {
            BaselineKind::LowrankAdapter => Some(LowRankAdapter::new(base, extra.adapter_rank, seed)?),
            _ => None,
        };
        Ok(Self {
            kind,
            model: base.clone(),
            ledger: TaskLedger::new(base.store.ca_indices().len(), &base.store.values),
            adapter,
            extra: extra.clone(),
            learned: 0,
        })
    }

    /// Learner state after `learned` tasks, as persisted by the CLI. The
    /// adapter layout is rebuilt from `base`; only its values are restored.
    pub fn resume(
        kind: BaselineKind,
        base: &VarModel,
        extra: &BaselineConfig,
        seed: u64,
        model: VarModel,
        ledger: TaskLedger,
        adapter_values: Option<Vec<f64>>,
        learned: usize,
    ) -> Result<Self> {
        let mut l = Self::new(kind, base, extra, seed)?;
        if model.store.len() != base.store.len() {
            return Err(Error::Artifact("checkpoint does not match the base model layout".into()));
        }
        match (&mut l.adapter, adapter_values) {
            (Some(a), Some(v)) if v.len() == a.values.len() => a.values = v,
            (None, None) => {}
            _ => return Err(Error::Artifact(format!("adapter state does not fit method {kind}"))),
        }
        l.model = model;
        l.ledger = ledger;
        l.learned = learned;
        Ok(l)
    }

    /// Registers the concept token and trains task `spec`.
    pub fn learn(&mut self, spec: &TaskSpec, items: &[TeacherItem], cfg: &GcnsConfig) -> Result<LearnReport> {
        cfg.validate()?;
        if items.is_empty() {
            return Err(Error::InvalidArgument("concept has no training items".into()));
        }
        let start = Instant::now();
        let mut report = LearnReport {
            method: self.kind,
            task_id: spec.task_id,
            concept: spec.concept_token.clone(),
            losses: Vec::new(),
            final_loss: 0.0,
            mask_popcount: None,
            overlap_with_history: None,
            batch_hash: None,
            seconds: 0.0,
        };
        match self.kind {
            BaselineKind::Gcns => {
                let out = train_task(&mut self.model, &mut self.ledger, spec, items, cfg)?;
                report.losses = out.steps.iter().map(|p| p.total).collect();
                report.final_loss = out.final_loss.total;
                report.mask_popcount = Some(out.mask.popcount());
                report.overlap_with_history = Some(out.overlap_with_history);
                report.batch_hash = Some(batch_stream_hash(items, &out.batch_trace));
            }
            BaselineKind::Frozen => {}
            _ => {
                let (losses, final_loss, trace) = self.finetune(spec, items, cfg)?;
                report.losses = losses;
                report.final_loss = final_loss;
                report.batch_hash = Some(batch_stream_hash(items, &trace));
            }
        }
        self.learned += 1;
        report.seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }

    fn loss_on_tape(
        &self,
        tape: &mut Tape,
        item: &TeacherItem,
        cfg: &GcnsConfig,
        teacher: Option<&VarModel>,
    ) -> Result<(Var, ParamVars, Vec<(Var, Var)>)> {
        let mut pv = self.model.store.vars(tape, true);
        let leaves = match &self.adapter {
            Some(a) => a.install(tape, &mut pv)?,
            None => Vec::new(),
        };
        let n = item.n_scales();
        let logits = self
            .model
            .forward_on_tape(tape, &pv, &[&item.prompt], item.inputs.as_ref(), n, None)?[0];
        let mut total = self.model.weighted_loss_from_logits(tape, logits, &item.pyramid, &cfg.weights)?;
        if let Some(t) = teacher {
            let tl = t.forward_teacher_forced(&item.prompt, &item.pyramid)?;
            let (rows, v) = (item.pyramid.flat().len(), t.config.vocab);
            let mut probs = Vec::with_capacity(rows * v);
            for l in &tl.logits {
                for r in 0..l.shape()[0] {
                    let row = l.row(r);
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    probs.extend(e.into_iter().map(|x| x / s));
                }
            }
            // cross-entropy to the teacher differs from KL by the teacher
            // entropy, a constant
            let ce = tape.soft_cross_entropy(logits, &Tensor::new(vec![rows, v], probs)?)?;
            let ce = tape.sum(ce)?;
            let ce = tape.scale(ce, self.extra.distill_weight)?;
            total = tape.add(total, ce)?;
        }
        Ok((total, pv, leaves))
    }

    fn finetune(&mut self, spec: &TaskSpec, items: &[TeacherItem], cfg: &GcnsConfig) -> Result<(Vec<f64>, f64, Vec<usize>)> {
        let teacher = (self.kind == BaselineKind::DistillKl).then(|| self.model.clone());
        let rows = self.model.embedding_row_indices(spec.concept_id)?;
        let len = self.model.store.len();
        let mut lr = match self.kind {
            BaselineKind::LowrankAdapter => vec![0.0; len],
            _ => vec![cfg.lr_neuron * cfg.lr_scale; len],
        };
        for &j in &rows {
            lr[j] = cfg.lr_embedding * cfg.lr_scale;
        }
        let mut opt = Optimizer::new(cfg.optimizer, len);
        let mut adapter_opt = self.adapter.as_ref().map(|a| Optimizer::new(cfg.optimizer, a.values.len()));
        let adapter_lr = self
            .adapter
            .as_ref()
            .map(|a| vec![cfg.lr_neuron * cfg.lr_scale; a.values.len()]);
        let mut losses = Vec::with_capacity(cfg.iterations);
        let mut trace = Vec::with_capacity(cfg.iterations);
        for it in 0..cfg.iterations {
            let idx = item_index(it, items.len());
            trace.push(idx);
            let mut tape = Tape::new();
            let (loss, pv, leaves) = self.loss_on_tape(&mut tape, &items[idx], cfg, teacher.as_ref())?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::numeric("finetune", format!("non-finite loss at iteration {it}")));
            }
            losses.push(value);
            tape.backward(loss)?;
            let grad = self.model.store.flat_grad(&tape, &pv);
            opt.step(&mut self.model.store.values, &grad, &lr);
            if let (Some(a), Some(o), Some(alr)) = (self.adapter.as_mut(), adapter_opt.as_mut(), adapter_lr.as_ref()) {
                let g = a.flat_grad(&tape, &leaves);
                o.step(&mut a.values, &g, alr);
            }
            if self.model.store.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    "finetune",
                    format!("parameters diverged at iteration {it} (seed {})", spec.seed),
                ));
            }
        }
        let last = item_index(cfg.iterations.saturating_sub(1), items.len());
        let mut tape = Tape::new();
        let (loss, _, _) = self.loss_on_tape(&mut tape, &items[last], cfg, teacher.as_ref())?;
        Ok((losses, tape.value(loss).item(), trace))
    }

    /// Model used for sampling and the seconds spent composing it.
    pub fn inference_model(&self) -> Result<(VarModel, f64)> {
        match &self.adapter {
            Some(a) => {
                let start = Instant::now();
                let m = a.merge(&self.model)?;
                Ok((m, start.elapsed().as_secs_f64()))
            }
            None => Ok((self.model.clone(), 0.0)),
        }
    }

    /// Extra persistent bytes per learned concept beyond the shared model.
    pub fn bytes_per_concept(&self) -> usize {
        match self.kind {
            BaselineKind::Gcns => self
                .ledger
                .tasks
                .last()
                .map(|t| t.mask.to_bytes().len())
                .unwrap_or(self.ledger.d_ca.div_ceil(8)),
            BaselineKind::LowrankAdapter => self.adapter.as_ref().map(|a| a.bytes()).unwrap_or(0),
            _ => 0,
        }
    }

    pub fn learned(&self) -> usize {
        self.learned
    }
}
