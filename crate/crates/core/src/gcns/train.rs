use serde::{Deserialize, Serialize};

use super::{merge_phase_masks, select_mask, ConceptMask, TaskLedger, TaskRecord};
use crate::error::{Error, Result};
use crate::model::{ParamVars, ScaleWeights, TeacherItem, VarModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcnsConfig {
    /// Selection percentage `p`.
    pub p: f64,
    /// Saliency refresh interval `e` in iterations.
    pub refresh_interval: usize,
    pub iterations: usize,
    pub lambda: f64,
    pub lr_embedding: f64,
    pub lr_neuron: f64,
    /// Multiplies both learning rates.
    pub lr_scale: f64,
    pub weights: ScaleWeights,
    pub optimizer: OptimizerKind,
    /// Apply the conflict term at all.
    pub regularize: bool,
    /// Refresh the saliency mask every `refresh_interval` iterations; when
    /// false the iteration-0 mask is kept for the whole task.
    pub dynamic_refresh: bool,
}

impl GcnsConfig {
    pub fn object(schedule_len: usize) -> Self {
        Self {
            p: 5.0,
            refresh_interval: 50,
            iterations: 300,
            lambda: 1.0,
            lr_embedding: 2e-3,
            lr_neuron: 2e-5,
            lr_scale: 10.0,
            weights: ScaleWeights::fine_scaled(schedule_len, 0.5),
            optimizer: OptimizerKind::Sgd,
            regularize: true,
            dynamic_refresh: true,
        }
    }

    pub fn style(schedule_len: usize) -> Self {
        Self {
            p: 10.0,
            ..Self::object(schedule_len)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 100.0) {
            return Err(Error::Config(format!("p = {} outside (0, 100]", self.p)));
        }
        if self.refresh_interval == 0 {
            return Err(Error::Config("refresh_interval must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {} must be non-negative", self.lambda)));
        }
        for (name, v) in [
            ("lr_embedding", self.lr_embedding),
            ("lr_neuron", self.lr_neuron),
            ("lr_scale", self.lr_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

/// Concept to learn as task `task_id`.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task_id: usize,
    pub concept_token: String,
    pub concept_id: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub weighted_nll: f64,
    pub reg: f64,
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub mask: ConceptMask,
    pub phase_masks: Vec<ConceptMask>,
    /// Task mask after each refresh; each is a superset of the previous.
    pub mask_trace: Vec<ConceptMask>,
    /// Loss before each update.
    pub steps: Vec<LossParts>,
    /// Loss at the trained parameters on the last iteration's item under
    /// the last regularization mask.
    pub final_loss: LossParts,
    pub final_item: usize,
    pub final_m_reg: ConceptMask,
    pub overlap_with_history: usize,
    /// Item index consumed at each iteration.
    pub batch_trace: Vec<usize>,
}

/// Item consumed at iteration `it`; shared by every trainer so batch
/// streams match across methods.
pub fn item_index(it: usize, n_items: usize) -> usize {
    it % n_items
}

/// `Σ_items ∇ L_w-var` restricted to cross-attention coordinates, summed in
/// item order.
pub fn compute_saliency(model: &VarModel, items: &[TeacherItem], w: &ScaleWeights) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("saliency batch is empty".into()));
    }
    let ca = model.store.ca_indices();
    let mut g = vec![0.0; ca.len()];
    for (b, item) in items.iter().enumerate() {
        let mut tape = Tape::new();
        let pv = model.store.vars(&mut tape, true);
        let loss = model.weighted_loss_on_tape(&mut tape, &pv, item, w)?;
        tape.backward(loss)?;
        let full = model.store.flat_grad(&tape, &pv);
        for (gj, &j) in g.iter_mut().zip(&ca) {
            let v = full[j];
            if !v.is_finite() {
                return Err(Error::numeric("compute-saliency", format!("non-finite gradient in batch item {b}")));
            }
            *gj += v;
        }
    }
    Ok(g)
}

/// Cross-attention leaves concatenated to `[D_CA]` in index order.
pub(crate) fn ca_vector(model: &VarModel, tape: &mut Tape, pv: &ParamVars) -> Result<Var> {
    let mut parts = Vec::new();
    for (s, &v) in model.store.segments().iter().zip(pv.leaves()) {
        if s.group == crate::model::Group::CrossAttention {
            parts.push(tape.reshape(v, vec![s.len()])?);
        }
    }
    tape.concat(&parts, 0)
}

/// `λ ‖M ⊙ (θ_CA − θ_old,CA)‖²` on the tape.
pub(crate) fn reg_on_tape(
    tape: &mut Tape,
    ca: Var,
    theta_old_ca: &[f64],
    m_reg: &ConceptMask,
    lambda: f64,
) -> Result<Var> {
    let old = tape.constant(Tensor::from_vec(theta_old_ca.to_vec()));
    let d = tape.sub(ca, old)?;
    let d = tape.mask_mul(d, &Tensor::from_vec(m_reg.as_f64()))?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, lambda)
}

struct StepEval {
    parts: LossParts,
    grad: Option<Vec<f64>>,
}

fn evaluate(
    model: &VarModel,
    item: &TeacherItem,
    cfg: &GcnsConfig,
    theta_old_ca: &[f64],
    m_reg: &ConceptMask,
    with_grad: bool,
) -> Result<StepEval> {
    let mut tape = Tape::new();
    let pv = model.store.vars(&mut tape, true);
    let wnll = model.weighted_loss_on_tape(&mut tape, &pv, item, &cfg.weights)?;
    let use_reg = cfg.regularize && !m_reg.is_empty();
    let (total, reg) = if use_reg {
        let ca = ca_vector(model, &mut tape, &pv)?;
        let reg = reg_on_tape(&mut tape, ca, theta_old_ca, m_reg, cfg.lambda)?;
        (tape.add(wnll, reg)?, Some(reg))
    } else {
        (wnll, None)
    };
    let parts = LossParts {
        total: tape.value(total).item(),
        weighted_nll: tape.value(wnll).item(),
        reg: reg.map(|r| tape.value(r).item()).unwrap_or(0.0),
    };
    if !parts.total.is_finite() {
        return Err(Error::numeric("train-task", "non-finite loss"));
    }
    let grad = if with_grad {
        tape.backward(total)?;
        Some(model.store.flat_grad(&tape, &pv))
    } else {
        None
    };
    Ok(StepEval { parts, grad })
}

/// One continual task: masked updates of the concept row and salient
/// cross-attention coordinates, then archival of the task mask.
pub fn train_task(
    model: &mut VarModel,
    ledger: &mut TaskLedger,
    spec: &TaskSpec,
    items: &[TeacherItem],
    cfg: &GcnsConfig,
) -> Result<TaskOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("concept has no training items".into()));
    }
    if spec.task_id != ledger.next_task_id() {
        return Err(Error::State(format!(
            "task id {} collides with ledger (next is {})",
            spec.task_id,
            ledger.next_task_id()
        )));
    }
    if ledger.contains_concept(&spec.concept_token) {
        return Err(Error::State(format!("concept `{}` was already learned", spec.concept_token)));
    }
    let ca = model.store.ca_indices();
    if ca.len() != ledger.d_ca {
        return Err(Error::shape("train-task", "ledger index space differs from the model"));
    }
    let history = ledger.history_mask().clone();
    let theta_old_ca: Vec<f64> = ca.iter().map(|&j| ledger.theta_old[j]).collect();
    let emb_rows = model.embedding_row_indices(spec.concept_id)?;
    let scale = cfg.lr_scale;

    let mut opt = Optimizer::new(cfg.optimizer, model.store.len());
    let mut phase_masks: Vec<ConceptMask> = Vec::new();
    let mut mask_trace = Vec::new();
    let mut task_mask = ConceptMask::zeros(ca.len(), spec.task_id, None);
    let mut m_reg = ConceptMask::zeros(ca.len(), spec.task_id, None);
    let mut lr = vec![0.0; model.store.len()];
    let mut steps = Vec::with_capacity(cfg.iterations);
    let mut batch_trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let refresh = if cfg.dynamic_refresh { it % cfg.refresh_interval == 0 } else { it == 0 };
        if refresh {
            let k = it / cfg.refresh_interval;
            let g = compute_saliency(model, items, &cfg.weights)?;
            let phase = select_mask(&g, cfg.p, spec.task_id, Some(k))?;
            task_mask.or_assign(&phase)?;
            m_reg = history.and(&phase)?;
            phase_masks.push(phase.clone());
            mask_trace.push(task_mask.clone());
            lr.iter_mut().for_each(|r| *r = 0.0);
            for &j in &emb_rows {
                lr[j] = cfg.lr_embedding * scale;
            }
            for bit in phase.ones() {
                lr[ca[bit]] = cfg.lr_neuron * scale;
            }
        }
        let item = &items[item_index(it, items.len())];
        batch_trace.push(item_index(it, items.len()));
        let eval = evaluate(model, item, cfg, &theta_old_ca, &m_reg, true)?;
        steps.push(eval.parts);
        let grad = eval.grad.expect("requested");
        opt.step(&mut model.store.values, &grad, &lr);
        if let Some(j) = model.store.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "train-task",
                format!("parameter {j} diverged at iteration {it} (seed {})", spec.seed),
            ));
        }
    }

    let final_item = item_index(cfg.iterations.saturating_sub(1), items.len());
    let final_loss = evaluate(model, &items[final_item], cfg, &theta_old_ca, &m_reg, false)?.parts;
    let overlap_with_history = history.and(&task_mask)?.popcount();
    let mask = if phase_masks.is_empty() {
        task_mask
    } else {
        merge_phase_masks(&phase_masks)?
    };
    ledger.push(
        TaskRecord {
            task_id: spec.task_id,
            concept_token: spec.concept_token.clone(),
            concept_id: spec.concept_id,
            p: cfg.p,
            seed: spec.seed,
            mask: mask.clone(),
            theta_old_hash: model.store.content_hash(),
        },
        &model.store.values,
    )?;
    Ok(TaskOutcome {
        mask,
        phase_masks,
        mask_trace,
        steps,
        final_loss,
        final_item,
        final_m_reg: m_reg,
        overlap_with_history,
        batch_trace,
    })
}
