//! Ablation grids with resumable cells, resource accounting and reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::baselines::{BaselineKind, Learner};
use super::data::{ConceptKind, TaskSequence};
use super::proxy::proxy_subject_fidelity;
use super::run::{run_sequence_with_learner, Lab, SequenceResult};
use crate::composer::{compose_sample, BoxRegion, BranchSpec, CompositionSpec, Intervention};
use crate::error::{Error, Result};
use crate::gcns::GcnsConfig;
use crate::image::Image;
use crate::model::ScaleWeights;
use crate::rng;

/// On/off switches of one component-table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub reg: bool,
    pub weight: bool,
    pub mask: bool,
}

impl Components {
    /// The five rows of the component table, all-on last.
    pub const TABLE: [Components; 5] = [
        Components { reg: false, weight: false, mask: false },
        Components { reg: true, weight: false, mask: false },
        Components { reg: true, weight: false, mask: true },
        Components { reg: true, weight: true, mask: false },
        Components { reg: true, weight: true, mask: true },
    ];

    /// Everything on except the conflict term.
    pub const NO_REG: Components = Components { reg: false, weight: true, mask: true };

    pub fn label(&self) -> String {
        let f = |b: bool| if b { "on" } else { "off" };
        format!("reg-{}_weight-{}_mask-{}", f(self.reg), f(self.weight), f(self.mask))
    }

    /// `base` with the switched-off components neutralized.
    pub fn apply(&self, base: &GcnsConfig, n_scales: usize) -> GcnsConfig {
        GcnsConfig {
            regularize: self.reg && base.regularize,
            weights: if self.weight { base.weights.clone() } else { ScaleWeights::ones(n_scales) },
            dynamic_refresh: self.mask && base.dynamic_refresh,
            ..base.clone()
        }
    }
}

/// Composed samples per concept in the intervention comparison.
pub const INTERVENTION_SAMPLES: usize = 8;

pub const LAMBDAS: [f64; 4] = [0.1, 1.0, 5.0, 20.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    Methods,
    Components,
    Lambda,
    Order,
    Intervention,
    All,
}

impl std::str::FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "methods" => Grid::Methods,
            "components" | "table6" => Grid::Components,
            "lambda" => Grid::Lambda,
            "order" => Grid::Order,
            "intervention" | "fig5" => Grid::Intervention,
            "all" => Grid::All,
            other => return Err(Error::Config(format!("unknown grid `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cell", rename_all = "snake_case")]
pub enum CellSpec {
    Sequence {
        name: String,
        method: BaselineKind,
        order: Vec<usize>,
        label: String,
        components: Option<Components>,
        lambda: Option<f64>,
    },
    Intervention {
        name: String,
    },
}

impl CellSpec {
    pub fn name(&self) -> &str {
        match self {
            CellSpec::Sequence { name, .. } | CellSpec::Intervention { name } => name,
        }
    }
}

fn sequence_cell(name: String, method: BaselineKind, order: Vec<usize>, label: &str) -> CellSpec {
    CellSpec::Sequence {
        name,
        method,
        order,
        label: label.into(),
        components: None,
        lambda: None,
    }
}

/// Cells of `grid` over a suite of `n` concepts.
pub fn grid_cells(grid: Grid, n: usize) -> Vec<CellSpec> {
    let forward: Vec<usize> = (0..n).collect();
    let mut cells = Vec::new();
    let all = grid == Grid::All;
    if all || grid == Grid::Methods {
        for m in BaselineKind::ALL {
            cells.push(sequence_cell(format!("methods-{m}"), m, forward.clone(), "forward"));
        }
    }
    if all || grid == Grid::Components {
        for c in Components::TABLE.iter().chain([&Components::NO_REG]) {
            cells.push(CellSpec::Sequence {
                name: format!("components-{}", c.label()),
                method: BaselineKind::Gcns,
                order: forward.clone(),
                label: "forward".into(),
                components: Some(*c),
                lambda: None,
            });
        }
    }
    if all || grid == Grid::Lambda {
        for l in LAMBDAS {
            cells.push(CellSpec::Sequence {
                name: format!("lambda-{l}"),
                method: BaselineKind::Gcns,
                order: forward.clone(),
                label: "forward".into(),
                components: None,
                lambda: Some(l),
            });
        }
    }
    if all || grid == Grid::Order {
        let reverse: Vec<usize> = (0..n).rev().collect();
        let rotated: Vec<usize> = (1..n).chain([0]).collect();
        for (label, order) in [("forward", forward.clone()), ("reverse", reverse), ("rotated", rotated)] {
            cells.push(sequence_cell(format!("order-{label}"), BaselineKind::Gcns, order, label));
        }
    }
    if all || grid == Grid::Intervention {
        cells.push(CellSpec::Intervention {
            name: "intervention".into(),
        });
    }
    cells
}

/// In-box fidelity of continuous versus single-scale intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub continuous_from: usize,
    pub single_at: usize,
    pub continuous: f64,
    pub single: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum CellOutcome {
    Sequence(SequenceResult),
    Intervention(InterventionResult),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: CellSpec,
    pub seed: u64,
    pub config_hash: String,
    pub outcome: CellOutcome,
}

impl CellResult {
    pub fn sequence(&self) -> Option<&SequenceResult> {
        match &self.outcome {
            CellOutcome::Sequence(s) => Some(s),
            CellOutcome::Intervention(_) => None,
        }
    }
}

/// Object concepts of `order` the intervention comparison places in a box.
fn boxed_concepts(lab: &Lab, order: &[usize]) -> Result<Vec<usize>> {
    let objects: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&k| lab.concepts[k].kind() == ConceptKind::Object)
        .take(2)
        .collect();
    if objects.is_empty() {
        return Err(Error::Config("intervention cell needs an object concept".into()));
    }
    Ok(objects)
}

/// Concept `k` inside the centred subject window of a plain scene. The box
/// matches the window subject fidelity reads, since references centre
/// their subject.
pub fn intervention_spec(lab: &Lab, k: usize) -> Result<CompositionSpec> {
    let bg = "gray";
    let f = lab.cfg.subject_window;
    let lo = (1.0 - f) / 2.0;
    let region = BoxRegion::new(lo, lo, lo + f, lo + f)?;
    let branch = BranchSpec {
        prompt: format!("a {} on {bg}", lab.concepts[k].token()),
        region,
    };
    Ok(CompositionSpec::new(&format!("a photo of {bg}"), vec![branch]))
}

/// Mean in-box subject fidelity of composed samples under `plan` over the
/// first two object concepts of `order`.
pub fn in_box_fidelity(lab: &Lab, learner: &Learner, order: &[usize], plan: Intervention, samples: usize) -> Result<f64> {
    let (model, _) = learner.inference_model()?;
    let mut total = 0.0;
    let mut n = 0.0;
    for k in boxed_concepts(lab, order)? {
        let mut spec = intervention_spec(lab, k)?;
        spec.intervention = Some(plan);
        let refs: Vec<Image> = lab.concepts[k].images.iter().map(|i| lab.subject_view(i)).collect();
        for i in 0..samples {
            spec.seed = rng::stream_seed(lab.seed, &format!("compose{}-{i}", k + 1));
            let out = compose_sample(&model, &spec, &lab.cfg.sample)?;
            let img = lab.tokenizer.detokenize(&out.pyramid)?.clamped();
            total += proxy_subject_fidelity(&lab.extractor, &[lab.subject_view(&img)], &refs)?;
            n += 1.0;
        }
    }
    Ok(total / n)
}

/// Continuous intervention from the lab's `s_start` against intervening at
/// the finest scale only, on a GCNS-trained model.
pub fn intervention_comparison(lab: &Lab, samples: usize) -> Result<InterventionResult> {
    let order: Vec<usize> = (0..lab.concepts.len()).collect();
    let seq = TaskSequence::identity(order.len());
    let (_, learner) = run_sequence_with_learner(lab, &seq, BaselineKind::Gcns, None)?;
    let s_start = CompositionSpec::new("", Vec::new()).s_start;
    let finest = lab.cfg.pretrain.model.schedule.len();
    Ok(InterventionResult {
        continuous_from: s_start,
        single_at: finest,
        continuous: in_box_fidelity(lab, &learner, &order, Intervention::From(s_start), samples)?,
        single: in_box_fidelity(lab, &learner, &order, Intervention::Only(finest), samples)?,
    })
}

pub fn run_cell(lab: &Lab, spec: &CellSpec) -> Result<CellOutcome> {
    match spec {
        CellSpec::Sequence {
            method,
            order,
            label,
            components,
            lambda,
            ..
        } => {
            let seq = TaskSequence::new(order.clone(), label, &lab.concepts)?;
            let n = lab.cfg.pretrain.model.schedule.len();
            let mut g = lab.cfg.gcns.clone();
            if let Some(c) = components {
                g = c.apply(&g, n);
            }
            if let Some(l) = lambda {
                g.lambda = *l;
            }
            let over = (components.is_some() || lambda.is_some()).then_some(&g);
            Ok(CellOutcome::Sequence(run_sequence_with_learner(lab, &seq, *method, over)?.0))
        }
        CellSpec::Intervention { .. } => Ok(CellOutcome::Intervention(intervention_comparison(lab, INTERVENTION_SAMPLES)?)),
    }
}

fn cell_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("cells").join(format!("{name}.json"))
}

/// Runs every cell of `cells`, reusing finished cells found under
/// `dir/cells` for the same seed and configuration. Up to `jobs` cells run
/// at once; each cell is single-threaded.
pub fn run_cells(lab: &Lab, cells: &[CellSpec], dir: &Path, jobs: usize) -> Result<Vec<CellResult>> {
    std::fs::create_dir_all(dir.join("cells"))?;
    let cfg_hash = lab.cfg.content_hash();
    let results: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    let work = || loop {
        let i = {
            let mut n = next.lock().expect("queue lock");
            if *n >= cells.len() {
                return;
            }
            *n += 1;
            *n - 1
        };
        let spec = &cells[i];
        let path = cell_path(dir, spec.name());
        let cached = std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str::<CellResult>(&t).ok())
            .filter(|c| c.seed == lab.seed && c.config_hash == cfg_hash && &c.spec == spec);
        let res = match cached {
            Some(c) => {
                log::info!("cell {} reused", spec.name());
                Ok(c)
            }
            None => run_cell(lab, spec).and_then(|outcome| {
                let c = CellResult {
                    spec: spec.clone(),
                    seed: lab.seed,
                    config_hash: cfg_hash.clone(),
                    outcome,
                };
                let tmp = path.with_extension("json.tmp");
                std::fs::write(&tmp, serde_json::to_string_pretty(&c)?)?;
                std::fs::rename(&tmp, &path)?;
                log::info!("cell {} done", spec.name());
                Ok(c)
            }),
        };
        results.lock().expect("result lock")[i] = Some(res);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(work);
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every cell visited"))
        .collect()
}

/// Persistent bytes and weight-composition time per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceRow {
    pub method: BaselineKind,
    pub extra_bytes_per_concept: usize,
    pub mask_bytes_per_concept: usize,
    pub fusion_seconds: f64,
}

pub fn resource_report(results: &[&SequenceResult]) -> Vec<ResourceRow> {
    let mut rows: Vec<ResourceRow> = Vec::new();
    for r in results {
        if rows.iter().any(|x| x.method == r.method) {
            continue;
        }
        rows.push(ResourceRow {
            method: r.method,
            extra_bytes_per_concept: r.bytes_per_concept,
            mask_bytes_per_concept: r.mask_bytes_per_concept,
            fusion_seconds: r.fusion_seconds,
        });
    }
    rows
}

const PROXY_NOTE: &str = "Scores are desk-scale proxies: subject fidelity is mean cosine similarity in a frozen \
random convolutional feature space, prompt fidelity is the hit rate of a border-colour background classifier. \
They are not comparable with scores from large pretrained vision encoders.";

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Markdown report plus one JSON line per metrics record.
pub fn write_report(dir: &Path, lab: &Lab, cells: &[CellResult]) -> Result<String> {
    let mut md = String::new();
    let _ = writeln!(md, "# Continual concept learning report\n\nseed: {}\n\n{PROXY_NOTE}\n", lab.seed);
    let seqs: Vec<(&CellSpec, &SequenceResult)> = cells.iter().filter_map(|c| c.sequence().map(|s| (&c.spec, s))).collect();

    let methods: Vec<&SequenceResult> = seqs
        .iter()
        .filter(|(s, _)| s.name().starts_with("methods-"))
        .map(|(_, r)| *r)
        .collect();
    if !methods.is_empty() {
        let names: Vec<String> = methods[0].last().scores.iter().map(|s| s.concept.clone()).collect();
        let _ = writeln!(md, "## Methods (final subject fidelity per concept)\n");
        let _ = writeln!(
            md,
            "| method | {} | avg retention | mean forgetting | prompt fidelity |",
            names.join(" | ")
        );
        let _ = writeln!(md, "|---|{}---|---|---|", "---|".repeat(names.len()));
        for r in &methods {
            let s = &r.last().scores;
            let pf = s.iter().map(|c| c.prompt_fidelity).sum::<f64>() / s.len() as f64;
            let cols: Vec<String> = s.iter().map(|c| fmt(c.subject_fidelity)).collect();
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                r.method,
                cols.join(" | "),
                fmt(r.average_retention()),
                fmt(r.mean_forgetting()),
                fmt(pf)
            );
        }
        let _ = writeln!(md, "\n## Resources\n\n| method | extra bytes / concept | mask bytes / concept | fusion s |\n|---|---|---|---|");
        for row in resource_report(&methods) {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:.6} |",
                row.method, row.extra_bytes_per_concept, row.mask_bytes_per_concept, row.fusion_seconds
            );
        }
        md.push('\n');
    }

    let comps: Vec<(Components, &SequenceResult)> = seqs
        .iter()
        .filter_map(|(s, r)| match s {
            CellSpec::Sequence {
                components: Some(c), ..
            } => Some((*c, *r)),
            _ => None,
        })
        .collect();
    // the component table keeps its five rows; other switch settings
    // (the no-regularization probe) get their own table
    let (rows, extra): (Vec<_>, Vec<_>) = comps.iter().partition(|(c, _)| Components::TABLE.contains(c));
    let tick = |b: bool| if b { "x" } else { "" };
    for (title, part) in [("Components", rows), ("Other component settings", extra)] {
        if part.is_empty() {
            continue;
        }
        let _ = writeln!(md, "## {title}\n\n| Reg. | Weight | Mask | avg retention | mean forgetting |\n|---|---|---|---|---|");
        for (c, r) in part {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                tick(c.reg),
                tick(c.weight),
                tick(c.mask),
                fmt(r.average_retention()),
                fmt(r.mean_forgetting())
            );
        }
        md.push('\n');
    }

    let lambdas: Vec<(f64, &SequenceResult)> = seqs
        .iter()
        .filter_map(|(s, r)| match s {
            CellSpec::Sequence { lambda: Some(l), .. } => Some((*l, *r)),
            _ => None,
        })
        .collect();
    if !lambdas.is_empty() {
        let _ = writeln!(md, "## Regularization weight\n\n| lambda | avg retention | mean forgetting |\n|---|---|---|");
        for (l, r) in &lambdas {
            let _ = writeln!(md, "| {l} | {} | {} |", fmt(r.average_retention()), fmt(r.mean_forgetting()));
        }
        md.push('\n');
    }

    let orders: Vec<&SequenceResult> = seqs
        .iter()
        .filter(|(s, _)| s.name().starts_with("order-"))
        .map(|(_, r)| *r)
        .collect();
    if !orders.is_empty() {
        let _ = writeln!(md, "## Task order\n\n| order | sequence | avg retention | mean forgetting |\n|---|---|---|---|");
        for r in &orders {
            let names: Vec<String> = r.sequence.order.iter().map(|&k| lab.concepts[k].name.clone()).collect();
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} |",
                r.sequence.label,
                names.join(" > "),
                fmt(r.average_retention()),
                fmt(r.mean_forgetting())
            );
        }
        md.push('\n');
    }

    for c in cells {
        if let CellOutcome::Intervention(iv) = &c.outcome {
            let _ = writeln!(
                md,
                "## Intervention scale\n\n| regime | in-box fidelity |\n|---|---|\n| continuous from scale {} | {} |\n| scale {} only | {} |\n",
                iv.continuous_from,
                fmt(iv.continuous),
                iv.single_at,
                fmt(iv.single)
            );
        }
    }

    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.md"), &md)?;
    let mut jl = String::new();
    for (spec, r) in &seqs {
        for rec in &r.records {
            let line = serde_json::json!({"cell": spec.name(), "record": rec});
            jl.push_str(&line.to_string());
            jl.push('\n');
        }
    }
    std::fs::write(dir.join("metrics.jsonl"), jl)?;
    Ok(md)
}
