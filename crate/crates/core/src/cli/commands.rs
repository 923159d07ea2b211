use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Cli, Command, RunConfig};
use crate::composer::{compose_sample, CompositionSpec};
use crate::container::{ArtifactKind, Container};
use crate::error::{Error, Result};
use crate::gcns::TaskLedger;
use crate::harness::{
    grid_cells, learn_concept, pretrain, rescore, run_cells, score_learned, write_report, BaselineKind, Lab, LearnReport,
    Learner, MetricsRecord,
};
use crate::image::Image;
use crate::model::VarModel;
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

const CONFIG: &str = "config.json";
const PRETRAIN: &str = "pretrain.json";
const TOKENIZER: &str = "tokenizer.cpc";
const BASE: &str = "base.cpc";
const STATE: &str = "state.json";
const MODEL: &str = "model.cpc";
const LEDGER: &str = "ledger.cpc";
const ADAPTER: &str = "adapter.cpc";
const TASKS: &str = "tasks";
/// Wall-clock measurements; the only file that differs between reruns.
const TIMINGS: &str = "timings.jsonl";

/// Continual-learning progress of an experiment directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnState {
    pub seed: u64,
    pub method: BaselineKind,
    /// Concept indices in learn order.
    pub order: Vec<usize>,
    pub concepts: Vec<String>,
    /// Subject fidelity of each concept right after it was learned.
    pub learn_time: Vec<f64>,
    /// Reports with `seconds` zeroed; times go to the timings file.
    pub reports: Vec<LearnReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainRecord {
    seed: u64,
    tokenizer_hash: String,
    base_hash: String,
    tokenizer_curve: Vec<f64>,
    val_curve: Vec<(usize, f64)>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Artifact(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))
}

fn append_timing(dir: &Path, value: serde_json::Value) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join(TIMINGS))?;
    writeln!(f, "{value}")?;
    Ok(())
}

/// SHA-256 over relative paths and bytes of every file under `dir` except
/// the timings file, in sorted path order.
pub fn dir_content_hash(dir: &Path) -> Result<String> {
    fn collect(root: &Path, at: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(at)? {
            let p = entry?.path();
            if p.is_dir() {
                collect(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != TIMINGS) {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort();
    let mut all = Vec::new();
    for f in files {
        all.extend(f.to_string_lossy().as_bytes());
        all.push(0);
        let bytes = fs::read(dir.join(&f))?;
        all.extend(rng::sha256_hex(&bytes).as_bytes());
    }
    Ok(rng::sha256_hex(&all))
}

/// Commands after `pretrain` inherit the directory's lab and seed unless
/// given a config, which must then agree with it.
fn effective_config(cli: &Cli, cfg: &RunConfig, dir: &Path) -> Result<RunConfig> {
    let path = dir.join(CONFIG);
    if matches!(cli.command, Command::Pretrain { .. }) || !path.exists() {
        return Ok(cfg.clone());
    }
    let snap: RunConfig = read_json(&path)?;
    let explicit = cli.common.config.is_some() || cli.common.preset.is_some();
    if explicit && snap.lab != cfg.lab {
        return Err(Error::State(format!("{} was pretrained under a different lab config", dir.display())));
    }
    if cli.common.seed.is_some_and(|s| s != snap.seed) {
        return Err(Error::State(format!("{} was pretrained with seed {}", dir.display(), snap.seed)));
    }
    Ok(RunConfig {
        lab: snap.lab,
        seed: snap.seed,
        preset: snap.preset,
        ..cfg.clone()
    })
}

pub(super) fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let dir = &cli.common.out;
    fs::create_dir_all(dir)?;
    let cfg = effective_config(cli, cfg, dir)?;
    match &cli.command {
        Command::Pretrain { .. } => cmd_pretrain(&cfg, dir),
        Command::Learn { concept, .. } => cmd_learn(&cfg, dir, concept),
        Command::Generate { .. } => cmd_generate(&cfg, dir),
        Command::Compose { spec } => cmd_compose(&cfg, dir, spec, cli.common.seed),
        Command::Eval => cmd_eval(&cfg, dir),
        Command::Ablate { .. } => cmd_ablate(&cfg, dir),
    }
}

fn cmd_pretrain(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let p = pretrain(&cfg.lab.pretrain, cfg.seed)?;
    // learner state belongs to the previous base model
    for f in [STATE, MODEL, LEDGER, ADAPTER, TIMINGS] {
        let _ = fs::remove_file(dir.join(f));
    }
    let _ = fs::remove_dir_all(dir.join(TASKS));
    write_json(&dir.join(CONFIG), cfg)?;
    let tokenizer_hash = p.tokenizer.save(&dir.join(TOKENIZER), cfg.seed)?;
    let base_hash = p.model.save(&dir.join(BASE), cfg.seed)?;
    let (first, last) = (p.val_curve[0], *p.val_curve.last().expect("step 0 is logged"));
    println!("tokenizer {tokenizer_hash}");
    println!("base model {base_hash}");
    println!("validation nll {:.4} at step {} -> {:.4} at step {}", first.1, first.0, last.1, last.0);
    write_json(
        &dir.join(PRETRAIN),
        &PretrainRecord {
            seed: cfg.seed,
            tokenizer_hash,
            base_hash,
            tokenizer_curve: p.tokenizer_curve,
            val_curve: p.val_curve,
        },
    )
}

fn load_lab(cfg: &RunConfig, dir: &Path) -> Result<Lab> {
    let record: PretrainRecord = read_json(&dir.join(PRETRAIN))?;
    let tokenizer = Tokenizer::load(&dir.join(TOKENIZER))?;
    let base = VarModel::load(&dir.join(BASE))?;
    Lab::from_parts(&cfg.lab, cfg.seed, tokenizer, base, record.val_curve)
}

fn adapter_seed(cfg: &RunConfig) -> u64 {
    rng::stream_seed(cfg.seed, "adapter")
}

fn load_learner(cfg: &RunConfig, lab: &Lab, dir: &Path, state: &LearnState) -> Result<Learner> {
    if state.order.is_empty() {
        return Learner::new(state.method, &lab.base, &lab.cfg.baselines, adapter_seed(cfg));
    }
    let adapter = if state.method == BaselineKind::LowrankAdapter {
        let c = Container::read(&dir.join(ADAPTER), ArtifactKind::Adapter)?;
        Some(c.array("values")?.data().to_vec())
    } else {
        None
    };
    Learner::resume(
        state.method,
        &lab.base,
        &lab.cfg.baselines,
        adapter_seed(cfg),
        VarModel::load(&dir.join(MODEL))?,
        TaskLedger::load(&dir.join(LEDGER))?,
        adapter,
        state.order.len(),
    )
}

fn load_state(cfg: &RunConfig, dir: &Path) -> Result<Option<LearnState>> {
    let path = dir.join(STATE);
    if !path.exists() {
        return Ok(None);
    }
    let s: LearnState = read_json(&path)?;
    if s.seed != cfg.seed {
        return Err(Error::State(format!("{} belongs to seed {}", path.display(), s.seed)));
    }
    Ok(Some(s))
}

/// Current inference model: the base until something was learned.
fn current_model(cfg: &RunConfig, lab: &Lab, dir: &Path) -> Result<(VarModel, Option<LearnState>, f64)> {
    match load_state(cfg, dir)? {
        Some(state) => {
            let (m, fusion) = load_learner(cfg, lab, dir, &state)?.inference_model()?;
            Ok((m, Some(state), fusion))
        }
        None => Ok((lab.base.clone(), None, 0.0)),
    }
}

fn cmd_learn(cfg: &RunConfig, dir: &Path, concept: &str) -> Result<()> {
    let lab = load_lab(cfg, dir)?;
    let name = concept.trim_start_matches('<').trim_end_matches('>');
    let k = lab
        .concepts
        .iter()
        .position(|c| c.name == name)
        .ok_or_else(|| Error::UnknownToken(format!("<{name}>")))?;
    let mut state = load_state(cfg, dir)?.unwrap_or(LearnState {
        seed: cfg.seed,
        method: cfg.method,
        order: Vec::new(),
        concepts: Vec::new(),
        learn_time: Vec::new(),
        reports: Vec::new(),
    });
    if state.method != cfg.method {
        return Err(Error::State(format!("{} is learning with {}, not {}", dir.display(), state.method, cfg.method)));
    }
    if state.order.contains(&k) {
        return Err(Error::State(format!("concept `<{name}>` was already learned")));
    }
    let mut learner = load_learner(cfg, &lab, dir, &state)?;
    let t = state.order.len();
    let mut report = learn_concept(&lab, &mut learner, t, k, None)?;
    let (model, fusion) = learner.inference_model()?;
    state.order.push(k);
    state.concepts.push(name.to_string());
    let scores = score_learned(&lab, &model, &state.order, &mut state.learn_time)?;

    learner.model.save(&dir.join(MODEL), cfg.seed)?;
    learner.ledger.save(&dir.join(LEDGER), cfg.seed)?;
    if let Some(a) = &learner.adapter {
        let mut c = Container::new(ArtifactKind::Adapter, cfg.seed);
        c.push_array("values", Tensor::from_vec(a.values.clone()));
        c.write(&dir.join(ADAPTER))?;
    }
    fs::create_dir_all(dir.join(TASKS))?;
    model.save(&dir.join(TASKS).join(format!("task{}.cpc", t + 1)), cfg.seed)?;
    append_timing(
        dir,
        json!({"seed": cfg.seed, "command": "learn", "task": t + 1, "seconds": report.seconds, "fusion_seconds": fusion}),
    )?;
    report.seconds = 0.0;
    println!(
        "task {} <{name}> with {}: mask popcount {}, overlap with history {}, final loss {:.6}, fidelity {:.4}",
        t + 1,
        state.method,
        report.mask_popcount.map_or("n/a".into(), |v| v.to_string()),
        report.overlap_with_history.map_or("n/a".into(), |v| v.to_string()),
        report.final_loss,
        scores.last().expect("new concept scored").subject_fidelity,
    );
    state.reports.push(report);
    write_json(&dir.join(CONFIG), cfg)?;
    write_json(&dir.join(STATE), &state)
}

fn cmd_generate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let lab = load_lab(cfg, dir)?;
    let (model, _, _) = current_model(cfg, &lab, dir)?;
    let prompt = model.prompt(&cfg.prompt)?;
    let out = dir.join("generate");
    fs::create_dir_all(&out)?;
    let mut images = Vec::new();
    let mut samples = Vec::new();
    for i in 0..cfg.images {
        let seed = rng::stream_seed(cfg.seed, &format!("sample{i}"));
        let pyr = model.sample(&prompt, &lab.cfg.sample, seed)?;
        let img = lab.tokenizer.detokenize(&pyr)?.clamped();
        img.write_png(&out.join(format!("{i}.png")), cfg.seed)?;
        samples.push(json!({"seed": seed, "tokens": pyr.flat()}));
        images.push(img);
    }
    Image::grid(&images, images.len().min(4))?.write_png(&out.join("grid.png"), cfg.seed)?;
    write_json(
        &out.join("samples.json"),
        &json!({"seed": cfg.seed, "prompt": cfg.prompt, "samples": samples}),
    )?;
    println!("{} images for `{}` in {}", cfg.images, cfg.prompt, out.display());
    Ok(())
}

fn cmd_compose(cfg: &RunConfig, dir: &Path, spec_path: &Path, seed: Option<u64>) -> Result<()> {
    let lab = load_lab(cfg, dir)?;
    let (model, _, _) = current_model(cfg, &lab, dir)?;
    let mut spec = CompositionSpec::load(spec_path)?;
    let root = seed.unwrap_or(spec.seed);
    // the same per-image stream as `generate`, so a branchless spec
    // reproduces its first image
    spec.seed = rng::stream_seed(root, "sample0");
    let outcome = compose_sample(&model, &spec, &lab.cfg.sample)?;
    let img = lab.tokenizer.detokenize(&outcome.pyramid)?.clamped();
    let out = dir.join("compose");
    fs::create_dir_all(&out)?;
    img.write_png(&out.join("image.png"), root)?;
    write_json(
        &out.join("masks.json"),
        &json!({
            "seed": root,
            "spec": spec,
            "intervened": outcome.intervened,
            "masks": outcome.mask_records(),
            "tokens": outcome.pyramid.flat(),
        }),
    )?;
    println!("composed {} branches into {}", spec.branches.len(), out.join("image.png").display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let lab = load_lab(cfg, dir)?;
    let (model, state, fusion) = current_model(cfg, &lab, dir)?;
    let state = state.ok_or_else(|| Error::State(format!("nothing learned in {}", dir.display())))?;
    let start = std::time::Instant::now();
    let scores = rescore(&lab, &model, &state.order, &state.learn_time)?;
    let learner = load_learner(cfg, &lab, dir, &state)?;
    let record = MetricsRecord {
        method: state.method,
        sequence: "cli".into(),
        seed: cfg.seed,
        after_task: state.order.len(),
        learned: state.concepts.last().expect("non-empty").clone(),
        scores,
        storage_bytes: learner.bytes_per_concept() * state.order.len(),
        model_hash: model.store.content_hash(),
        fusion_seconds: 0.0,
        seconds: 0.0,
    };
    append_timing(
        dir,
        json!({"seed": cfg.seed, "command": "eval", "seconds": start.elapsed().as_secs_f64(), "fusion_seconds": fusion}),
    )?;
    for s in &record.scores {
        println!(
            "{}: subject {:.4}, prompt {:.4}, forgetting {:+.4}",
            s.concept, s.subject_fidelity, s.prompt_fidelity, s.forgetting_delta
        );
    }
    let mut line = serde_json::to_string(&record)?;
    line.push('\n');
    fs::write(dir.join("metrics.jsonl"), line)?;
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let lab = if dir.join(PRETRAIN).exists() {
        load_lab(cfg, dir)?
    } else {
        write_json(&dir.join(CONFIG), cfg)?;
        Lab::build(&cfg.lab, cfg.seed)?
    };
    let cells = grid_cells(cfg.grid, lab.concepts.len());
    let results = run_cells(&lab, &cells, dir, cfg.jobs)?;
    write_report(dir, &lab, &results)?;
    println!("{} cells, report in {}", results.len(), dir.join("report.md").display());
    Ok(())
}
