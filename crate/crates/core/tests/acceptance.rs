//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Criteria 9 to 12 train real labs and take minutes.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;

use cpcvar::composer::{
    blend_logits, compose_sample, merge_logits, BoxRegion, BranchSpec, CompositionSpec, OverlapMode, ScaleMask,
};
use cpcvar::gcns::{conflict_reg_loss, select_mask, train_task, ConceptMask, GcnsConfig, TaskLedger, TaskSpec};
use cpcvar::harness::{
    grid_cells, intervention_comparison, resource_report, run_cells, run_sequence, write_report, BaselineKind,
    CellSpec, Components, Grid, Lab, LabConfig, SequenceResult, TaskSequence, INTERVENTION_SAMPLES,
};
use cpcvar::model::{
    base_words, nll, weighted_nll, Group, LogitsPyramid, SampleConfig, ScaleWeights, TeacherItem, VarConfig, VarModel,
};
use cpcvar::optim::OptimizerKind;
use cpcvar::rng::seeded;
use cpcvar::tensor::{finite_diff_gradient, Tape, Tensor};
use cpcvar::tokenizer::{
    decode_grid, multiscale_quantize, reconstruct, upsample_grid, Codebook, FeatureMap, ScaleSchedule, TokenPyramid,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Codebook whose row 0 is the zero vector.
fn codebook(size: usize, dim: usize, seed: u64) -> Codebook {
    let mut r = seeded(seed);
    let mut data = vec![0.0; dim];
    data.extend((0..(size - 1) * dim).map(|_| r.random_range(-1.0..1.0)));
    Codebook::new(Tensor::new(vec![size, dim], data).unwrap(), true).unwrap()
}

fn small_config(schedule: Vec<(usize, usize)>) -> VarConfig {
    VarConfig {
        schedule: ScaleSchedule::new(schedule).unwrap(),
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        ffn_hidden: 16,
        vocab: 5,
        code_dim: 2,
        max_concepts: 3,
        max_prompt_len: 4,
    }
}

fn model_of(cfg: VarConfig, seed: u64) -> VarModel {
    let cb = codebook(cfg.vocab, cfg.code_dim, seed ^ 0x5eed);
    VarModel::init(cfg, cb, seed).unwrap()
}

fn random_pyramid(sched: &ScaleSchedule, vocab: usize, r: &mut impl Rng) -> TokenPyramid {
    let mut p = TokenPyramid::empty(sched.finest());
    for &s in sched.scales() {
        p.push(s, (0..s.0 * s.1).map(|_| r.random_range(0..vocab)).collect()).unwrap();
    }
    p
}

fn random_prompt_text(r: &mut impl Rng, words: usize) -> String {
    let base = base_words();
    (0..words).map(|_| *base.choose(r).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Log-softmax of one row, written independently of the library.
fn log_prob(row: &[f64], target: usize) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row[target] - m - z.ln()
}

fn sub_pyramids(l: &LogitsPyramid, p: &TokenPyramid, range: std::ops::Range<usize>) -> (LogitsPyramid, TokenPyramid) {
    (
        LogitsPyramid {
            scales: l.scales[range.clone()].to_vec(),
            logits: l.logits[range.clone()].to_vec(),
        },
        TokenPyramid {
            resolution: p.resolution,
            scales: p.scales[range.clone()].to_vec(),
            grids: p.grids[range].to_vec(),
        },
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

fn c1_autodiff() -> Outcome {
    let start = Instant::now();
    let mut r = seeded(101);
    let schedules = [
        vec![(1, 1)],
        vec![(1, 1), (2, 2)],
        vec![(1, 1), (1, 2), (2, 2)],
        vec![(1, 1), (2, 2), (3, 3)],
    ];
    let mut worst: f64 = 0.0;
    let mut max_params = 0;
    for trial in 0..10u64 {
        let cfg = loop {
            let d_model = *[2usize, 4].choose(&mut r).unwrap();
            let cfg = VarConfig {
                schedule: ScaleSchedule::new(schedules.choose(&mut r).unwrap().clone()).unwrap(),
                d_model,
                n_heads: if d_model == 4 && r.random_bool(0.5) { 2 } else { 1 },
                n_layers: r.random_range(1..=2),
                ffn_hidden: *[2usize, 4, 8].choose(&mut r).unwrap(),
                vocab: r.random_range(3..=5),
                code_dim: r.random_range(1..=3),
                max_concepts: 1,
                max_prompt_len: r.random_range(2..=3),
            };
            if cfg.param_count() <= 500 {
                break cfg;
            }
        };
        max_params = max_params.max(cfg.param_count());
        let n_scales = cfg.schedule.len();
        let mut m = model_of(cfg, 200 + trial);
        m.register_concept("c1", "circle").map_err(e2s)?;
        let prompt = if r.random_bool(0.5) { "a <c1>".to_string() } else { random_prompt_text(&mut r, 2) };
        let pyr = random_pyramid(&m.config.schedule, m.config.vocab, &mut r);
        let item = m.prepare(m.prompt(&prompt).map_err(e2s)?, pyr).map_err(e2s)?;
        let w = ScaleWeights::new((0..n_scales).map(|_| r.random_range(0.25..1.5)).collect()).map_err(e2s)?;

        let mut tape = Tape::new();
        let pv = m.store.vars(&mut tape, true);
        let loss = m.weighted_loss_on_tape(&mut tape, &pv, &item, &w).map_err(e2s)?;
        tape.backward(loss).map_err(e2s)?;
        let analytic = m.store.flat_grad(&tape, &pv);
        let numeric = finite_diff_gradient(
            |theta| {
                let mut mm = m.clone();
                mm.store.values.copy_from_slice(theta);
                let mut t = Tape::new();
                let pv = mm.store.vars(&mut t, false);
                let l = mm.weighted_loss_on_tape(&mut t, &pv, &item, &w)?;
                Ok(t.value(l).item())
            },
            &m.store.values,
            1e-5,
        )
        .map_err(e2s)?;
        let err = rel_err(&analytic, &numeric);
        ensure(err < 1e-4, || format!("config {trial}: max relative error {err:e}"))?;
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("10 configs (<= {max_params} params), max rel err {worst:.2e}, {secs:.1} s"))
}

fn c2_factorization() -> Outcome {
    let mut r = seeded(202);
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let sched = if i % 2 == 0 { vec![(1, 1), (2, 2), (3, 3)] } else { vec![(1, 1), (2, 2), (3, 3), (4, 4)] };
        let m = model_of(small_config(sched), 300 + i);
        let p = m.prompt(&random_prompt_text(&mut r, 3)).map_err(e2s)?;
        let pyr = random_pyramid(&m.config.schedule, m.config.vocab, &mut r);
        let joint = -nll(&m.forward_teacher_forced(&p, &pyr).map_err(e2s)?, &pyr).map_err(e2s)?;
        let mut sum = 0.0;
        for s in 0..pyr.len() {
            // conditional of scale s sees only the grids before it
            let l = m.forward_prefix(&p, &pyr, s + 1).map_err(e2s)?;
            for (cell, &t) in pyr.grids[s].iter().enumerate() {
                sum += log_prob(l.logits[s].row(cell), t);
            }
        }
        let d = (joint - sum).abs();
        ensure(d < 1e-9, || format!("input {i}: joint {joint} vs per-scale sum {sum}"))?;
        worst = worst.max(d);
    }
    Ok(format!("20 inputs, max |joint - sum| {worst:.1e}"))
}

fn c3_weighted_nll() -> Outcome {
    let mut r = seeded(303);
    let sched = ScaleSchedule::desk_default();
    let n = sched.len();
    let w = ScaleWeights::fine_scaled(n, 0.5);
    // the two finest desk scales carry the reduced weight
    ensure(w.0 == vec![1.0, 1.0, 1.0, 1.0, 0.5, 0.5], || format!("fine-scaled weights {:?}", w.0))?;
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let m = model_of(small_config(sched.scales().to_vec()), 400 + i);
        let p = m.prompt(&random_prompt_text(&mut r, 3)).map_err(e2s)?;
        let pyr = random_pyramid(&sched, m.config.vocab, &mut r);
        let l = m.forward_teacher_forced(&p, &pyr).map_err(e2s)?;
        let plain = nll(&l, &pyr).map_err(e2s)?;
        let ones = weighted_nll(&l, &pyr, &ScaleWeights::ones(n)).map_err(e2s)?;
        ensure(ones.to_bits() == plain.to_bits(), || format!("input {i}: ones {ones:e} vs nll {plain:e}"))?;

        let (lc, pc) = sub_pyramids(&l, &pyr, 0..4);
        let (lf, pf) = sub_pyramids(&l, &pyr, 4..n);
        let split = nll(&lc, &pc).map_err(e2s)? + 0.5 * nll(&lf, &pf).map_err(e2s)?;
        let weighted = weighted_nll(&l, &pyr, &w).map_err(e2s)?;
        let d = (weighted - split).abs();
        ensure(d < 1e-12, || format!("input {i}: weighted {weighted} vs split {split}"))?;

        let mut oracle = 0.0;
        for (s, g) in pyr.grids.iter().enumerate() {
            let ws = if s >= 4 { 0.5 } else { 1.0 };
            for (cell, &t) in g.iter().enumerate() {
                oracle -= ws * log_prob(l.logits[s].row(cell), t);
            }
        }
        ensure((weighted - oracle).abs() < 1e-9, || format!("input {i}: weighted {weighted} vs oracle {oracle}"))?;
        worst = worst.max(d);
    }
    Ok(format!("20 inputs bit-identical at w=1, split max diff {worst:.1e}"))
}

fn toy_items(m: &mut VarModel, name: &str, class: &str, r: &mut impl Rng) -> (usize, Vec<TeacherItem>) {
    let id = m.register_concept(name, class).unwrap();
    let prompt = m.prompt(&format!("a <{name}>")).unwrap();
    let items = (0..3)
        .map(|_| {
            let p = random_pyramid(&m.config.schedule, m.config.vocab, r);
            m.prepare(prompt.clone(), p).unwrap()
        })
        .collect();
    (id, items)
}

fn toy_gcns(m: &VarModel, iterations: usize, refresh: usize, optimizer: OptimizerKind) -> GcnsConfig {
    GcnsConfig {
        p: 10.0,
        refresh_interval: refresh,
        iterations,
        lambda: 1.0,
        lr_embedding: 1e-2,
        lr_neuron: 1e-2,
        lr_scale: 1.0,
        weights: ScaleWeights::fine_scaled(m.config.schedule.len(), 0.5),
        optimizer,
        regularize: true,
        dynamic_refresh: true,
    }
}

fn c4_mask_algebra() -> Outcome {
    let mut r = seeded(404);
    let desk = model_of(VarConfig::desk_default(), 1);
    let d_desk = desk.store.ca_indices().len();
    for d in [d_desk, 37, 1000, 1] {
        for p in [5usize, 10, 40, 100] {
            // integer magnitudes force ties at the threshold
            let g: Vec<f64> = (0..d).map(|_| r.random_range(-20i32..20) as f64).collect();
            let m = select_mask(&g, p as f64, 1, None).map_err(e2s)?;
            let k = (p * d).div_ceil(100);
            ensure(m.popcount() == k, || format!("D={d} p={p}: {} bits, want {k}", m.popcount()))?;
            let sel_min = m.ones().map(|i| g[i].abs()).fold(f64::INFINITY, f64::min);
            let rest_max = (0..d).filter(|&i| !m.get(i)).map(|i| g[i].abs()).fold(0.0, f64::max);
            ensure(sel_min >= rest_max, || format!("D={d} p={p}: selected |g| {sel_min} below unselected {rest_max}"))?;
        }
    }

    let mut m = model_of(small_config(vec![(1, 1), (2, 2)]), 405);
    let d = m.store.ca_indices().len();
    let mut ledger = TaskLedger::new(d, &m.store.values);
    let mut phases = 0;
    for t in 0..2 {
        let (id, items) = toy_items(&mut m, &format!("c{}", t + 1), "circle", &mut r);
        let cfg = toy_gcns(&m, 300, 50, OptimizerKind::Sgd);
        let spec = TaskSpec {
            task_id: t + 1,
            concept_token: format!("c{}", t + 1),
            concept_id: id,
            seed: 7 + t as u64,
        };
        let out = train_task(&mut m, &mut ledger, &spec, &items, &cfg).map_err(e2s)?;
        ensure(out.phase_masks.len() == 6 && out.mask_trace.len() == 6, || {
            format!("task {}: {} phases, {} trace entries", t + 1, out.phase_masks.len(), out.mask_trace.len())
        })?;
        let mut acc = ConceptMask::zeros(d, t + 1, None);
        for (k, pm) in out.phase_masks.iter().enumerate() {
            acc.or_assign(pm).map_err(e2s)?;
            ensure(acc.to_bytes() == out.mask_trace[k].to_bytes(), || format!("task {}: trace {k} is not the running OR", t + 1))?;
            ensure(pm.popcount() == (10 * d).div_ceil(100), || format!("phase {k}: {} bits", pm.popcount()))?;
            ensure(pm.is_subset_of(&out.mask), || format!("phase {k} not inside the task mask"))?;
        }
        for w in out.mask_trace.windows(2) {
            ensure(w[0].is_subset_of(&w[1]), || format!("task {}: merged mask shrank", t + 1))?;
        }
        ensure(acc.to_bytes() == out.mask.to_bytes(), || format!("task {}: task mask differs from OR of phases", t + 1))?;
        phases += out.phase_masks.len();
    }
    Ok(format!("cardinality exact at D_CA={d_desk} and 3 other sizes, {phases} phases monotone over 2 tasks"))
}

fn c5_reg_locality() -> Outcome {
    let mut r = seeded(505);
    let mut checked = 0;
    for trial in 0..20 {
        let n = r.random_range(8..40);
        let theta: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let old: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let pick = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> { (0..n).filter(|_| r.random_bool(0.4)).collect() };
        let hist = ConceptMask::from_indices(n, 1, None, &pick(&mut r));
        let cur = ConceptMask::from_indices(n, 2, None, &pick(&mut r));
        let m_reg = hist.and(&cur).map_err(e2s)?;
        let lambda = r.random_range(0.1..5.0);
        let g = finite_diff_gradient(|t| Ok(conflict_reg_loss(t, &old, &m_reg, lambda)), &theta, 1e-5).map_err(e2s)?;
        for j in 0..n {
            if m_reg.get(j) {
                let want = 2.0 * lambda * (theta[j] - old[j]);
                ensure((g[j] - want).abs() < 1e-6, || format!("trial {trial}: coordinate {j} gradient {} vs {want}", g[j]))?;
            } else {
                ensure(g[j] == 0.0, || format!("trial {trial}: off-mask coordinate {j} has gradient {:e}", g[j]))?;
                checked += 1;
            }
        }
        // a current mask disjoint from history leaves nothing to pull
        let rest: Vec<usize> = (0..n).filter(|&i| !hist.get(i)).collect();
        let disjoint = ConceptMask::from_indices(n, 2, None, &rest);
        let empty = hist.and(&disjoint).map_err(e2s)?;
        let loss = conflict_reg_loss(&theta, &old, &empty, lambda);
        ensure(loss == 0.0, || format!("trial {trial}: disjoint masks give loss {loss:e}"))?;
    }
    Ok(format!("20 trials, {checked} off-mask coordinates exactly 0, disjoint loss 0"))
}

fn changed(before: &[f64], after: &[f64]) -> Vec<usize> {
    (0..before.len()).filter(|&i| before[i].to_bits() != after[i].to_bits()).collect()
}

fn c6_freezing() -> Outcome {
    let mut r = seeded(606);
    let mut moved_total = 0;
    let mut tasks = 0;
    for (run, optimizer) in [OptimizerKind::Sgd, OptimizerKind::adamw(), OptimizerKind::Sgd].into_iter().enumerate() {
        let mut m = model_of(small_config(vec![(1, 1), (2, 2), (3, 3)]), 600 + run as u64);
        let ca = m.store.ca_indices();
        let mut ledger = TaskLedger::new(ca.len(), &m.store.values);
        let non_ca: Vec<usize> = [Group::FeedForward, Group::SelfAttention, Group::Head, Group::Norm]
            .iter()
            .flat_map(|g| m.store.group_indices(*g))
            .collect();
        let frozen_hash = m.store.hash_of(&non_ca);
        let classes = ["circle", "circle", "square"];
        for t in 0..3 {
            let name = format!("c{}", t + 1);
            let (id, items) = toy_items(&mut m, &name, classes[t], &mut r);
            let cfg = toy_gcns(&m, 20, 5, optimizer);
            let spec = TaskSpec {
                task_id: t + 1,
                concept_token: name,
                concept_id: id,
                seed: 60 + t as u64,
            };
            let before = m.store.values.clone();
            let out = train_task(&mut m, &mut ledger, &spec, &items, &cfg).map_err(e2s)?;
            let mut allowed = ConceptMask::zeros(ca.len(), t + 1, None);
            for pm in &out.phase_masks {
                allowed.or_assign(pm).map_err(e2s)?;
            }
            let rows = m.embedding_row_indices(id).map_err(e2s)?;
            let moved = changed(&before, &m.store.values);
            for &j in &moved {
                let in_mask = ca.binary_search(&j).map(|k| allowed.get(k)).unwrap_or(false);
                ensure(in_mask || rows.contains(&j), || format!("run {run} task {}: parameter {j} moved outside the update set", t + 1))?;
            }
            ensure(m.store.hash_of(&non_ca) == frozen_hash, || format!("run {run} task {}: non-CA weights changed", t + 1))?;
            moved_total += moved.len();
            tasks += 1;
        }
    }
    ensure(moved_total > 0, || "no parameter moved at all".into())?;
    Ok(format!("{tasks} tasks (SGD and AdamW), {moved_total} moved coordinates all inside masks or concept rows"))
}

fn c7_refinement() -> Outcome {
    let full = ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4), (8, 8)]).unwrap();
    let mut drops = 0.0;
    for seed in 0..20u64 {
        let mut r = seeded(700 + seed);
        let f = FeatureMap {
            height: 8,
            width: 8,
            channels: 4,
            values: (0..8 * 8 * 4).map(|_| r.random_range(-1.0..1.0)).collect(),
        };
        let cb = codebook(12, 4, 800 + seed);
        let p = multiscale_quantize(&f, &cb, &full).map_err(e2s)?;
        let mut last = f64::INFINITY;
        for n in 0..=full.len() {
            let prefix = TokenPyramid {
                resolution: p.resolution,
                scales: p.scales[..n].to_vec(),
                grids: p.grids[..n].to_vec(),
            };
            let mse = reconstruct(&prefix, &cb).map_err(e2s)?.mse(&f);
            ensure(mse <= last, || format!("seed {seed}: prefix {n} mse {mse} > {last}"))?;
            if n == 0 {
                drops -= mse;
            }
            if n == full.len() {
                drops += mse;
            }
            last = mse;
        }
    }
    let cb = codebook(9, 3, 31);
    let sched = ScaleSchedule::new(vec![(1, 1), (3, 3), (6, 6)]).unwrap();
    let f = upsample_grid(&decode_grid(&[5], (1, 1), &cb).map_err(e2s)?, (6, 6));
    let p = multiscale_quantize(&f, &cb, &sched).map_err(e2s)?;
    let mse = reconstruct(&p, &cb).map_err(e2s)?.mse(&f);
    ensure(mse == 0.0, || format!("exact-recovery fixture mse {mse:e}"))?;
    Ok(format!("20 seeds monotone (mean total drop {:.3}), fixture mse 0", -drops / 20.0))
}

fn random_logits(rows: usize, v: usize, r: &mut impl Rng) -> Tensor {
    Tensor::new(vec![rows, v], (0..rows * v).map(|_| r.random_range(-4.0..4.0)).collect()).unwrap()
}

fn c8_composer() -> Outcome {
    let mut r = seeded(808);
    // (a) and (b)
    for _ in 0..20 {
        let rows = r.random_range(1..40);
        let v = r.random_range(2..9);
        let (lg, li) = (random_logits(rows, v, &mut r), random_logits(rows, v, &mut r));
        ensure(bits(&blend_logits(&lg, &li, 0.0).map_err(e2s)?) == bits(&li), || "alpha 0 blend is not the local logits".into())?;
        let alpha = r.random_range(0.0..1.0);
        let side = (rows as f64).sqrt().ceil() as usize;
        let scale = (side, side);
        let (lg2, lb2) = (random_logits(side * side, v, &mut r), random_logits(side * side, v, &mut r));
        let blended2 = blend_logits(&lg2, &lb2, alpha).map_err(e2s)?;
        let mask = ScaleMask::build(&[BoxRegion::full()], scale, OverlapMode::Strict).map_err(e2s)?;
        let merged = merge_logits(&lg2, std::slice::from_ref(&blended2), &mask, OverlapMode::Strict).map_err(e2s)?;
        ensure(bits(&merged) == bits(&blended2), || "full-box merge differs from the blended branch".into())?;
    }

    // (c)
    let mut model = model_of(small_config(vec![(1, 1), (2, 2), (3, 3)]), 809);
    model.register_concept("c1", "circle").map_err(e2s)?;
    model.register_concept("c2", "square").map_err(e2s)?;
    let global = "a red circle";
    let gp = model.prompt(global).map_err(e2s)?;
    let two = |seed: u64| {
        let mut s = CompositionSpec::new(
            global,
            vec![
                BranchSpec {
                    prompt: "a <c1>".into(),
                    region: BoxRegion::new(0.0, 0.0, 0.5, 1.0).unwrap(),
                },
                BranchSpec {
                    prompt: "a <c2>".into(),
                    region: BoxRegion::new(0.5, 0.0, 1.0, 1.0).unwrap(),
                },
            ],
        );
        s.seed = seed;
        s.s_start = 2;
        s
    };
    let mut cases = 0;
    for cfg in [SampleConfig::default(), SampleConfig { temperature: 0.8, top_k: Some(3) }] {
        for seed in 0..5u64 {
            let plain = model.sample(&gp, &cfg, seed).map_err(e2s)?;
            let mut none = two(seed);
            none.branches.clear();
            let mut late = two(seed);
            late.s_start = 4;
            let mut alpha_one = two(seed);
            alpha_one.alpha = 1.0;
            let mut same_prompt = two(seed);
            same_prompt.alpha = 0.4;
            for b in &mut same_prompt.branches {
                b.prompt = global.into();
            }
            for (label, spec) in [("no branch", none), ("s_start past S", late), ("alpha 1", alpha_one), ("global prompt branches", same_prompt)] {
                let out = compose_sample(&model, &spec, &cfg).map_err(e2s)?;
                ensure(out.pyramid == plain, || format!("{label}, seed {seed}: tokens differ from plain sampling"))?;
                cases += 1;
            }
        }
    }

    // (d)
    let mut cells = 0;
    for _ in 0..30 {
        let b = r.random_range(1..=3);
        let mut cuts: Vec<f64> = (0..b - 1).map(|_| r.random_range(0.1..0.9)).collect();
        cuts.sort_by(f64::total_cmp);
        let mut edges = vec![0.0];
        edges.extend(cuts);
        edges.push(1.0);
        let (y0, y1) = (r.random_range(0.0..0.3), r.random_range(0.7..1.0));
        let boxes: Vec<BoxRegion> = edges.windows(2).filter_map(|w| BoxRegion::new(w[0], y0, w[1], y1).ok()).collect();
        let side = r.random_range(4..9);
        let scale = (side, side);
        let Ok(mask) = ScaleMask::build(&boxes, scale, OverlapMode::Strict) else { continue };
        let v = 5;
        let lg = random_logits(side * side, v, &mut r);
        let locals: Vec<Tensor> = boxes.iter().map(|_| random_logits(side * side, v, &mut r)).collect();
        let merged = merge_logits(&lg, &locals, &mask, OverlapMode::Strict).map_err(e2s)?;
        for c in 0..side * side {
            let row: Vec<u64> = merged.row(c).iter().map(|x| x.to_bits()).collect();
            let same = |t: &Tensor| t.row(c).iter().map(|x| x.to_bits()).collect::<Vec<_>>() == row;
            let hits = std::iter::once(&lg).chain(&locals).filter(|t| same(t)).count();
            ensure(hits == 1, || format!("cell {c} matches {hits} source rows"))?;
            let owner = mask.branches.iter().position(|m| m[c]).map(|i| &locals[i]).unwrap_or(&lg);
            ensure(same(owner), || format!("cell {c} does not come from its owner"))?;
            cells += 1;
        }
    }
    Ok(format!("(a)(b) 20 draws, (c) {cases} specs token-identical, (d) {cells} cells single-source"))
}

struct LabRuns {
    seed: u64,
    gcns_task1: f64,
    finetune_task1: f64,
    full_avg: f64,
    no_reg_avg: f64,
    continuous: f64,
    single: f64,
    report_rows: usize,
    seconds_crit9: f64,
}

fn table_rows(md: &str, title: &str) -> usize {
    md.split(title)
        .nth(1)
        .map(|s| {
            s.lines()
                .skip_while(|l| !l.starts_with("|---"))
                .skip(1)
                .take_while(|l| l.starts_with('|'))
                .count()
        })
        .unwrap_or(0)
}

fn quick_lab_runs(seed: u64) -> Result<LabRuns, String> {
    let start = Instant::now();
    let cfg = LabConfig::quick();
    let lab = Lab::build(&cfg, seed).map_err(e2s)?;
    let n = lab.concepts.len();
    let seq = TaskSequence::identity(n);
    if n != 3 || !seq.has_similar_pair(&lab.concepts) {
        return Err(format!("seed {seed}: suite of {n} concepts without a similar pair"));
    }
    let first = lab.concepts[seq.order[0]].name.clone();
    let gcns = run_sequence(&lab, &seq, BaselineKind::Gcns, None).map_err(e2s)?;
    let ft = run_sequence(&lab, &seq, BaselineKind::FullFinetune, None).map_err(e2s)?;
    let seconds_crit9 = start.elapsed().as_secs_f64();

    let dir = tempfile::tempdir().map_err(e2s)?;
    let cells = run_cells(&lab, &grid_cells(Grid::Components, n), dir.path(), 1).map_err(e2s)?;
    let component = |c: Components| -> Result<&SequenceResult, String> {
        cells
            .iter()
            .find(|x| matches!(&x.spec, CellSpec::Sequence { components: Some(k), .. } if *k == c))
            .and_then(|x| x.sequence())
            .ok_or_else(|| format!("component cell {} missing", c.label()))
    };
    let full = component(Components::TABLE[4])?;
    let no_reg = component(Components::NO_REG)?;
    let md = write_report(dir.path(), &lab, &cells).map_err(e2s)?;

    let iv = intervention_comparison(&lab, INTERVENTION_SAMPLES).map_err(e2s)?;
    if iv.continuous_from != 3 || iv.single_at != cfg.pretrain.model.schedule.len() {
        return Err(format!("intervention compares From({}) with Only({})", iv.continuous_from, iv.single_at));
    }
    let out = LabRuns {
        seed,
        gcns_task1: gcns.retention(&first).ok_or("task-1 score missing")?,
        finetune_task1: ft.retention(&first).ok_or("task-1 score missing")?,
        full_avg: full.average_retention(),
        no_reg_avg: no_reg.average_retention(),
        continuous: iv.continuous,
        single: iv.single,
        report_rows: table_rows(&md, "## Components"),
        seconds_crit9,
    };
    eprintln!(
        "seed {seed}: task1 gcns {:.4} ft {:.4} | avg full {:.4} no-reg {:.4} | in-box from3 {:.4} only{} {:.4} | {:.0} s",
        out.gcns_task1,
        out.finetune_task1,
        out.full_avg,
        out.no_reg_avg,
        out.continuous,
        iv.single_at,
        out.single,
        start.elapsed().as_secs_f64()
    );
    Ok(out)
}

fn majority(runs: &[LabRuns], pred: impl Fn(&LabRuns) -> bool) -> (usize, bool) {
    let wins = runs.iter().filter(|r| pred(r)).count();
    (wins, 2 * wins > runs.len())
}

fn seed_list(runs: &[LabRuns], f: impl Fn(&LabRuns) -> String) -> String {
    runs.iter().map(|r| format!("s{}: {}", r.seed, f(r))).collect::<Vec<_>>().join(", ")
}

fn c9_forgetting(runs: &[LabRuns]) -> Outcome {
    let (wins, ok) = majority(runs, |r| r.gcns_task1 >= r.finetune_task1);
    let secs: f64 = runs.iter().map(|r| r.seconds_crit9).sum();
    let detail = format!(
        "GCNS >= full fine-tune on {wins}/{} seeds [{}], {:.0} s",
        runs.len(),
        seed_list(runs, |r| format!("{:.4} vs {:.4}", r.gcns_task1, r.finetune_task1)),
        secs
    );
    ensure(ok && secs < 1800.0, || detail.clone())?;
    Ok(detail)
}

fn c10_ablation(runs: &[LabRuns]) -> Outcome {
    let (wins, ok) = majority(runs, |r| r.no_reg_avg < r.full_avg);
    let rows: Vec<usize> = runs.iter().map(|r| r.report_rows).collect();
    let detail = format!(
        "no-reg below full on {wins}/{} seeds [{}], component table rows {rows:?}",
        runs.len(),
        seed_list(runs, |r| format!("{:.4} vs {:.4}", r.no_reg_avg, r.full_avg))
    );
    ensure(ok && rows.iter().all(|&n| n == 5), || detail.clone())?;
    Ok(detail)
}

fn c11_intervention(runs: &[LabRuns]) -> Outcome {
    let (wins, ok) = majority(runs, |r| r.continuous > r.single);
    let detail = format!(
        "continuous above finest-only on {wins}/{} seeds [{}]",
        runs.len(),
        seed_list(runs, |r| format!("{:.4} vs {:.4}", r.continuous, r.single))
    );
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

fn c12_resources() -> Outcome {
    let start = Instant::now();
    let lab = Lab::build(&LabConfig::desk(), 0).map_err(e2s)?;
    let d_ca = lab.base.store.ca_indices().len();
    let seq = TaskSequence {
        order: vec![0, 1],
        label: "resources".into(),
    };
    let gcns = run_sequence(&lab, &seq, BaselineKind::Gcns, None).map_err(e2s)?;
    let lowrank = run_sequence(&lab, &seq, BaselineKind::LowrankAdapter, None).map_err(e2s)?;
    let rows = resource_report(&[&gcns, &lowrank]);
    let (g, l) = (&rows[0], &rows[1]);
    let detail = format!(
        "D_CA {d_ca}: gcns {} mask bytes, fusion {} s; lowrank {} bytes, fusion {:.2e} s; {:.0} s",
        g.mask_bytes_per_concept,
        g.fusion_seconds,
        l.extra_bytes_per_concept,
        l.fusion_seconds,
        start.elapsed().as_secs_f64()
    );
    ensure(g.fusion_seconds == 0.0, || detail.clone())?;
    ensure(g.mask_bytes_per_concept == d_ca.div_ceil(8) && g.extra_bytes_per_concept == d_ca.div_ceil(8), || detail.clone())?;
    ensure(l.fusion_seconds > 0.0 && l.extra_bytes_per_concept > g.extra_bytes_per_concept, || detail.clone())?;
    Ok(detail)
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {tag} {name}: {detail}");
    outcome.is_ok()
}

fn main() {
    let mut ok = Vec::new();
    ok.push(report(1, "autodiff soundness", c1_autodiff));
    ok.push(report(2, "scale factorization", c2_factorization));
    ok.push(report(3, "weighted loss neutrality", c3_weighted_nll));
    ok.push(report(4, "mask algebra", c4_mask_algebra));
    ok.push(report(5, "regularization locality", c5_reg_locality));
    ok.push(report(6, "freezing contract", c6_freezing));
    ok.push(report(7, "tokenizer refinement", c7_refinement));
    ok.push(report(8, "composer identities", c8_composer));

    let runs: Result<Vec<LabRuns>, String> = catch_unwind(|| (0..3).map(quick_lab_runs).collect())
        .unwrap_or_else(|_| Err("lab run panicked".into()));
    let shared = |f: fn(&[LabRuns]) -> Outcome| {
        let runs = &runs;
        move || match runs {
            Ok(r) => f(r),
            Err(e) => Err(e.clone()),
        }
    };
    ok.push(report(9, "directional forgetting", shared(c9_forgetting)));
    ok.push(report(10, "directional ablation", shared(c10_ablation)));
    ok.push(report(11, "intervention scale", shared(c11_intervention)));
    ok.push(report(12, "resource accounting", c12_resources));

    let passed = ok.iter().filter(|&&b| b).count();
    println!("acceptance: {passed}/{} criteria passed", ok.len());
    if passed != ok.len() {
        std::process::exit(1);
    }
}
