use proptest::prelude::*;

use super::*;
use crate::model::tests::tiny_model;
use crate::tensor::Tape;

fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoxRegion {
    BoxRegion::new(x0, y0, x1, y1).unwrap()
}

fn grid(t: &Tensor) -> Vec<Vec<u64>> {
    (0..t.shape()[0]).map(|r| t.row(r).iter().map(|v| v.to_bits()).collect()).collect()
}

fn logits(rows: usize, v: usize, seed: u64) -> Tensor {
    let data = (0..rows * v).map(|i| ((i as u64 * 7919 + seed * 104_729) % 1000) as f64 / 97.0 - 5.0).collect();
    Tensor::new(vec![rows, v], data).unwrap()
}

#[test]
fn rasterize_examples() {
    for s in [(1, 1), (2, 2), (3, 5), (8, 8)] {
        assert!(rasterize_box(&BoxRegion::full(), s).iter().all(|&b| b));
    }
    assert_eq!(rasterize_box(&bx(0.0, 0.0, 0.49, 0.49), (2, 2)), vec![true, false, false, false]);
    let tiny = rasterize_box(&bx(0.51, 0.51, 0.52, 0.52), (8, 8));
    assert_eq!(tiny.iter().filter(|&&b| b).count(), 1);
    assert!(tiny[4 * 8 + 4]);
    assert!(BoxRegion::new(0.5, 0.0, 0.5, 1.0).is_err());
    assert!(BoxRegion::new(-0.1, 0.0, 0.5, 1.0).is_err());
}

proptest! {
    #[test]
    fn rasterize_matches_integer_overlap(
        a in 0u32..64, b in 0u32..64, c in 0u32..64, d in 0u32..64,
        h in 1usize..9, w in 1usize..9,
    ) {
        prop_assume!(a != b && c != d);
        let (x0, x1) = (a.min(b), a.max(b));
        let (y0, y1) = (c.min(d), c.max(d));
        let region = bx(x0 as f64 / 64.0, y0 as f64 / 64.0, x1 as f64 / 64.0, y1 as f64 / 64.0);
        let got = rasterize_box(&region, (h, w));
        // cell (r, q) spans [q/w, (q+1)/w); compare in units of 1/(64 w)
        for r in 0..h {
            for q in 0..w {
                let ox = (x0 as usize * w) < (q + 1) * 64 && (x1 as usize * w) > q * 64;
                let oy = (y0 as usize * h) < (r + 1) * 64 && (y1 as usize * h) > r * 64;
                prop_assert_eq!(got[r * w + q], ox && oy);
            }
        }
        prop_assert!(got.iter().any(|&v| v));
    }

    #[test]
    fn strict_masks_partition_the_grid(cut in 1u32..63, h in 1usize..9, w in 2usize..9) {
        let left = bx(0.0, 0.0, cut as f64 / 64.0, 1.0);
        let right = bx(cut as f64 / 64.0, 0.0, 1.0, 1.0);
        let m = ScaleMask::build(&[left, right], (h, w), OverlapMode::Strict).unwrap();
        prop_assert!(m.branches.iter().all(|b| b.iter().any(|&v| v)));
        for c in 0..h * w {
            let owners = m.branches.iter().filter(|b| b[c]).count() + m.background[c] as usize;
            prop_assert_eq!(owners, 1);
        }
    }
}

#[test]
fn strict_ties_go_to_the_earlier_branch() {
    let m = ScaleMask::build(&[bx(0.0, 0.0, 0.5, 1.0), bx(0.5, 0.0, 1.0, 1.0)], (1, 3), OverlapMode::Strict).unwrap();
    assert_eq!(m.branches[0], vec![true, true, false]);
    assert_eq!(m.branches[1], vec![false, false, true]);
    let last = ScaleMask::build(&[bx(0.0, 0.0, 0.5, 1.0), bx(0.5, 0.0, 1.0, 1.0)], (1, 3), OverlapMode::LastWins).unwrap();
    assert_eq!(last.branches[0], vec![true, true, false]);
    assert_eq!(last.branches[1], vec![false, true, true]);
    let coarse = ScaleMask::build(&[bx(0.0, 0.0, 0.5, 1.0), bx(0.5, 0.0, 1.0, 1.0)], (1, 1), OverlapMode::Strict);
    assert!(coarse.unwrap_err().to_string().contains("cannot be separated"));
    let one = ScaleMask::build(&[bx(0.2, 0.2, 0.8, 0.8)], (1, 1), OverlapMode::Strict).unwrap();
    assert!(one.background.iter().all(|&b| !b));
}

#[test]
fn fuse_features_examples() {
    let fl = logits(5, 3, 1);
    let fg = logits(5, 3, 2);
    assert_eq!(grid(&fuse_features(&fl, &fg, &[true; 5]).unwrap()), grid(&fl));
    assert_eq!(grid(&fuse_features(&fl, &fg, &[false; 5]).unwrap()), grid(&fg));
    let mask = [false, false, true, false, false];
    let fused = fuse_features(&fl, &fg, &mask).unwrap();
    for r in 0..5 {
        for c in 0..3 {
            let src = if r == 2 { &fl } else { &fg };
            assert_eq!(fused.data()[r * 3 + c].to_bits(), src.data()[r * 3 + c].to_bits());
        }
    }
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(fl.clone()), tape.constant(fg.clone()));
    let s = tape.splice_rows(a, b, &mask).unwrap();
    assert_eq!(grid(tape.value(s)), grid(&fused));
    assert!(fuse_features(&fl, &logits(4, 3, 2), &[true; 5]).is_err());
}

#[test]
fn blend_examples() {
    let lg = logits(4, 3, 3);
    let li = logits(4, 3, 4);
    assert_eq!(grid(&blend_logits(&lg, &li, 0.0).unwrap()), grid(&li));
    assert_eq!(grid(&blend_logits(&lg, &li, 1.0).unwrap()), grid(&lg));
    let cell = blend_logits(&Tensor::full(vec![1, 1], 10.0), &Tensor::full(vec![1, 1], 0.0), 0.05).unwrap();
    assert!((cell.data()[0] - 0.5).abs() < 1e-15);
    assert!(blend_logits(&lg, &li, 1.5).is_err());
    assert!(blend_logits(&lg, &li, -0.1).is_err());
}

#[test]
fn merge_examples() {
    let lg = logits(16, 3, 5);
    let l1 = logits(16, 3, 6);
    let l2 = logits(16, 3, 7);
    let full = ScaleMask::build(&[BoxRegion::full()], (4, 4), OverlapMode::Strict).unwrap();
    assert_eq!(grid(&merge_logits(&lg, std::slice::from_ref(&l1), &full, OverlapMode::Strict).unwrap()), grid(&l1));

    let empty = ScaleMask {
        scale: (4, 4),
        branches: vec![vec![false; 16]; 2],
        background: vec![true; 16],
    };
    assert_eq!(grid(&merge_logits(&lg, &[l1.clone(), l2.clone()], &empty, OverlapMode::Strict).unwrap()), grid(&lg));

    let boxes = [bx(0.0, 0.0, 0.5, 0.5), bx(0.5, 0.5, 1.0, 1.0)];
    let m = ScaleMask::build(&boxes, (4, 4), OverlapMode::Strict).unwrap();
    let merged = grid(&merge_logits(&lg, &[l1.clone(), l2.clone()], &m, OverlapMode::Strict).unwrap());
    for cell in 0..16 {
        let (r, c) = (cell / 4, cell % 4);
        let src = match (r < 2, c < 2) {
            (true, true) => &l1,
            (false, false) => &l2,
            _ => &lg,
        };
        assert_eq!(merged[cell], grid(src)[cell], "cell {cell}");
    }

    let clash = ScaleMask {
        scale: (4, 4),
        branches: vec![vec![true; 16], vec![true; 16]],
        background: vec![false; 16],
    };
    let err = merge_logits(&lg, &[l1.clone(), l2.clone()], &clash, OverlapMode::Strict).unwrap_err();
    assert!(err.to_string().contains("cells"));
    let last = merge_logits(&lg, &[l1, l2.clone()], &clash, OverlapMode::LastWins).unwrap();
    assert_eq!(grid(&last), grid(&l2));
}

fn composer_model() -> VarModel {
    let mut m = tiny_model(vec![(1, 1), (2, 2), (3, 3)], 51);
    m.register_concept("c1", "circle").unwrap();
    m.register_concept("c2", "square").unwrap();
    m
}

fn two_branch_spec(seed: u64) -> CompositionSpec {
    let mut spec = CompositionSpec::new(
        "a circle",
        vec![
            BranchSpec {
                prompt: "a <c1>".into(),
                region: bx(0.0, 0.0, 0.5, 1.0),
            },
            BranchSpec {
                prompt: "a <c2>".into(),
                region: bx(0.5, 0.0, 1.0, 1.0),
            },
        ],
    );
    spec.s_start = 2;
    spec.seed = seed;
    spec
}

#[test]
fn degenerate_specs_reproduce_plain_sampling() {
    let m = composer_model();
    let cfg = SampleConfig::default();
    let global = m.prompt("a circle").unwrap();
    for seed in 0..4 {
        let plain = m.sample(&global, &cfg, seed).unwrap();

        let mut same = two_branch_spec(seed);
        same.alpha = 0.3;
        for b in &mut same.branches {
            b.prompt = "a circle".into();
        }
        assert_eq!(compose_sample(&m, &same, &cfg).unwrap().pyramid, plain);

        let mut late = two_branch_spec(seed);
        late.s_start = 4;
        let out = compose_sample(&m, &late, &cfg).unwrap();
        assert!(out.intervened.iter().all(|&b| !b));
        assert_eq!(out.pyramid, plain);

        let mut none = two_branch_spec(seed);
        none.branches.clear();
        assert_eq!(compose_sample(&m, &none, &cfg).unwrap().pyramid, plain);

        let mut global_only = two_branch_spec(seed);
        global_only.alpha = 1.0;
        assert_eq!(compose_sample(&m, &global_only, &cfg).unwrap().pyramid, plain);
    }
}

#[test]
fn branches_stay_synchronized_and_runs_repeat() {
    let m = composer_model();
    let cfg = SampleConfig::default();
    let spec = two_branch_spec(9);
    let a = compose_sample(&m, &spec, &cfg).unwrap();
    assert_eq!(a.states.len(), 3);
    for st in &a.states[1..] {
        let same = st
            .running_sum
            .values
            .iter()
            .zip(&a.states[0].running_sum.values)
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same);
    }
    assert_eq!(a.intervened, vec![false, true, true]);
    let b = compose_sample(&m, &spec, &cfg).unwrap();
    assert_eq!(a.pyramid, b.pyramid);

    let mut only = spec.clone();
    only.intervention = Some(Intervention::Only(3));
    assert_eq!(compose_sample(&m, &only, &cfg).unwrap().intervened, vec![false, false, true]);
    let mut block = spec;
    block.fusion_site = FusionSite::BlockOutput;
    compose_sample(&m, &block, &cfg).unwrap();
}

#[test]
fn local_features_reach_the_merged_logits() {
    // a concept branch covering everything from scale 1 with alpha 0 is
    // plain sampling of the concept prompt
    let m = composer_model();
    let cfg = SampleConfig::default();
    let mut spec = CompositionSpec::new(
        "a circle",
        vec![BranchSpec {
            prompt: "a <c1>".into(),
            region: BoxRegion::full(),
        }],
    );
    spec.alpha = 0.0;
    spec.s_start = 1;
    for seed in 0..3 {
        spec.seed = seed;
        let plain = m.sample(&m.prompt("a <c1>").unwrap(), &cfg, seed).unwrap();
        assert_eq!(compose_sample(&m, &spec, &cfg).unwrap().pyramid, plain);
    }
}

#[test]
fn spec_json_roundtrip_and_validation() {
    let text = r#"{"global_prompt": "a circle", "branches": [{"prompt": "a <c1>", "box": [0, 0, 0.5, 1]}],
                  "alpha": 0.05, "s_start": 3, "seed": 7}"#;
    let spec = CompositionSpec::from_json(text).unwrap();
    assert_eq!(spec.branches[0].region, bx(0.0, 0.0, 0.5, 1.0));
    assert_eq!(spec.intervention(), Intervention::From(3));
    let back = CompositionSpec::from_json(&serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(back, spec);

    let overlap = r#"{"global_prompt": "a circle", "branches": [
        {"prompt": "a <c1>", "box": [0, 0, 0.6, 1]}, {"prompt": "a <c2>", "box": [0.4, 0, 1, 1]}]}"#;
    assert!(matches!(CompositionSpec::from_json(overlap), Err(Error::Config(_))));
    let flipped = r#"{"global_prompt": "a", "branches": [{"prompt": "a", "box": [0.6, 0, 0.2, 1]}]}"#;
    assert!(CompositionSpec::from_json(flipped).is_err());
    assert!(CompositionSpec::from_json(r#"{"global_prompt": "a", "alpha": 2}"#).is_err());
    assert!(CompositionSpec::from_json(r#"{"global_prompt": "a", "colour": 2}"#).is_err());

    let m = composer_model();
    let out = compose_sample(&m, &two_branch_spec(1), &SampleConfig::default()).unwrap();
    let rec = out.mask_records();
    assert_eq!(rec.len(), 3);
    assert_eq!(rec[2].branches[0], vec![1, 1, 0, 1, 1, 0, 1, 1, 0]);
    assert_eq!(rec[2].background, vec![0; 9]);
}
