use rand::Rng;

use super::*;
use crate::rng::seeded;
use crate::tensor::{ResampleKind, Resampler};

fn ae_config() -> AutoencoderConfig {
    AutoencoderConfig {
        image_height: 32,
        image_width: 32,
        hidden: 16,
        channels: 8,
    }
}

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = seeded(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
    let mut r = seeded(seed);
    FeatureMap {
        height: h,
        width: w,
        channels: c,
        values: (0..h * w * c).map(|_| r.random_range(-1.0..1.0)).collect(),
    }
}

fn random_codebook(size: usize, dim: usize, seed: u64) -> Codebook {
    let mut r = seeded(seed);
    let mut data = vec![0.0; dim];
    data.extend((0..(size - 1) * dim).map(|_| r.random_range(-1.0..1.0)));
    Codebook::new(Tensor::new(vec![size, dim], data).unwrap(), true).unwrap()
}

#[test]
fn encode_shape_contract() {
    let ae = Autoencoder::init(ae_config(), 1).unwrap();
    let f = ae.encode(&random_image(32, 32, 2)).unwrap();
    assert_eq!((f.height, f.width, f.channels), (8, 8, 8));
    assert_eq!(f.values.len(), 8 * 8 * 8);
}

#[test]
fn encode_is_deterministic() {
    let ae = Autoencoder::init(ae_config(), 1).unwrap();
    let zero = Image::filled(32, 32, [0.0; 3]);
    let a = ae.encode(&zero).unwrap();
    assert_eq!(a, ae.encode(&zero).unwrap());
    // a constant image gives the same response in every cell
    for y in 0..8 {
        for x in 0..8 {
            assert_eq!(a.cell(y, x), a.cell(0, 0));
        }
    }
    let img = random_image(32, 32, 3);
    let b = ae.encode(&img).unwrap();
    let c = ae.encode(&img).unwrap();
    let bits = |m: &FeatureMap| m.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&b), bits(&c));
}

#[test]
fn encode_rejects_wrong_size() {
    let ae = Autoencoder::init(ae_config(), 1).unwrap();
    let err = ae.encode(&random_image(16, 32, 1)).unwrap_err();
    assert!(err.to_string().contains("32x32"), "{err}");
    let bad = AutoencoderConfig {
        image_height: 30,
        ..ae_config()
    };
    assert!(Autoencoder::init(bad, 1).is_err());
}

#[test]
fn decode_roundtrip_shapes() {
    let ae = Autoencoder::init(ae_config(), 4).unwrap();
    let f = ae.encode(&random_image(32, 32, 5)).unwrap();
    let img = ae.decode(&f).unwrap();
    assert_eq!((img.height, img.width), (32, 32));
    assert!(ae.decode(&FeatureMap::zeros(4, 4, 8)).is_err());
}

#[test]
fn training_reduces_reconstruction_error() {
    let img = random_image(32, 32, 11);
    let corpus = vec![img.clone(), img];
    let mut ae = Autoencoder::init(ae_config(), 3).unwrap();
    let curve = ae.train(&corpus, 40, 1e-2, 3).unwrap();
    assert!(curve.last().unwrap() < &curve[0], "{curve:?}");
}

#[test]
fn single_scale_is_plain_nearest_assignment() {
    let cb = random_codebook(6, 3, 7);
    let f = random_map(4, 4, 3, 8);
    let p = multiscale_quantize(&f, &cb, &ScaleSchedule::new(vec![(4, 4)]).unwrap()).unwrap();
    let expected: Vec<usize> = f.values.chunks(3).map(|cell| cb.nearest(cell)).collect();
    assert_eq!(p.grids, vec![expected]);
}

#[test]
fn codeword_everywhere_gives_all_j_and_zero_residual() {
    let cb = random_codebook(7, 4, 21);
    let j = 3;
    let f = FeatureMap {
        height: 1,
        width: 1,
        channels: 4,
        values: cb.vector(j).to_vec(),
    };
    let p = multiscale_quantize(&f, &cb, &ScaleSchedule::new(vec![(1, 1)]).unwrap()).unwrap();
    assert_eq!(p.grids, vec![vec![j]]);
    assert_eq!(reconstruct(&p, &cb).unwrap(), f);

    // same at a larger resolution: a constant codeword map is recovered by the
    // coarsest scale alone
    let f = FeatureMap {
        height: 4,
        width: 4,
        channels: 4,
        values: cb.vector(j).repeat(16),
    };
    let sched = ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).unwrap();
    let p = multiscale_quantize(&f, &cb, &sched).unwrap();
    assert_eq!(p.grids[0], vec![j]);
    let rec = reconstruct(&p, &cb).unwrap();
    assert!(rec.mse(&f) == 0.0);
}

#[test]
fn exact_recovery_from_coarse_codeword_fixture() {
    // F is the up-sampled decode of a scale-1 grid; quantization recovers it.
    let cb = random_codebook(9, 3, 31);
    let sched = ScaleSchedule::new(vec![(1, 1), (3, 3), (6, 6)]).unwrap();
    let coarse = decode_grid(&[5], (1, 1), &cb).unwrap();
    let f = upsample_grid(&coarse, (6, 6));
    let p = multiscale_quantize(&f, &cb, &sched).unwrap();
    let rec = reconstruct(&p, &cb).unwrap();
    assert_eq!(rec.mse(&f), 0.0);
    assert_eq!(p.grids[0], vec![5]);
    assert!(p.grids[1..].iter().flatten().all(|&t| t == 0));
}

#[test]
fn refinement_is_monotone_over_prefixes() {
    let full = ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4), (8, 8)]).unwrap();
    for seed in 0..20 {
        let f = random_map(8, 8, 4, 100 + seed);
        let cb = random_codebook(12, 4, 200 + seed);
        let p = multiscale_quantize(&f, &cb, &full).unwrap();
        let mut last = f64::INFINITY;
        for n in 0..=full.len() {
            let prefix = TokenPyramid {
                resolution: p.resolution,
                scales: p.scales[..n].to_vec(),
                grids: p.grids[..n].to_vec(),
            };
            let mse = reconstruct(&prefix, &cb).unwrap().mse(&f);
            assert!(mse <= last, "seed {seed}: prefix {n} mse {mse} > {last}");
            last = mse;
        }
    }
}

fn naive_bilinear(src: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    // align-corners-false sampling, evaluated directly per output cell
    let mut out = FeatureMap::zeros(h, w, src.channels);
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, src.height);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, src.width);
            for c in 0..src.channels {
                let v = |yy: usize, xx: usize| src.values[(yy * src.width + xx) * src.channels + c];
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out.values[(y * w + x) * src.channels + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

#[test]
fn reconstruct_matches_independent_sum() {
    let cb = random_codebook(10, 3, 41);
    let sched = ScaleSchedule::desk_default();
    let mut r = seeded(42);
    let mut p = TokenPyramid::empty(sched.finest());
    for &s in sched.scales() {
        p.push(s, (0..s.0 * s.1).map(|_| r.random_range(0..10)).collect()).unwrap();
    }
    let rec = reconstruct(&p, &cb).unwrap();
    let mut acc = vec![0.0; 8 * 8 * 3];
    for (scale, grid) in p.scales.iter().zip(&p.grids) {
        let decoded = decode_grid(grid, *scale, &cb).unwrap();
        let up = Resampler::new(ResampleKind::Bilinear, *scale, (8, 8)).apply(&decoded.values, 3);
        for (a, u) in acc.iter_mut().zip(up) {
            *a += u;
        }
    }
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&rec.values), bits(&acc));
    // the interpolator itself agrees with a direct per-cell evaluation
    for (scale, grid) in p.scales.iter().zip(&p.grids) {
        let decoded = decode_grid(grid, *scale, &cb).unwrap();
        let a = upsample_grid(&decoded, (8, 8));
        let b = naive_bilinear(&decoded, 8, 8);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_and_single_scale_reconstruction() {
    let cb = random_codebook(4, 2, 5);
    let empty = TokenPyramid::empty((4, 4));
    assert_eq!(reconstruct(&empty, &cb).unwrap(), FeatureMap::zeros(4, 4, 2));
    let mut one = TokenPyramid::empty((4, 4));
    one.push((2, 2), vec![1, 2, 3, 0]).unwrap();
    let expected = upsample_grid(&decode_grid(&[1, 2, 3, 0], (2, 2), &cb).unwrap(), (4, 4));
    assert_eq!(reconstruct(&one, &cb).unwrap(), expected);
}

#[test]
fn out_of_range_token_fails() {
    let cb = random_codebook(4, 2, 5);
    let mut p = TokenPyramid::empty((1, 1));
    p.push((1, 1), vec![4]).unwrap();
    assert!(reconstruct(&p, &cb).is_err());
}

#[test]
fn untrained_codebook_is_rejected() {
    let cb = Codebook::untrained(4, 2).unwrap();
    let f = FeatureMap::zeros(1, 1, 2);
    let err = multiscale_quantize(&f, &cb, &ScaleSchedule::new(vec![(1, 1)]).unwrap()).unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

#[test]
fn codebook_needs_two_entries() {
    assert!(Codebook::new(Tensor::zeros(vec![1, 3]), true).is_err());
    assert!(Codebook::fit(&[0.0; 6], 3, 1, 2, 1).is_err());
}

#[test]
fn nearest_tie_goes_to_lowest_index() {
    let cb = Codebook::new(Tensor::new(vec![3, 1], vec![1.0, -1.0, 1.0]).unwrap(), true).unwrap();
    assert_eq!(cb.nearest(&[0.0]), 0);
    assert_eq!(cb.nearest(&[1.0]), 0);
}

#[test]
fn next_scale_input_examples() {
    let sched = ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).unwrap();
    let constant = FeatureMap {
        height: 4,
        width: 4,
        channels: 2,
        values: vec![0.75; 32],
    };
    let out = next_scale_input(&constant, 1, &sched).unwrap();
    assert_eq!((out.height, out.width), (2, 2));
    assert!(out.values.iter().all(|&v| (v - 0.75).abs() < 1e-15));

    let two = ScaleSchedule::new(vec![(1, 1), (2, 2)]).unwrap();
    let small = FeatureMap {
        height: 2,
        width: 2,
        channels: 1,
        values: vec![1.0, 2.0, 3.0, 4.0],
    };
    let pooled = Resampler::new(ResampleKind::AveragePool, (2, 2), (1, 1)).apply(&small.values, 1);
    assert_eq!(pooled, vec![2.5]);
    assert!(next_scale_input(&small, 2, &two).is_err());
    assert!(next_scale_input(&small, 0, &two).is_err());
}

#[test]
fn next_scale_input_matches_window_means() {
    let sched = ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).unwrap();
    let f = random_map(4, 4, 3, 77);
    let out = next_scale_input(&f, 1, &sched).unwrap();
    for oy in 0..2 {
        for ox in 0..2 {
            for c in 0..3 {
                let mut sum = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        sum += f.cell(oy * 2 + dy, ox * 2 + dx)[c];
                    }
                }
                assert!((out.cell(oy, ox)[c] - sum / 4.0).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn schedule_validation() {
    assert!(ScaleSchedule::new(vec![]).is_err());
    assert!(ScaleSchedule::new(vec![(2, 2), (4, 4)]).is_err());
    assert!(ScaleSchedule::new(vec![(2, 2)]).is_ok());
    assert!(ScaleSchedule::new(vec![(1, 1), (3, 3), (2, 2)]).is_err());
    let d = ScaleSchedule::desk_default();
    assert_eq!(d.len(), 6);
    assert_eq!(d.total_cells(), 1 + 4 + 9 + 16 + 36 + 64);
    assert_eq!(d.offset(2), 5);
}

#[test]
fn train_tokenizer_roundtrip_and_hash() {
    let cfg = AutoencoderConfig {
        image_height: 16,
        image_width: 16,
        hidden: 8,
        channels: 4,
    };
    let corpus: Vec<Image> = (0..3).map(|k| random_image(16, 16, 60 + k)).collect();
    let (tok, curve) = train_tokenizer(&corpus, &cfg, 8, 5, 1e-2, 3, 9).unwrap();
    assert_eq!(curve.len(), 6);
    assert!(tok.codebook.trained);
    assert_eq!(tok.codebook.zero_index(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tok.cpcv");
    tok.save(&path, 9).unwrap();
    let back = Tokenizer::load(&path).unwrap();
    assert_eq!(back.content_hash(), tok.content_hash());
    let sched = ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).unwrap();
    let p = tok.tokenize(&corpus[0], &sched).unwrap();
    p.check_schedule(&sched).unwrap();
    let img = back.detokenize(&p).unwrap();
    assert_eq!((img.height, img.width), (16, 16));

    let empty: Vec<Image> = Vec::new();
    assert!(train_tokenizer(&empty, &cfg, 8, 5, 1e-2, 3, 9).is_err());
}
