//! Frozen random-feature fidelity proxies.

use rand_distr::{Distribution, Normal};

use super::data::background_rgb;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::BACKGROUNDS;
use crate::rng;

/// Two bias-free 3x3 convolutions with tanh, then global average pooling,
/// minus a calibrated centre. Inputs are centred with `2x - 1`, so before
/// calibration the map is odd: `f(1 - x) = -f(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyExtractor {
    c1: usize,
    c2: usize,
    w1: Vec<f64>,
    w2: Vec<f64>,
    centre: Vec<f64>,
}

/// `[c_out, c_in, 3, 3]` convolution, zero padding 1.
fn conv3(x: &[f64], (h, w, cin): (usize, usize, usize), k: &[f64], cout: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for dy in 0..3 {
                let y = (oy * stride + dy) as isize - 1;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let xx = (ox * stride + dx) as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let px = &x[(y as usize * w + xx as usize) * cin..][..cin];
                    for (co, ov) in o.iter_mut().enumerate() {
                        let kk = &k[((co * cin) * 3 + dy) * 3 + dx..];
                        for (ci, &v) in px.iter().enumerate() {
                            *ov += kk[ci * 9] * v;
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

impl ProxyExtractor {
    pub fn new(seed: u64) -> Self {
        let (c1, c2) = (16, 32);
        let mut r = rng::stream(seed, "proxy-extractor");
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let d = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| d.sample(&mut r)).collect()
        };
        let w1 = draw(c1 * 3 * 9, 27);
        let w2 = draw(c2 * c1 * 9, c1 * 9);
        Self {
            c1,
            c2,
            w1,
            w2,
            centre: vec![0.0; c2],
        }
    }

    /// Sets the centre to the mean raw feature of `images`, so cosine
    /// compares deviations from a typical scene instead of the shared mean
    /// direction every image has.
    pub fn calibrate(&mut self, images: &[Image]) {
        let mut mean = vec![0.0; self.c2];
        for img in images {
            for (m, v) in mean.iter_mut().zip(self.raw_features(img)) {
                *m += v / images.len() as f64;
            }
        }
        self.centre = mean;
    }

    pub fn features(&self, img: &Image) -> Vec<f64> {
        self.raw_features(img).iter().zip(&self.centre).map(|(v, c)| v - c).collect()
    }

    fn raw_features(&self, img: &Image) -> Vec<f64> {
        let x: Vec<f64> = img.data.iter().map(|v| 2.0 * v - 1.0).collect();
        let (h1, a, b) = conv3(&x, (img.height, img.width, 3), &self.w1, self.c1, 1);
        let h1: Vec<f64> = h1.into_iter().map(f64::tanh).collect();
        let (h2, a2, b2) = conv3(&h1, (a, b, self.c1), &self.w2, self.c2, 2);
        let cells = (a2 * b2) as f64;
        let mut pooled = vec![0.0; self.c2];
        for (i, v) in h2.into_iter().enumerate() {
            pooled[i % self.c2] += v.tanh() / cells;
        }
        pooled
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean pairwise cosine similarity between two image sets.
pub fn proxy_subject_fidelity(ex: &ProxyExtractor, generated: &[Image], references: &[Image]) -> Result<f64> {
    if generated.is_empty() || references.is_empty() {
        return Err(Error::InvalidArgument("fidelity needs non-empty image sets".into()));
    }
    let g: Vec<Vec<f64>> = generated.iter().map(|i| ex.features(i)).collect();
    let r: Vec<Vec<f64>> = references.iter().map(|i| ex.features(i)).collect();
    let mut s = 0.0;
    for a in &g {
        for b in &r {
            s += cosine(a, b);
        }
    }
    Ok(s / (g.len() * r.len()) as f64)
}

/// Background word whose palette colour is nearest the mean border pixel.
pub fn classify_background(img: &Image) -> &'static str {
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            if y == 0 || x == 0 || y + 1 == img.height || x + 1 == img.width {
                let p = img.pixel(y, x);
                for c in 0..3 {
                    acc[c] += p[c];
                }
                n += 1.0;
            }
        }
    }
    let mean = acc.map(|v| v / n);
    let dist = |w: &str| {
        let c = background_rgb(w).expect("palette word");
        (0..3).map(|i| (c[i] - mean[i]).powi(2)).sum::<f64>()
    };
    BACKGROUNDS
        .iter()
        .copied()
        .min_by(|a, b| dist(a).total_cmp(&dist(b)))
        .expect("non-empty palette")
}

/// The background word named in `prompt`, if any.
pub fn prompt_background(prompt: &str) -> Option<&'static str> {
    prompt
        .split_whitespace()
        .find_map(|w| BACKGROUNDS.iter().copied().find(|&b| b == w))
}

/// Fraction of images whose classified background matches their prompt.
pub fn proxy_prompt_fidelity(images: &[Image], prompts: &[String]) -> Result<f64> {
    if images.is_empty() || images.len() != prompts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images for {} prompts",
            images.len(),
            prompts.len()
        )));
    }
    let hits = images
        .iter()
        .zip(prompts)
        .filter(|(img, p)| prompt_background(p) == Some(classify_background(img)))
        .count();
    Ok(hits as f64 / images.len() as f64)
}
