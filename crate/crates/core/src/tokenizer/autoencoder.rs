use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Spatial reduction factor of the encoder (two stride-2 stages).
pub const PATCH: usize = 4;
const SUB: usize = 4; // 2x2 sub-patches per patch
const SUB_VALUES: usize = 12; // 2x2 pixels x RGB

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub hidden: usize,
    pub channels: usize,
}

impl AutoencoderConfig {
    pub fn feature_resolution(&self) -> (usize, usize) {
        (self.image_height / PATCH, self.image_width / PATCH)
    }

    fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (h, c) = (self.hidden, self.channels);
        vec![
            ("enc1.w", vec![SUB_VALUES, h]),
            ("enc1.b", vec![h]),
            ("enc2.w", vec![SUB * h, c]),
            ("enc2.b", vec![c]),
            ("dec1.w", vec![c, SUB * h]),
            ("dec1.b", vec![SUB * h]),
            ("dec2.w", vec![h, SUB_VALUES]),
            ("dec2.b", vec![SUB_VALUES]),
        ]
    }
}

/// Two stride-2 convolution stages down (kernel 2) and two transposed stages
/// up. With kernel equal to stride every stage is a per-window linear map,
/// evaluated here as a matmul over window-major pixel rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub params: Vec<f64>,
}

struct AeVars {
    w: Vec<Var>,
}

impl Autoencoder {
    pub fn init(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        if config.image_height % PATCH != 0 || config.image_width % PATCH != 0 || config.image_height == 0 {
            return Err(Error::Config(format!(
                "image size {}x{} is not divisible by the patch factor {PATCH}",
                config.image_height, config.image_width
            )));
        }
        let mut r = rng::stream(seed, "autoencoder-init");
        let mut params = Vec::new();
        for (name, shape) in config.layout() {
            let n: usize = shape.iter().product();
            if name.ends_with(".b") {
                params.extend(std::iter::repeat_n(0.0, n));
            } else {
                let std = 1.0 / (shape[0] as f64).sqrt();
                let d = Normal::new(0.0, std).expect("positive std");
                params.extend((0..n).map(|_| d.sample(&mut r)));
            }
        }
        Ok(Self { config, params })
    }

    pub fn named_arrays(&self) -> Vec<(String, Tensor)> {
        let mut off = 0;
        self.config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let t = Tensor::new(shape, self.params[off..off + n].to_vec()).expect("layout");
                off += n;
                (name.to_string(), t)
            })
            .collect()
    }

    pub fn from_arrays(config: AutoencoderConfig, mut get: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        let mut params = Vec::new();
        for (name, shape) in config.layout() {
            let t = get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Artifact(format!(
                    "array `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.extend_from_slice(t.data());
        }
        Ok(Self { config, params })
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let c = &self.config;
        if (image.height, image.width) != (c.image_height, c.image_width) {
            return Err(Error::InvalidArgument(format!(
                "image is {}x{}, expected {}x{}",
                image.height, image.width, c.image_height, c.image_width
            )));
        }
        Ok(())
    }

    /// Window-major rows `[patches * 4, 12]` of centred pixels.
    fn patch_rows(&self, image: &Image) -> Vec<f64> {
        let (ph, pw) = self.config.feature_resolution();
        let mut out = Vec::with_capacity(ph * pw * SUB * SUB_VALUES);
        for py in 0..ph {
            for px in 0..pw {
                for sy in 0..2 {
                    for sx in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let y = py * PATCH + sy * 2 + dy;
                                let x = px * PATCH + sx * 2 + dx;
                                out.extend(image.pixel(y, x).iter().map(|v| 2.0 * v - 1.0));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn rows_to_image(&self, rows: &[f64]) -> Image {
        let (ph, pw) = self.config.feature_resolution();
        let mut img = Image::filled(self.config.image_height, self.config.image_width, [0.0; 3]);
        let mut k = 0;
        for py in 0..ph {
            for px in 0..pw {
                for sy in 0..2 {
                    for sx in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let y = py * PATCH + sy * 2 + dy;
                                let x = px * PATCH + sx * 2 + dx;
                                let v = [rows[k], rows[k + 1], rows[k + 2]].map(|c| (c + 1.0) / 2.0);
                                img.set_pixel(y, x, v);
                                k += 3;
                            }
                        }
                    }
                }
            }
        }
        img
    }

    fn vars(&self, tape: &mut Tape, trainable: bool) -> AeVars {
        let w = self
            .named_arrays()
            .into_iter()
            .map(|(_, t)| if trainable { tape.leaf(t) } else { tape.constant(t) })
            .collect();
        AeVars { w }
    }

    fn encode_tape(&self, tape: &mut Tape, v: &AeVars, rows: Var, patches: usize) -> Result<Var> {
        let h = tape.matmul(rows, v.w[0])?;
        let h = tape.add_bias(h, v.w[1])?;
        let h = tape.gelu(h)?;
        let h = tape.reshape(h, vec![patches, SUB * self.config.hidden])?;
        let f = tape.matmul(h, v.w[2])?;
        tape.add_bias(f, v.w[3])
    }

    fn decode_tape(&self, tape: &mut Tape, v: &AeVars, f: Var, patches: usize) -> Result<Var> {
        let h = tape.matmul(f, v.w[4])?;
        let h = tape.add_bias(h, v.w[5])?;
        let h = tape.gelu(h)?;
        let h = tape.reshape(h, vec![patches * SUB, self.config.hidden])?;
        let out = tape.matmul(h, v.w[6])?;
        tape.add_bias(out, v.w[7])
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureMap> {
        self.check_image(image)?;
        let (ph, pw) = self.config.feature_resolution();
        let patches = ph * pw;
        let mut tape = Tape::new();
        let v = self.vars(&mut tape, false);
        let rows = tape.constant(Tensor::new(vec![patches * SUB, SUB_VALUES], self.patch_rows(image))?);
        let f = self.encode_tape(&mut tape, &v, rows, patches)?;
        Ok(FeatureMap {
            height: ph,
            width: pw,
            channels: self.config.channels,
            values: tape.value(f).data().to_vec(),
        })
    }

    pub fn decode(&self, f: &FeatureMap) -> Result<Image> {
        let (ph, pw) = self.config.feature_resolution();
        if (f.height, f.width, f.channels) != (ph, pw, self.config.channels) {
            return Err(Error::shape(
                "decode",
                format!(
                    "feature map {}x{}x{} vs expected {ph}x{pw}x{}",
                    f.height, f.width, f.channels, self.config.channels
                ),
            ));
        }
        let patches = ph * pw;
        let mut tape = Tape::new();
        let v = self.vars(&mut tape, false);
        let fv = tape.constant(Tensor::new(vec![patches, self.config.channels], f.values.clone())?);
        let out = self.decode_tape(&mut tape, &v, fv, patches)?;
        Ok(self.rows_to_image(tape.value(out).data()))
    }

    /// Full-batch Adam on reconstruction MSE. Returns the loss before each
    /// step followed by the final loss.
    pub fn train(&mut self, corpus: &[Image], steps: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        for img in corpus {
            self.check_image(img)?;
        }
        let (ph, pw) = self.config.feature_resolution();
        let patches = ph * pw * corpus.len();
        let rows: Vec<f64> = corpus.iter().flat_map(|img| self.patch_rows(img)).collect();
        let rows = Tensor::new(vec![patches * SUB, SUB_VALUES], rows)?;
        let n = rows.len() as f64;
        let mut opt = Optimizer::new(OptimizerKind::adam(), self.params.len());
        let rates = vec![lr; self.params.len()];
        let mut curve = Vec::with_capacity(steps + 1);
        for step in 0..=steps {
            let mut tape = Tape::with_seed(seed);
            let v = self.vars(&mut tape, true);
            let x = tape.constant(rows.clone());
            let f = self.encode_tape(&mut tape, &v, x, patches)?;
            let y = self.decode_tape(&mut tape, &v, f, patches)?;
            let diff = tape.sub(y, x)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum(sq)?;
            let loss = tape.div_scalar(total, n)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::numeric(
                    "train-tokenizer",
                    format!("loss diverged at step {step} (seed {seed})"),
                ));
            }
            curve.push(value);
            if step == steps {
                break;
            }
            tape.backward(loss)?;
            let grad: Vec<f64> = v.w.iter().flat_map(|w| tape.grad(*w).unwrap().to_vec()).collect();
            opt.step(&mut self.params, &grad, &rates);
        }
        Ok(curve)
    }
}
