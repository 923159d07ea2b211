//! Image <-> multi-scale token pyramid codec.
//!
//! An image is encoded to a continuous feature map, which is quantized
//! coarse-to-fine: at every scale the running residual is pooled to that
//! scale's resolution, each cell is snapped to its nearest codeword, and the
//! bilinearly up-sampled codeword map is subtracted from the residual. The
//! feature map is recovered as the sum of all up-sampled scales.

mod autoencoder;
mod kmeans;
mod quantize;

use serde::{Deserialize, Serialize};

pub use autoencoder::{Autoencoder, AutoencoderConfig, PATCH};
pub use kmeans::kmeans;
pub use quantize::{decode_grid, multiscale_quantize, next_scale_input, pooled_residuals, reconstruct, upsample_grid};

use std::path::Path;

use crate::container::{ArtifactKind, Container};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use crate::tensor::Tensor;

/// Resolution ladder `(h_s, w_s)`, coarsest first.
///
/// Multi-scale ladders start at `(1,1)`; a single-scale schedule may sit at
/// any resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule(Vec<(usize, usize)>);

impl ScaleSchedule {
    pub fn new(scales: Vec<(usize, usize)>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Config("scale schedule is empty".into()));
        }
        if scales.len() > 1 && scales[0] != (1, 1) {
            return Err(Error::Config(format!(
                "first scale must be (1,1), got {:?}",
                scales[0]
            )));
        }
        for pair in scales.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b.0 < a.0 || b.1 < a.1 {
                return Err(Error::Config(format!(
                    "schedule must be non-decreasing: {a:?} then {b:?}"
                )));
            }
        }
        Ok(Self(scales))
    }

    /// `[(1,1),(2,2),(3,3),(4,4),(6,6),(8,8)]`.
    pub fn desk_default() -> Self {
        Self(vec![(1, 1), (2, 2), (3, 3), (4, 4), (6, 6), (8, 8)])
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn finest(&self) -> (usize, usize) {
        *self.0.last().expect("schedule is non-empty")
    }

    pub fn cells(&self, s: usize) -> usize {
        let (h, w) = self.0[s];
        h * w
    }

    /// Total token count over all scales.
    pub fn total_cells(&self) -> usize {
        (0..self.len()).map(|s| self.cells(s)).sum()
    }

    /// Offset of scale `s` in the flattened token sequence.
    pub fn offset(&self, s: usize) -> usize {
        (0..s).map(|k| self.cells(k)).sum()
    }

    /// Schedule truncated to its first `n` scales.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "prefix length {n} outside 1..={}",
                self.len()
            )));
        }
        Ok(Self(self.0[..n].to_vec()))
    }
}

/// Continuous `[h, w, c]` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, c] => Ok(Self {
                height: *h,
                width: *w,
                channels: *c,
                values: t.data().to_vec(),
            }),
            s => Err(Error::shape("feature-map", format!("expected [h,w,c], got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.channels], self.values.clone())
            .expect("feature map shape is consistent")
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.values[i..i + self.channels]
    }

    pub fn mse(&self, other: &FeatureMap) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.values.len().max(1) as f64
    }
}

/// Codebook of `V` vectors of width `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub vectors: Tensor,
    pub trained: bool,
}

impl Codebook {
    pub fn new(vectors: Tensor, trained: bool) -> Result<Self> {
        let (v, _) = vectors
            .dims2()
            .ok_or_else(|| Error::shape("codebook", "vectors must be [V, c]"))?;
        if v < 2 {
            return Err(Error::Config(format!("codebook needs at least 2 entries, got {v}")));
        }
        if !vectors.is_finite() {
            return Err(Error::numeric("codebook", "non-finite codeword"));
        }
        Ok(Self { vectors, trained })
    }

    /// Index 0 is the zero codeword; the rest are k-means centroids of `points`.
    pub fn fit(points: &[f64], dim: usize, size: usize, iters: usize, seed: u64) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("codebook needs at least 2 entries, got {size}")));
        }
        let centroids = kmeans(points, dim, size - 1, iters, &mut rng::seeded(seed))?;
        let mut data = vec![0.0; dim];
        data.extend(centroids);
        Self::new(Tensor::new(vec![size, dim], data)?, true)
    }

    /// Placeholder codebook for artifacts written before any training.
    pub fn untrained(size: usize, dim: usize) -> Result<Self> {
        Self::new(Tensor::zeros(vec![size, dim]), false)
    }

    pub fn size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        self.vectors.row(k)
    }

    /// Nearest codeword by squared distance; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d: f64 = self
                .vector(k)
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }

    /// Index of an all-zero codeword, if present.
    pub fn zero_index(&self) -> Option<usize> {
        (0..self.size()).find(|&k| self.vector(k).iter().all(|&v| v == 0.0))
    }
}

/// Per-scale token grids.
///
/// `scales` may be a prefix of the full schedule while sampling; the
/// reconstruction target resolution is always the finest resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPyramid {
    pub resolution: (usize, usize),
    pub scales: Vec<(usize, usize)>,
    pub grids: Vec<Vec<usize>>,
}

impl TokenPyramid {
    pub fn empty(resolution: (usize, usize)) -> Self {
        Self {
            resolution,
            scales: Vec::new(),
            grids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn push(&mut self, scale: (usize, usize), grid: Vec<usize>) -> Result<()> {
        if grid.len() != scale.0 * scale.1 {
            return Err(Error::shape(
                "token-pyramid",
                format!("grid of {} tokens for scale {scale:?}", grid.len()),
            ));
        }
        self.scales.push(scale);
        self.grids.push(grid);
        Ok(())
    }

    /// Checks the pyramid against a full schedule (every scale present).
    pub fn check_schedule(&self, schedule: &ScaleSchedule) -> Result<()> {
        if self.scales != schedule.scales() {
            return Err(Error::shape(
                "token-pyramid",
                format!("scales {:?} do not match schedule {:?}", self.scales, schedule.scales()),
            ));
        }
        Ok(())
    }

    /// All tokens, coarsest scale first.
    pub fn flat(&self) -> Vec<usize> {
        self.grids.iter().flatten().copied().collect()
    }
}

/// Frozen codec: autoencoder plus codebook.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub autoencoder: Autoencoder,
    pub codebook: Codebook,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenizerMeta {
    autoencoder: AutoencoderConfig,
    codebook_trained: bool,
}

impl Tokenizer {
    pub fn encode_image(&self, image: &Image) -> Result<FeatureMap> {
        self.autoencoder.encode(image)
    }

    pub fn decode_features(&self, f: &FeatureMap) -> Result<Image> {
        self.autoencoder.decode(f)
    }

    pub fn tokenize(&self, image: &Image, schedule: &ScaleSchedule) -> Result<TokenPyramid> {
        let f = self.encode_image(image)?;
        multiscale_quantize(&f, &self.codebook, schedule)
    }

    pub fn detokenize(&self, p: &TokenPyramid) -> Result<Image> {
        let f = reconstruct(p, &self.codebook)?;
        self.decode_features(&f)
    }

    /// Refits the codebook `rounds` times on the pooled residuals of every
    /// scale of `images` under the current codebook, so coarse scales get
    /// codewords for the blends they actually see. Returns the mean feature
    /// reconstruction MSE before the first round and after each one.
    pub fn refine_codebook(
        &mut self,
        images: &[Image],
        schedule: &ScaleSchedule,
        rounds: usize,
        kmeans_iters: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let features = images.iter().map(|i| self.encode_image(i)).collect::<Result<Vec<_>>>()?;
        let mse = |cb: &Codebook| -> Result<f64> {
            let mut s = 0.0;
            for f in &features {
                s += reconstruct(&multiscale_quantize(f, cb, schedule)?, cb)?.mse(f);
            }
            Ok(s / features.len().max(1) as f64)
        };
        let mut curve = vec![mse(&self.codebook)?];
        for r in 0..rounds {
            let mut points = Vec::new();
            for f in &features {
                points.extend(pooled_residuals(f, &self.codebook, schedule)?);
            }
            let size = self.codebook.size();
            let dim = self.codebook.dim();
            self.codebook = Codebook::fit(&points, dim, size, kmeans_iters, rng::stream_seed(seed, &format!("refine{r}")))?;
            curve.push(mse(&self.codebook)?);
        }
        Ok(curve)
    }

    pub fn to_container(&self, seed: u64) -> Result<Container> {
        let mut c = Container::new(ArtifactKind::Tokenizer, seed);
        for (name, t) in self.autoencoder.named_arrays() {
            c.push_array(name, t);
        }
        c.push_array("codebook", self.codebook.vectors.clone());
        c.push_record(&TokenizerMeta {
            autoencoder: self.autoencoder.config.clone(),
            codebook_trained: self.codebook.trained,
        })?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ArtifactKind::Tokenizer {
            return Err(Error::Artifact(format!("expected tokenizer, got {:?}", c.kind)));
        }
        let meta: Vec<TokenizerMeta> = c.decode_records()?;
        let meta = meta
            .into_iter()
            .next()
            .ok_or_else(|| Error::Artifact("tokenizer metadata missing".into()))?;
        let autoencoder = Autoencoder::from_arrays(meta.autoencoder, |n| c.array(n).cloned())?;
        let codebook = Codebook::new(c.array("codebook")?.clone(), meta.codebook_trained)?;
        Ok(Self {
            autoencoder,
            codebook,
        })
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<String> {
        self.to_container(seed)?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, ArtifactKind::Tokenizer)?)
    }

    /// SHA-256 over every weight and codeword.
    pub fn content_hash(&self) -> String {
        let mut all = self.autoencoder.params.clone();
        all.extend_from_slice(self.codebook.vectors.data());
        rng::hash_f64s(&all)
    }
}

/// Trains the autoencoder by reconstruction MSE, then fits the codebook on
/// encoder outputs.
pub fn train_tokenizer(
    corpus: &[Image],
    config: &AutoencoderConfig,
    codebook_size: usize,
    steps: usize,
    learning_rate: f64,
    kmeans_iters: usize,
    seed: u64,
) -> Result<(Tokenizer, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("tokenizer corpus is empty".into()));
    }
    let mut ae = Autoencoder::init(config.clone(), seed)?;
    let curve = ae.train(corpus, steps, learning_rate, seed)?;
    let codebook = if steps == 0 {
        Codebook::untrained(codebook_size, config.channels)?
    } else {
        let mut points = Vec::new();
        for img in corpus {
            points.extend(ae.encode(img)?.values);
        }
        Codebook::fit(
            &points,
            config.channels,
            codebook_size,
            kmeans_iters,
            rng::stream_seed(seed, "codebook"),
        )?
    };
    Ok((
        Tokenizer {
            autoencoder: ae,
            codebook,
        },
        curve,
    ))
}

#[cfg(test)]
mod tests;
