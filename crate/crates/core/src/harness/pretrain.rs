//! Tokenizer and base-model pretraining on the procedural corpus.

use serde::{Deserialize, Serialize};

use super::data::base_corpus;
use crate::error::{Error, Result};
use crate::model::{nll, ScaleWeights, TeacherItem, VarConfig, VarModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng;
use crate::tensor::Tape;
use crate::tokenizer::{train_tokenizer, AutoencoderConfig, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub image_size: usize,
    pub corpus_size: usize,
    pub val_size: usize,
    pub ae_hidden: usize,
    /// The tokenizer fits on this many leading training images (full batch).
    pub tokenizer_corpus: usize,
    pub tokenizer_steps: usize,
    pub tokenizer_lr: f64,
    pub kmeans_iters: usize,
    /// Codebook refits on multi-scale residuals after the initial fit.
    pub codebook_rounds: usize,
    pub model: VarConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Validation NLL is logged every this many steps (and at both ends).
    pub log_every: usize,
}

impl PretrainConfig {
    pub fn autoencoder(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            image_height: self.image_size,
            image_width: self.image_size,
            hidden: self.ae_hidden,
            channels: self.model.code_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let res = self.autoencoder().feature_resolution();
        if self.image_size % crate::tokenizer::PATCH != 0 || res != self.model.schedule.finest() {
            return Err(Error::Config(format!(
                "image size {} gives features {:?} but the schedule ends at {:?}",
                self.image_size,
                res,
                self.model.schedule.finest()
            )));
        }
        if self.corpus_size == 0 || self.val_size == 0 || self.tokenizer_corpus == 0 || self.batch == 0 || self.log_every == 0 {
            return Err(Error::Config("corpus_size, val_size, tokenizer_corpus, batch and log_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.tokenizer_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub tokenizer: Tokenizer,
    pub model: VarModel,
    pub tokenizer_curve: Vec<f64>,
    /// `(step, mean validation NLL per image)`.
    pub val_curve: Vec<(usize, f64)>,
}

/// Captioned, tokenized teacher items.
pub fn corpus_items(model: &VarModel, tok: &Tokenizer, corpus: &[(crate::image::Image, String)]) -> Result<Vec<TeacherItem>> {
    corpus
        .iter()
        .map(|(img, caption)| {
            let pyramid = tok.tokenize(img, &model.config.schedule)?;
            model.prepare(model.prompt(caption)?, pyramid)
        })
        .collect()
}

pub fn mean_nll(model: &VarModel, items: &[TeacherItem]) -> Result<f64> {
    let mut s = 0.0;
    for it in items {
        s += nll(&model.forward_teacher_forced(&it.prompt, &it.pyramid)?, &it.pyramid)?;
    }
    Ok(s / items.len() as f64)
}

/// Trains the tokenizer (stream "tokenizer") and then the base model
/// (stream "base") with Adam on the mean batch NLL.
pub fn pretrain(cfg: &PretrainConfig, seed: u64) -> Result<Pretrained> {
    cfg.validate()?;
    let corpus = base_corpus(cfg.corpus_size + cfg.val_size, cfg.image_size, cfg.image_size, rng::stream_seed(seed, "corpus"))?;
    let (train, val) = corpus.split_at(cfg.corpus_size);
    let images: Vec<_> = train.iter().take(cfg.tokenizer_corpus).map(|(i, _)| i.clone()).collect();
    let tok_seed = rng::stream_seed(seed, "tokenizer");
    let (mut tokenizer, tokenizer_curve) = train_tokenizer(
        &images,
        &cfg.autoencoder(),
        cfg.model.vocab,
        cfg.tokenizer_steps,
        cfg.tokenizer_lr,
        cfg.kmeans_iters,
        tok_seed,
    )?;
    if cfg.tokenizer_steps > 0 && cfg.codebook_rounds > 0 {
        let curve = tokenizer.refine_codebook(&images, &cfg.model.schedule, cfg.codebook_rounds, cfg.kmeans_iters, tok_seed)?;
        log::info!("codebook refinement feature mse {curve:?}");
    }
    let base_seed = rng::stream_seed(seed, "base");
    let mut model = VarModel::init(cfg.model.clone(), tokenizer.codebook.clone(), base_seed)?;
    let train_items = corpus_items(&model, &tokenizer, train)?;
    let val_items = corpus_items(&model, &tokenizer, val)?;

    let mut opt = Optimizer::new(OptimizerKind::adam(), model.store.len());
    let lr = vec![cfg.lr; model.store.len()];
    let ones = ScaleWeights::ones(cfg.model.schedule.len());
    let mut val_curve = vec![(0, mean_nll(&model, &val_items)?)];
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut r = rng::stream(base_seed, "batches");
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let mut grad = vec![0.0; model.store.len()];
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                use rand::seq::SliceRandom;
                order.shuffle(&mut r);
                cursor = 0;
            }
            let item = &train_items[order[cursor]];
            cursor += 1;
            let mut tape = Tape::new();
            let pv = model.store.vars(&mut tape, true);
            let loss = model.weighted_loss_on_tape(&mut tape, &pv, item, &ones)?;
            tape.backward(loss)?;
            for (g, v) in grad.iter_mut().zip(model.store.flat_grad(&tape, &pv)) {
                *g += v / cfg.batch as f64;
            }
        }
        opt.step(&mut model.store.values, &grad, &lr);
        if model.store.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("pretrain", format!("diverged at step {step} (seed {seed})")));
        }
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let v = mean_nll(&model, &val_items)?;
            log::info!("pretrain step {} val nll {v:.4}", step + 1);
            val_curve.push((step + 1, v));
        }
    }
    Ok(Pretrained {
        tokenizer,
        model,
        tokenizer_curve,
        val_curve,
    })
}
