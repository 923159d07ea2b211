//! Experiment configuration and the continual sequence runner.

use serde::{Deserialize, Serialize};

use super::baselines::{BaselineConfig, BaselineKind, LearnReport, Learner};
use super::data::{base_corpus, generate_concepts, ConceptDataset, ConceptKind, ConceptSuite, TaskSequence};
use super::pretrain::{pretrain, PretrainConfig, Pretrained};
use super::proxy::{proxy_prompt_fidelity, proxy_subject_fidelity, ProxyExtractor};
use crate::error::{Error, Result};
use crate::gcns::{GcnsConfig, TaskSpec};
use crate::image::Image;
use crate::optim::OptimizerKind;
use crate::model::{SampleConfig, TeacherItem, VarConfig, VarModel};
use crate::rng;
use crate::tokenizer::{ScaleSchedule, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub n_objects: usize,
    pub n_styles: usize,
    pub images_per_concept: usize,
    pub eval_prompts: usize,
}

/// Everything an experiment needs besides the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    pub pretrain: PretrainConfig,
    pub suite: SuiteConfig,
    /// Trainer settings for object concepts; style concepts use `style_p`.
    pub gcns: GcnsConfig,
    pub style_p: f64,
    pub images_per_prompt: usize,
    /// Side fraction of the centred window that subject fidelity compares;
    /// references place their subject there. 1 scores whole images.
    pub subject_window: f64,
    pub sample: SampleConfig,
    pub baselines: BaselineConfig,
}

impl LabConfig {
    /// 32x32 images on the six-scale ladder.
    pub fn desk() -> Self {
        let model = VarConfig::desk_default();
        let n = model.schedule.len();
        Self {
            pretrain: PretrainConfig {
                image_size: 32,
                corpus_size: 512,
                val_size: 64,
                ae_hidden: 32,
                tokenizer_corpus: 128,
                tokenizer_steps: 400,
                tokenizer_lr: 1e-2,
                kmeans_iters: 25,
                codebook_rounds: 3,
                model,
                steps: 3000,
                batch: 4,
                lr: 2e-3,
                log_every: 250,
            },
            suite: SuiteConfig {
                n_objects: 4,
                n_styles: 1,
                images_per_concept: 4,
                eval_prompts: 5,
            },
            gcns: GcnsConfig {
                optimizer: OptimizerKind::adamw(),
                ..GcnsConfig::object(n)
            },
            style_p: 10.0,
            images_per_prompt: 4,
            subject_window: 0.6,
            sample: SampleConfig {
                top_k: Some(3),
                ..SampleConfig::default()
            },
            baselines: BaselineConfig::default(),
        }
    }

    /// The six-scale ladder at 32x32 with a two-layer, width-32 model;
    /// minutes instead of hours on one core.
    pub fn quick() -> Self {
        let model = VarConfig {
            schedule: ScaleSchedule::desk_default(),
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            ffn_hidden: 64,
            vocab: 32,
            code_dim: 4,
            max_concepts: 8,
            max_prompt_len: 8,
        };
        let mut cfg = Self::desk();
        cfg.pretrain.model = model;
        cfg.pretrain.ae_hidden = 16;
        cfg.pretrain.lr = 3e-3;
        cfg.suite = SuiteConfig {
            n_objects: 3,
            n_styles: 0,
            images_per_concept: 4,
            eval_prompts: 4,
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.gcns.validate()?;
        if self.gcns.weights.len() != self.pretrain.model.schedule.len() {
            return Err(Error::Config(format!(
                "{} scale weights for {} scales",
                self.gcns.weights.len(),
                self.pretrain.model.schedule.len()
            )));
        }
        if !(self.subject_window > 0.0 && self.subject_window <= 1.0) {
            return Err(Error::Config(format!("subject_window {} outside (0, 1]", self.subject_window)));
        }
        if self.images_per_prompt == 0 {
            return Err(Error::Config("images_per_prompt must be at least 1".into()));
        }
        let n = self.suite.n_objects + self.suite.n_styles;
        if n > self.pretrain.model.max_concepts {
            return Err(Error::Config(format!(
                "{n} concepts exceed the model's {} concept slots",
                self.pretrain.model.max_concepts
            )));
        }
        self.sample.validate(self.pretrain.model.vocab)
    }

    pub fn suite(&self, seed: u64) -> Result<ConceptSuite> {
        let mut s = ConceptSuite::auto(self.suite.n_objects, self.suite.n_styles, seed)?;
        s.images_per_concept = self.suite.images_per_concept;
        s.eval_prompts = self.suite.eval_prompts;
        Ok(s)
    }

    pub fn task_config(&self, kind: ConceptKind) -> GcnsConfig {
        match kind {
            ConceptKind::Object => self.gcns.clone(),
            ConceptKind::Style => GcnsConfig {
                p: self.style_p,
                ..self.gcns.clone()
            },
        }
    }

    pub fn content_hash(&self) -> String {
        rng::sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

const PROXY_CALIBRATION: usize = 256;

/// Pretrained artifacts, concepts and the frozen proxy, built once per seed.
#[derive(Debug, Clone)]
pub struct Lab {
    pub cfg: LabConfig,
    pub seed: u64,
    pub tokenizer: Tokenizer,
    pub base: VarModel,
    pub concepts: Vec<ConceptDataset>,
    pub extractor: ProxyExtractor,
    pub val_curve: Vec<(usize, f64)>,
}

impl Lab {
    pub fn build(cfg: &LabConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let Pretrained {
            tokenizer,
            model,
            val_curve,
            ..
        } = pretrain(&cfg.pretrain, seed)?;
        Self::from_parts(cfg, seed, tokenizer, model, val_curve)
    }

    pub fn from_parts(
        cfg: &LabConfig,
        seed: u64,
        tokenizer: Tokenizer,
        base: VarModel,
        val_curve: Vec<(usize, f64)>,
    ) -> Result<Self> {
        cfg.validate()?;
        let size = cfg.pretrain.image_size;
        let concepts = generate_concepts(&cfg.suite(seed)?, size, size, rng::stream_seed(seed, "suite"))?;
        let mut lab = Self {
            cfg: cfg.clone(),
            seed,
            tokenizer,
            base,
            concepts,
            extractor: ProxyExtractor::new(rng::stream_seed(seed, "proxy")),
            val_curve,
        };
        // Calibrated on scenes disjoint from the pretraining corpus.
        let scenes = base_corpus(PROXY_CALIBRATION, size, size, rng::stream_seed(seed, "proxy-calibration"))?;
        let views: Vec<Image> = scenes.iter().map(|(img, _)| lab.subject_view(img)).collect();
        lab.extractor.calibrate(&views);
        Ok(lab)
    }

    /// Teacher items for concept `k` under `model`'s vocabulary.
    pub fn items(&self, model: &VarModel, k: usize) -> Result<Vec<TeacherItem>> {
        let c = &self.concepts[k];
        c.images
            .iter()
            .zip(&c.prompts)
            .map(|(img, p)| {
                let pyr = self.tokenizer.tokenize(img, &model.config.schedule)?;
                model.prepare(model.prompt(p)?, pyr)
            })
            .collect()
    }

    /// Seed for image `i` of evaluation prompt `j` of concept `k`; fixed
    /// across methods and task orders.
    pub fn sample_seed(&self, k: usize, j: usize, i: usize) -> u64 {
        rng::stream_seed(self.seed, &format!("sample{}-{j}-{i}", k + 1))
    }

    /// Evaluation renders of concept `k` with their prompts.
    pub fn render_concept(&self, model: &VarModel, k: usize) -> Result<(Vec<Image>, Vec<String>)> {
        let c = &self.concepts[k];
        let mut images = Vec::new();
        let mut prompts = Vec::new();
        for (j, p) in c.eval_prompts.iter().enumerate() {
            let prompt = model.prompt(p)?;
            for i in 0..self.cfg.images_per_prompt {
                let pyr = model.sample(&prompt, &self.cfg.sample, self.sample_seed(k, j, i))?;
                images.push(self.tokenizer.detokenize(&pyr)?.clamped());
                prompts.push(p.clone());
            }
        }
        Ok((images, prompts))
    }

    /// Centred `subject_window` crop.
    pub fn subject_view(&self, img: &Image) -> Image {
        let f = self.cfg.subject_window;
        if f >= 1.0 {
            return img.clone();
        }
        let cut = |n: usize| {
            let a = ((1.0 - f) / 2.0 * n as f64).round() as usize;
            (a, n - a)
        };
        let (y0, y1) = cut(img.height);
        let (x0, x1) = cut(img.width);
        img.crop(y0, y1, x0, x1)
    }

    /// `(subject fidelity, prompt fidelity)` of concept `k`'s renders.
    pub fn score_concept(&self, model: &VarModel, k: usize) -> Result<(f64, f64)> {
        let (images, prompts) = self.render_concept(model, k)?;
        let view = |v: &[Image]| v.iter().map(|i| self.subject_view(i)).collect::<Vec<_>>();
        Ok((
            proxy_subject_fidelity(&self.extractor, &view(&images), &view(&self.concepts[k].images))?,
            proxy_prompt_fidelity(&images, &prompts)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: String,
    pub subject_fidelity: f64,
    pub prompt_fidelity: f64,
    /// Subject fidelity now minus at learn time.
    pub forgetting_delta: f64,
}

/// Scores of every learned concept after one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: BaselineKind,
    pub sequence: String,
    pub seed: u64,
    pub after_task: usize,
    pub learned: String,
    pub scores: Vec<ConceptScore>,
    pub storage_bytes: usize,
    pub model_hash: String,
    pub fusion_seconds: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    /// Hash over everything except wall-clock fields.
    pub fn content_hash(&self) -> String {
        let mut r = self.clone();
        r.fusion_seconds = 0.0;
        r.seconds = 0.0;
        rng::sha256_hex(serde_json::to_string(&r).expect("serializable").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub method: BaselineKind,
    pub sequence: TaskSequence,
    pub records: Vec<MetricsRecord>,
    pub reports: Vec<LearnReport>,
    pub bytes_per_concept: usize,
    pub mask_bytes_per_concept: usize,
    pub fusion_seconds: f64,
}

impl SequenceResult {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("at least one task")
    }

    /// Subject fidelity of `concept` after the final task.
    pub fn retention(&self, concept: &str) -> Option<f64> {
        self.last()
            .scores
            .iter()
            .find(|s| s.concept == concept)
            .map(|s| s.subject_fidelity)
    }

    /// Mean final fidelity over every concept except the last learned.
    pub fn average_retention(&self) -> f64 {
        let s = &self.last().scores;
        let earlier = &s[..s.len().saturating_sub(1)];
        if earlier.is_empty() {
            return f64::NAN;
        }
        earlier.iter().map(|c| c.subject_fidelity).sum::<f64>() / earlier.len() as f64
    }

    pub fn mean_forgetting(&self) -> f64 {
        let s = &self.last().scores;
        s.iter().map(|c| c.forgetting_delta).sum::<f64>() / s.len() as f64
    }

    pub fn content_hash(&self) -> String {
        let all: String = self.records.iter().map(|r| r.content_hash()).collect();
        rng::sha256_hex(all.as_bytes())
    }
}

/// Registers concept `k` and trains it as task `t + 1` (0-based `t`).
pub fn learn_concept(lab: &Lab, learner: &mut Learner, t: usize, k: usize, gcns: Option<&GcnsConfig>) -> Result<LearnReport> {
    let c = lab
        .concepts
        .get(k)
        .ok_or_else(|| Error::InvalidArgument(format!("concept index {k} out of range")))?;
    let id = learner.model.register_concept(&c.name, c.signature.class_word())?;
    let items = lab.items(&learner.model, k)?;
    let mut cfg = lab.cfg.task_config(c.kind());
    if let Some(g) = gcns {
        cfg = GcnsConfig {
            p: if c.kind() == ConceptKind::Style { lab.cfg.style_p } else { g.p },
            ..g.clone()
        };
    }
    let spec = TaskSpec {
        task_id: t + 1,
        concept_token: c.token(),
        concept_id: id,
        seed: rng::stream_seed(lab.seed, &format!("task{}", t + 1)),
    };
    let report = learner.learn(&spec, &items, &cfg)?;
    log::info!("{} task {} ({}) final loss {:.4}", learner.kind, t + 1, c.name, report.final_loss);
    Ok(report)
}

/// Scores the concepts `learned` (in learn order) under `model`. The last
/// one is new: its score is appended to `learn_time`, the archive every
/// forgetting delta is measured against.
pub fn score_learned(lab: &Lab, model: &VarModel, learned: &[usize], learn_time: &mut Vec<f64>) -> Result<Vec<ConceptScore>> {
    if learn_time.len() + 1 != learned.len() {
        return Err(Error::State(format!(
            "{} archived learn-time scores for {} learned concepts",
            learn_time.len(),
            learned.len()
        )));
    }
    let mut scores = Vec::new();
    for (u, &k) in learned.iter().enumerate() {
        let (subject, prompt) = lab.score_concept(model, k)?;
        if u == learn_time.len() {
            learn_time.push(subject);
        }
        scores.push(ConceptScore {
            concept: lab.concepts[k].name.clone(),
            subject_fidelity: subject,
            prompt_fidelity: prompt,
            forgetting_delta: subject - learn_time[u],
        });
    }
    Ok(scores)
}

/// Scores every concept in `learned` against archived `learn_time` scores
/// without adding new ones.
pub fn rescore(lab: &Lab, model: &VarModel, learned: &[usize], learn_time: &[f64]) -> Result<Vec<ConceptScore>> {
    if learn_time.len() != learned.len() {
        return Err(Error::State("learn-time archive does not match the learned concepts".into()));
    }
    learned
        .iter()
        .zip(learn_time)
        .map(|(&k, &at_learn)| {
            let (subject, prompt) = lab.score_concept(model, k)?;
            Ok(ConceptScore {
                concept: lab.concepts[k].name.clone(),
                subject_fidelity: subject,
                prompt_fidelity: prompt,
                forgetting_delta: subject - at_learn,
            })
        })
        .collect()
}

/// Trains the tasks of `seq` in order with `method`, scoring all learned
/// concepts after each one. `gcns` overrides the lab's trainer settings.
pub fn run_sequence(lab: &Lab, seq: &TaskSequence, method: BaselineKind, gcns: Option<&GcnsConfig>) -> Result<SequenceResult> {
    Ok(run_sequence_with_learner(lab, seq, method, gcns)?.0)
}

/// [`run_sequence`] that also hands back the trained learner.
pub fn run_sequence_with_learner(
    lab: &Lab,
    seq: &TaskSequence,
    method: BaselineKind,
    gcns: Option<&GcnsConfig>,
) -> Result<(SequenceResult, Learner)> {
    let mut learner = Learner::new(method, &lab.base, &lab.cfg.baselines, rng::stream_seed(lab.seed, "adapter"))?;
    let mut learn_time: Vec<f64> = Vec::new();
    let mut records = Vec::new();
    let mut reports = Vec::new();
    let mut fusion_max: f64 = 0.0;
    for (t, &k) in seq.order.iter().enumerate() {
        let start = std::time::Instant::now();
        let report = learn_concept(lab, &mut learner, t, k, gcns)?;
        let (model, fusion) = learner.inference_model()?;
        fusion_max = fusion_max.max(fusion);
        let scores = score_learned(lab, &model, &seq.order[..=t], &mut learn_time)?;
        records.push(MetricsRecord {
            method,
            sequence: seq.label.clone(),
            seed: lab.seed,
            after_task: t + 1,
            learned: lab.concepts[k].name.clone(),
            scores,
            storage_bytes: learner.bytes_per_concept() * (t + 1),
            model_hash: model.store.content_hash(),
            fusion_seconds: fusion,
            seconds: start.elapsed().as_secs_f64(),
        });
        reports.push(report);
    }
    if records.is_empty() {
        return Err(Error::Config("task sequence is empty".into()));
    }
    let result = SequenceResult {
        method,
        sequence: seq.clone(),
        records,
        reports,
        bytes_per_concept: learner.bytes_per_concept(),
        mask_bytes_per_concept: if method == BaselineKind::Gcns { learner.bytes_per_concept() } else { 0 },
        fusion_seconds: fusion_max,
    };
    Ok((result, learner))
}
