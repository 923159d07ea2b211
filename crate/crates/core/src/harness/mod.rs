//! Desk-scale experiment harness: procedural data, pretraining, baselines,
//! the continual sequence runner, ablation grids and proxy metrics.
//!
//! Every random stream derives from one root seed through named substreams,
//! so a cell's numbers depend only on the seed and the configuration.

mod ablate;
mod baselines;
mod data;
mod pretrain;
mod proxy;
mod run;

pub use ablate::{
    grid_cells, in_box_fidelity, intervention_comparison, intervention_spec, resource_report, run_cell, run_cells,
    write_report, CellOutcome, CellResult, CellSpec, Components, Grid, InterventionResult, ResourceRow,
    INTERVENTION_SAMPLES, LAMBDAS,
};
pub use baselines::{batch_stream_hash, BaselineConfig, BaselineKind, LearnReport, Learner, LowRankAdapter};
pub use data::{
    background_rgb, base_corpus, color_rgb, generate_concepts, ConceptDataset, ConceptKind, ConceptSuite, Hatching,
    Scene, Signature, TaskSequence,
};
pub use pretrain::{corpus_items, mean_nll, pretrain, PretrainConfig, Pretrained};
pub use proxy::{
    classify_background, cosine, prompt_background, proxy_prompt_fidelity, proxy_subject_fidelity, ProxyExtractor,
};
pub use run::{
    learn_concept, rescore, run_sequence, run_sequence_with_learner, score_learned, ConceptScore, Lab, LabConfig, MetricsRecord, SequenceResult, SuiteConfig,
};
