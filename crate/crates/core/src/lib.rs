//! Core library: autodiff engine, ensemble model, curriculum and
//! distillation losses, signal preprocessing, Riemannian alignment,
//! synthetic corpus generation, and the training loop.

pub mod checkpoint;
pub mod curriculum;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod corpus;
pub mod model;
pub mod optim;
pub mod signal;
pub mod spd;
pub mod splits;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use curriculum::{beta, loss_subj, Schedule, SubjectPartition};
pub use distill::{loss_distill, loss_total, pseudolabel, CompositeLoss, DistillConfig, LossBreakdown};
pub use error::{Error, Result};
pub use gradcheck::{run_gradcheck, OpReport, FD_TOLERANCE};
pub use graph::{BnState, Graph, Mode, Var};
pub use model::{fuse_scores, EnsembleNetwork, Extractor, ExtractorConfig, ForwardOutput, NetVars};
pub use optim::{sgd_step, SgdState};
pub use corpus::{read_corpus, read_manifest, write_corpus, Corpus, CorpusManifest};
pub use signal::{bandpass, crop_trials, notch_filter, resample, RawRecording, Trial};
pub use spd::{
    align, align_corpus, align_sessions, covariance, spd_mean, AlignScope, MeanMode, SpdMatrix,
};
pub use splits::{split_cv, split_loso, SplitMode, SplitPlan};
pub use suite::{
    ablate, ablation_csv, report_csv, run_suite, suite_plans, AblationTable, SuiteMode,
    SuiteReport, SuiteRow,
};
pub use synth::{generate, GeneratorSpec};
pub use tensor::{argmax, Tensor};
pub use train::{
    evaluate, train, trials_for, EpochMetrics, Evaluation, LossMode, RunManifest, TrainConfig,
};
