//! PLDA speaker verification with weakly labeled training data.

pub mod backend;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod labeling;
pub mod plda;
pub mod preprocess;
pub mod synth;

pub use error::{Error, Result};
pub use eval::{compute_eer, EvalReport, ScoreSet, SeedStats, Summary};
pub use io::{IVector, LabeledDataset, ModelFile, Trial, TrialList, UtteranceRecord};
pub use labeling::{derive_weak_labels, pool_datasets, quality_report, WeakLabeling};
pub use plda::{train_em, PldaModel, Scorer, SigmaMode, TrainConfig};
pub use preprocess::Preprocessor;
pub use synth::{
    generate_corpus, make_eval_split, sample_truth_model, SynthConfig, SynthCorpus, World,
};
