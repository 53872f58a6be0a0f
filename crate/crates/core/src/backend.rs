//! Preprocessing and PLDA bundled into one trainable, scorable backend.

use crate::error::{Error, Result};
use crate::eval::ScoreSet;
use crate::io::{IVector, LabeledDataset, ModelFile, TrialList};
use crate::plda::{score_cosine_batch, train_em, Scorer, TrainConfig};
use crate::preprocess::Preprocessor;

/// A trained backend and the log-likelihood after each EM iteration.
#[derive(Debug, Clone)]
pub struct TrainedBackend {
    pub model: ModelFile,
    pub log_likelihoods: Vec<f64>,
}

/// Fits the preprocessor on `data`, then trains PLDA on the preprocessed
/// vectors.
pub fn train_backend(
    data: &LabeledDataset,
    whiten: bool,
    config: &TrainConfig,
) -> Result<TrainedBackend> {
    let pre = Preprocessor::fit(data.vectors(), whiten)?;
    train_backend_with(data, pre, config)
}

/// Trains PLDA behind an already fitted preprocessor.
pub fn train_backend_with(
    data: &LabeledDataset,
    pre: Preprocessor,
    config: &TrainConfig,
) -> Result<TrainedBackend> {
    let processed = data.map_vectors(|v| pre.apply(v))?;
    let out = train_em(&processed, config)?;
    Ok(TrainedBackend {
        model: ModelFile {
            plda: out.model,
            preprocess: Some(pre),
        },
        log_likelihoods: out.log_likelihoods,
    })
}

/// Unsupervised adaptation: keeps the PLDA model and re-fits the centering
/// on unlabeled in-domain vectors, plus the whitener if the model has one.
pub fn adapt(model: &ModelFile, in_domain: &[IVector]) -> Result<ModelFile> {
    let whiten = model
        .preprocess
        .as_ref()
        .is_some_and(|p| p.whitener().is_some());
    Ok(ModelFile {
        plda: model.plda.clone(),
        preprocess: Some(Preprocessor::fit(in_domain, whiten)?),
    })
}

/// A model ready for scoring.
#[derive(Debug, Clone)]
pub struct Backend {
    preprocess: Option<Preprocessor>,
    scorer: Scorer,
}

impl Backend {
    pub fn new(model: &ModelFile) -> Result<Self> {
        if let Some(p) = &model.preprocess {
            if p.dim() != model.plda.dim() {
                return Err(Error::Dimension {
                    expected: model.plda.dim(),
                    got: p.dim(),
                });
            }
        }
        Ok(Self {
            preprocess: model.preprocess.clone(),
            scorer: model.plda.scorer()?,
        })
    }

    pub fn score_trials(&self, trials: &TrialList, vectors: &[IVector]) -> Result<ScoreSet> {
        match &self.preprocess {
            Some(p) => self.scorer.score_trials(trials, &p.apply_all(vectors)?),
            None => self.scorer.score_trials(trials, vectors),
        }
    }
}

/// Cosine scoring on the raw vectors.
pub fn cosine_scores(trials: &TrialList, vectors: &[IVector]) -> Result<ScoreSet> {
    score_cosine_batch(trials, vectors)
}
