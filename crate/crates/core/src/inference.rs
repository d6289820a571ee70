//! Nearest-neighbour index over training representations and the fused
//! prediction rule `γ·p_nn + (1 − γ)·p`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{self, IntentDataset};
use crate::error_channel::{self, sample_alternatives, CalibrationSettings, ErrorChannel, ErrorModel};
use crate::model::SluModel;
use crate::numerics::{argmax, softmax, z_score_normalize};
use crate::rng;
use crate::{math, Error, Result};

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_OVERSAMPLE: usize = 16;

/// Flat `len × dim` matrix of representations with a class per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NNIndex {
    pub dim: usize,
    pub num_classes: usize,
    pub vectors: Vec<f64>,
    pub labels: Vec<usize>,
}

impl NNIndex {
    /// Validates shapes and that every class has an entry.
    pub fn new(dim: usize, num_classes: usize, vectors: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let index = NNIndex {
            dim,
            num_classes,
            vectors,
            labels,
        };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.vectors.len() != self.labels.len() * self.dim {
            return Err(Error::shape(
                self.labels.len() * self.dim,
                self.vectors.len(),
                "index vectors",
            ));
        }
        let counts = self.class_counts()?;
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Config(alloc::format!("index has no entry for class {c}")));
        }
        if !self.vectors.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("index holds non-finite values".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            *counts.get_mut(l).ok_or(Error::Index {
                index: l,
                len: self.num_classes,
            })? += 1;
        }
        Ok(counts)
    }
}

/// Per-utterance record of what the index kept.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedUtterance {
    /// Distances of every sampled alternative to the clean vector, in draw
    /// order.
    pub candidate_distances: Vec<f64>,
    /// Positions into `candidate_distances` that were kept.
    pub kept: Vec<usize>,
}

/// Encode every training utterance and, for each, the `k` of up to
/// `oversample` distinct channel alternatives whose representations lie
/// closest to the clean one.
///
/// Each utterance draws from its own stream derived from `seed`, so an
/// utterance's candidates do not depend on the others.
pub fn build_index<M: ErrorModel + ?Sized>(
    model: &SluModel,
    train: &IntentDataset,
    channel: &M,
    k: usize,
    oversample: usize,
    seed: u64,
) -> Result<NNIndex> {
    build_index_traced(model, train, channel, k, oversample, seed).map(|(index, _)| index)
}

pub fn build_index_traced<M: ErrorModel + ?Sized>(
    model: &SluModel,
    train: &IntentDataset,
    channel: &M,
    k: usize,
    oversample: usize,
    seed: u64,
) -> Result<(NNIndex, Vec<IndexedUtterance>)> {
    if train.is_empty() {
        return Err(Error::Config("cannot index an empty train split".into()));
    }
    if oversample < k {
        return Err(Error::Config(alloc::format!(
            "oversample ({oversample}) must be at least k ({k})"
        )));
    }
    let dim = model.params.config.repr_dim();
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    let mut trace = Vec::with_capacity(train.len());
    for (i, u) in train.utterances.iter().enumerate() {
        let clean = model.represent(&u.tokens)?;
        vectors.extend_from_slice(&clean);
        labels.push(u.label);
        let mut rng = rng::seeded(rng::derive_seed(seed, i as u64));
        let alts = if k == 0 {
            Vec::new()
        } else {
            sample_alternatives(&u.tokens, channel, oversample, &mut rng)
        };
        let mut encoded = Vec::with_capacity(alts.len());
        for alt in &alts {
            let r = model.represent(alt)?;
            encoded.push((math::euclidean(&r, &clean), r));
        }
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.sort_by(|&a, &b| encoded[a].0.total_cmp(&encoded[b].0).then(a.cmp(&b)));
        order.truncate(k);
        for &j in &order {
            vectors.extend_from_slice(&encoded[j].1);
            labels.push(u.label);
        }
        trace.push(IndexedUtterance {
            candidate_distances: encoded.iter().map(|(d, _)| *d).collect(),
            kept: order,
        });
    }
    let index = NNIndex::new(dim, train.num_classes, vectors, labels).map_err(|e| match e {
        Error::Config(msg) => Error::Config(alloc::format!("{msg}; the train split must cover all classes")),
        other => other,
    })?;
    Ok((index, trace))
}

/// Minimum euclidean distance from `r` to each class's entries.
pub fn nn_class_scores(index: &NNIndex, r: &[f64]) -> Result<Vec<f64>> {
    if r.len() != index.dim {
        return Err(Error::shape(index.dim, r.len(), "query vector"));
    }
    let mut best = vec![f64::INFINITY; index.num_classes];
    for (row, &label) in index.vectors.chunks_exact(index.dim).zip(&index.labels) {
        let mut sq = 0.0;
        for (a, b) in row.iter().zip(r) {
            sq += (a - b) * (a - b);
        }
        if sq < best[label] {
            best[label] = sq;
        }
    }
    Ok(best.into_iter().map(math::sqrt).collect())
}

/// Combine per-class NN distances and classifier logits. Both sides are
/// z-scored then softmaxed; distances are negated first.
pub fn fuse(distances: &[f64], logits: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if distances.len() != logits.len() {
        return Err(Error::shape(logits.len(), distances.len(), "class distances"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidInput(alloc::format!("gamma {gamma} outside [0, 1]")));
    }
    let neg: Vec<f64> = distances.iter().map(|d| -d).collect();
    let p_nn = softmax(&z_score_normalize(&neg)?)?;
    let p = softmax(&z_score_normalize(logits)?)?;
    Ok(p_nn
        .iter()
        .zip(&p)
        .map(|(a, b)| gamma * a + (1.0 - gamma) * b)
        .collect())
}

/// Fused class distribution for a word sequence.
pub fn fuse_predict<S: AsRef<str>>(model: &SluModel, index: &NNIndex, tokens: &[S], gamma: f64) -> Result<Vec<f64>> {
    let r = model.represent(tokens)?;
    let logits = model.logits_from_repr(&r)?;
    fuse(&nn_class_scores(index, &r)?, &logits, gamma)
}

/// Per-utterance distances and logits, so several `γ` can be scored without
/// re-encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub distances: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ScoredSet {
    /// Score each utterance's observed tokens.
    pub fn new(model: &SluModel, index: &NNIndex, ds: &IntentDataset) -> Result<Self> {
        let mut distances = Vec::with_capacity(ds.len());
        let mut logits = Vec::with_capacity(ds.len());
        for u in &ds.utterances {
            let r = model.represent(u.observed())?;
            distances.push(nn_class_scores(index, &r)?);
            logits.push(model.logits_from_repr(&r)?);
        }
        Ok(ScoredSet {
            distances,
            logits,
            labels: ds.labels(),
            num_classes: ds.num_classes,
        })
    }

    pub fn predictions(&self, gamma: f64) -> Result<Vec<usize>> {
        self.distances
            .iter()
            .zip(&self.logits)
            .map(|(d, l)| fuse(d, l, gamma).map(|p| argmax(&p)))
            .collect()
    }

    /// `(accuracy, macro_f1)` at `gamma`.
    pub fn metrics(&self, gamma: f64) -> Result<(f64, f64)> {
        let preds = self.predictions(gamma)?;
        Ok((
            data::accuracy(&preds, &self.labels)?,
            data::macro_f1(&preds, &self.labels, self.num_classes)?,
        ))
    }
}

/// `{0, 0.1, …, 1.0}`.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Metrics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Corpus WER of the evaluated text against the clean tokens.
    pub wer: f64,
    /// Channel noise level used, if the set was corrupted here.
    pub noise_level: Option<f64>,
}

/// Request to corrupt a split at a target WER before scoring.
#[derive(Debug, Clone)]
pub struct Corruption<'a> {
    pub channel: &'a ErrorChannel,
    pub target_wer: f64,
    pub seed: u64,
    pub settings: CalibrationSettings,
}

/// Copy of `ds` whose hypotheses are channel samples at a noise level
/// calibrated (on `ds` itself) to `target_wer`. Returns the copy and the
/// noise level. A target of zero yields a verbatim copy.
pub fn corrupt_at_wer(
    ds: &IntentDataset,
    channel: &ErrorChannel,
    target_wer: f64,
    seed: u64,
    settings: &CalibrationSettings,
) -> Result<(IntentDataset, f64)> {
    if target_wer == 0.0 {
        let mut out = ds.clone();
        out.utterances.iter_mut().for_each(|u| u.asr_tokens = Some(u.tokens.clone()));
        return Ok((out, 0.0));
    }
    let corpus: Vec<Vec<String>> = ds.utterances.iter().map(|u| u.tokens.clone()).collect();
    let noise = error_channel::calibrate_noise_with(channel, &corpus, target_wer, 0.005, settings)?;
    let ch = channel.with_noise_level(noise)?;
    let mut rng = rng::seeded(seed);
    Ok((ds.corrupted(&ch, &mut rng), noise))
}

/// Fused-prediction metrics on `test`. With a corruption request the split
/// is first re-corrupted at the calibrated level; otherwise each
/// utterance's observed tokens are used.
pub fn evaluate(
    model: &SluModel,
    index: &NNIndex,
    test: &IntentDataset,
    gamma: f64,
    corruption: Option<&Corruption<'_>>,
) -> Result<Evaluation> {
    if test.num_classes != model.params.config.num_classes || index.num_classes != test.num_classes {
        return Err(Error::Config(alloc::format!(
            "class counts disagree: test {}, model {}, index {}",
            test.num_classes,
            model.params.config.num_classes,
            index.num_classes
        )));
    }
    let (ds, noise_level) = match corruption {
        Some(c) => {
            let (ds, noise) = corrupt_at_wer(test, c.channel, c.target_wer, c.seed, &c.settings)?;
            (ds, Some(noise))
        }
        None => (test.clone(), None),
    };
    let wer = observed_wer(&ds)?;
    let (accuracy, macro_f1) = ScoredSet::new(model, index, &ds)?.metrics(gamma)?;
    Ok(Evaluation {
        accuracy,
        macro_f1,
        wer,
        noise_level,
    })
}

/// Corpus WER of observed tokens against clean tokens.
pub fn observed_wer(ds: &IntentDataset) -> Result<f64> {
    error_channel::corpus_wer(ds.utterances.iter().map(|u| (u.tokens.as_slice(), u.observed())))
}
