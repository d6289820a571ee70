//! Pair sampling, the pairwise and fine-tuning phases, baseline
//! cross-entropy training, and early stopping.
//!
//! Every phase is driven by [`run_phase`], which evaluates the model before
//! training (epoch 0) and after each epoch, and restores the parameters of
//! the best trained epoch.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{self, IntentDataset, Vocab};
use crate::error_channel::{hallucinate, ErrorChannel, ErrorModel};
use crate::losses::{self, LossHyperparams, PairInstance};
use crate::model::{
    classify, classify_backward, classify_traced, encode, encode_backward, encode_traced, init_params,
    ModelConfig, ModelParams, SluModel, ENCODER_BLOCKS,
};
use crate::numerics::{argmax, cross_entropy, softmax, OptimizerState};
use crate::rng::{self, Rng};
use crate::{math, Error, Result};

/// The seven training schedules, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Ce,
    CeHalluc,
    L2Only,
    Pairwise,
    PairwiseHalluc,
    PairwiseFt,
    PairwiseHallucFt,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::Ce,
        TrainMode::CeHalluc,
        TrainMode::L2Only,
        TrainMode::Pairwise,
        TrainMode::PairwiseHalluc,
        TrainMode::PairwiseFt,
        TrainMode::PairwiseHallucFt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Ce => "ce",
            TrainMode::CeHalluc => "ce_halluc",
            TrainMode::L2Only => "l2_only",
            TrainMode::Pairwise => "pairwise",
            TrainMode::PairwiseHalluc => "pairwise_halluc",
            TrainMode::PairwiseFt => "pairwise_ft",
            TrainMode::PairwiseHallucFt => "pairwise_halluc_ft",
        }
    }

    /// 1-based row number.
    pub fn number(self) -> usize {
        TrainMode::ALL.iter().position(|m| *m == self).unwrap_or(0) + 1
    }

    pub fn description(self) -> &'static str {
        match self {
            TrainMode::Ce => "cross-entropy",
            TrainMode::CeHalluc => "cross-entropy + hallucination",
            TrainMode::L2Only => "L2 only",
            TrainMode::Pairwise => "pairwise",
            TrainMode::PairwiseHalluc => "pairwise + hallucination",
            TrainMode::PairwiseFt => "pairwise + fine-tuning",
            TrainMode::PairwiseHallucFt => "pairwise + hallucination + fine-tuning",
        }
    }

    pub fn is_pairwise(self) -> bool {
        self >= TrainMode::Pairwise
    }

    pub fn hallucinates(self) -> bool {
        matches!(
            self,
            TrainMode::CeHalluc | TrainMode::PairwiseHalluc | TrainMode::PairwiseHallucFt
        )
    }

    pub fn fine_tunes(self) -> bool {
        matches!(self, TrainMode::PairwiseFt | TrainMode::PairwiseHallucFt)
    }

    /// The mode whose first phase this mode shares.
    pub fn pretraining_mode(self) -> TrainMode {
        match self {
            TrainMode::PairwiseFt => TrainMode::Pairwise,
            TrainMode::PairwiseHallucFt => TrainMode::PairwiseHalluc,
            m => m,
        }
    }
}

impl core::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown training mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Accuracy,
    MacroF1,
}

/// Layer sizes; vocabulary and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub mlp_dim: usize,
    pub dropout_rate: f64,
    pub max_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::new(2, 2);
        ModelShape {
            embed_dim: c.embed_dim,
            hidden_dim: c.hidden_dim,
            attention_dim: c.attention_dim,
            mlp_dim: c.mlp_dim,
            dropout_rate: c.dropout_rate,
            max_len: c.max_len,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            attention_dim: self.attention_dim,
            mlp_dim: self.mlp_dim,
            num_classes,
            dropout_rate: self.dropout_rate,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Used by every phase that starts from initialisation.
    pub lr_pairwise: f64,
    pub lr_finetune: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub pos_pair_fraction: f64,
    pub loss_hp: LossHyperparams,
    /// Prefer stored hypotheses over channel samples when fine-tuning.
    pub use_real_asr: bool,
    pub selection_metric: SelectionMetric,
    pub model: ModelShape,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Ce,
            lr_pairwise: 1e-3,
            lr_finetune: 8e-5,
            patience: 6,
            batch_size: 32,
            max_epochs: 100,
            pos_pair_fraction: 0.5,
            loss_hp: LossHyperparams::default(),
            use_real_asr: false,
            selection_metric: SelectionMetric::Accuracy,
            model: ModelShape::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr_pairwise > 0.0 && self.lr_finetune > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be >= 1".into());
        }
        if !(self.pos_pair_fraction > 0.0 && self.pos_pair_fraction <= 1.0) {
            return bad(alloc::format!(
                "pos_pair_fraction must be in (0, 1], got {}",
                self.pos_pair_fraction
            ));
        }
        self.loss_hp.validate()?;
        self.model.config(2, 2).validate()
    }

    /// Hallucination probability of the first phase.
    pub fn epsilon(&self) -> f64 {
        if self.mode.hallucinates() {
            self.loss_hp.epsilon_halluc
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevScore {
    pub accuracy: f64,
    pub macro_f1: f64,
}

impl DevScore {
    fn get(&self, metric: SelectionMetric) -> f64 {
        match metric {
            SelectionMetric::Accuracy => self.accuracy,
            SelectionMetric::MacroF1 => self.macro_f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss; absent for the pre-training evaluation.
    pub train_loss: Option<f64>,
    pub dev_accuracy: f64,
    pub dev_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseHistory {
    pub phase: String,
    /// Evaluation before the first update (epoch 0).
    pub initial: EpochRecord,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl PhaseHistory {
    pub fn record(&self, epoch: usize) -> Option<&EpochRecord> {
        if epoch == 0 {
            Some(&self.initial)
        } else {
            self.epochs.get(epoch - 1)
        }
    }

    pub fn best(&self) -> &EpochRecord {
        self.record(self.best_epoch).unwrap_or(&self.initial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub mode: TrainMode,
    pub phases: Vec<PhaseHistory>,
}

/// Draws pairs for pairwise training.
///
/// A pair is positive with probability `pos_fraction`. Positives pick a class
/// uniformly, then two distinct utterances of it (a singleton class pairs an
/// utterance with itself). Negatives pick `x_i` uniformly over utterances and
/// `x_j` from a uniformly chosen different class.
#[derive(Debug, Clone)]
pub struct PairSampler {
    groups: Vec<Vec<usize>>,
    present: Vec<usize>,
    labels: Vec<usize>,
    pos_fraction: f64,
}

impl PairSampler {
    pub fn new(ds: &IntentDataset, pos_fraction: f64) -> Result<Self> {
        if !(pos_fraction > 0.0 && pos_fraction <= 1.0) {
            return Err(Error::Config(alloc::format!(
                "positive pair fraction must be in (0, 1], got {pos_fraction}"
            )));
        }
        let groups = ds.by_class();
        let present: Vec<usize> = (0..groups.len()).filter(|&c| !groups[c].is_empty()).collect();
        if present.len() < 2 {
            return Err(Error::Config(
                "pair sampling needs at least two classes with utterances".into(),
            ));
        }
        Ok(PairSampler {
            groups,
            present,
            labels: ds.labels(),
            pos_fraction,
        })
    }

    pub fn sample(&self, rng: &mut Rng) -> PairInstance {
        if rng::uniform(rng) < self.pos_fraction {
            let c = self.present[rng::below(rng, self.present.len())];
            let g = &self.groups[c];
            let i = rng::below(rng, g.len());
            let j = if g.len() == 1 {
                i
            } else {
                // uniform over the other members
                (i + 1 + rng::below(rng, g.len() - 1)) % g.len()
            };
            PairInstance::new(g[i], c, g[j], c)
        } else {
            let x_i = rng::below(rng, self.labels.len());
            let y_i = self.labels[x_i];
            let pos = self.present.iter().position(|&c| c == y_i).unwrap_or(0);
            let k = (pos + 1 + rng::below(rng, self.present.len() - 1)) % self.present.len();
            let y_j = self.present[k];
            let g = &self.groups[y_j];
            PairInstance::new(x_i, y_i, g[rng::below(rng, g.len())], y_j)
        }
    }

    pub fn batch(&self, batch_size: usize, rng: &mut Rng) -> Vec<PairInstance> {
        (0..batch_size).map(|_| self.sample(rng)).collect()
    }
}

/// `num_batches` batches of `batch_size` pairs.
pub fn make_pairs(
    ds: &IntentDataset,
    batch_size: usize,
    pos_fraction: f64,
    num_batches: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<PairInstance>>> {
    let sampler = PairSampler::new(ds, pos_fraction)?;
    Ok((0..num_batches).map(|_| sampler.batch(batch_size, rng)).collect())
}

/// Inputs shared by the gradient computations.
pub struct StepContext<'a, M: ErrorModel + ?Sized> {
    pub data: &'a IntentDataset,
    pub vocab: &'a Vocab,
    pub channel: &'a M,
    pub hp: &'a LossHyperparams,
}

impl<'a, M: ErrorModel + ?Sized> StepContext<'a, M> {
    fn ids(&self, index: usize, epsilon: f64, rng: &mut Rng) -> Result<Vec<usize>> {
        let u = self
            .data
            .utterances
            .get(index)
            .ok_or(Error::Index {
                index,
                len: self.data.len(),
            })?;
        if epsilon > 0.0 {
            Ok(self.vocab.encode(&hallucinate(&u.tokens, self.channel, epsilon, rng)))
        } else {
            Ok(self.vocab.encode(&u.tokens))
        }
    }
}

/// Batch-mean loss components of one pairwise step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseLoss {
    pub total: f64,
    pub contrastive: f64,
    pub mixup: f64,
}

const MIN_REPR_NORM: f64 = 1e-12;

/// Pairwise loss and its gradient, written into `grads` (overwritten).
///
/// The classifier only sees the mixup term; with `β = 1` it is never run and
/// its gradient stays zero.
pub fn pairwise_gradient<M: ErrorModel + ?Sized>(
    params: &ModelParams,
    batch: &[PairInstance],
    ctx: &StepContext<'_, M>,
    epsilon: f64,
    rng: &mut Rng,
    grads: &mut ModelParams,
) -> Result<PairwiseLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty pair batch".into()));
    }
    grads.fill_zero();
    let hp = ctx.hp;
    let beta = hp.beta_weight;
    let num_classes = params.config.num_classes;
    let (mut sum_con, mut sum_mix) = (0.0, 0.0);
    for pair in batch {
        let ids_i = ctx.ids(pair.x_i, epsilon, rng)?;
        let ids_j = ctx.ids(pair.x_j, epsilon, rng)?;
        let (rep_i, trace_i) = encode_traced(&ids_i, params, true, rng)?;
        let (rep_j, trace_j) = encode_traced(&ids_j, params, true, rng)?;
        let (r_i, r_j) = (&rep_i.r, &rep_j.r);
        let n = r_i.len();

        let (l_con, mut d_ri, mut d_rj) = if math::l2_norm(r_i) < MIN_REPR_NORM || math::l2_norm(r_j) < MIN_REPR_NORM {
            // dropout zeroed a whole representation; no direction to push
            (0.0, vec![0.0; n], vec![0.0; n])
        } else {
            losses::contrastive_loss_grad(r_i, r_j, pair.y_pair, hp)?
        };
        d_ri.iter_mut().chain(d_rj.iter_mut()).for_each(|g| *g *= beta);
        sum_con += l_con;

        if beta < 1.0 {
            let lambda = losses::sample_lambda(hp.alpha, rng)?;
            let (r_mix, y_mix) = losses::mixup(r_i, r_j, pair.y_i, pair.y_j, num_classes, lambda)?;
            let (logits, ctrace) = classify_traced(&r_mix, params, true, rng)?;
            let (l_mix, mut d_logits) = losses::mixup_loss_grad(&y_mix, &logits)?;
            d_logits.iter_mut().for_each(|g| *g *= 1.0 - beta);
            let d_mix = classify_backward(params, &ctrace, &d_logits, grads);
            for k in 0..n {
                d_ri[k] += lambda * d_mix[k];
                d_rj[k] += (1.0 - lambda) * d_mix[k];
            }
            sum_mix += l_mix;
        }
        encode_backward(params, &trace_i, &d_ri, grads);
        encode_backward(params, &trace_j, &d_rj, grads);
    }
    let b = batch.len() as f64;
    grads.scale(1.0 / b);
    let (contrastive, mixup) = (sum_con / b, sum_mix / b);
    Ok(PairwiseLoss {
        total: losses::pairwise_loss_l1(contrastive, mixup, beta),
        contrastive,
        mixup,
    })
}

/// Batch-mean fine-tuning loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2Loss {
    pub total: f64,
    pub ce_clean: f64,
    pub ce_err: f64,
    pub kl: f64,
}

/// Errorful side of an utterance: its stored hypothesis when allowed, else a
/// channel sample.
fn errorful<M: ErrorModel + ?Sized>(
    ctx: &StepContext<'_, M>,
    index: usize,
    use_real_asr: bool,
    rng: &mut Rng,
) -> Vec<usize> {
    let u = &ctx.data.utterances[index];
    match &u.asr_tokens {
        Some(asr) if use_real_asr => ctx.vocab.encode(asr),
        _ => ctx.vocab.encode(&ctx.channel.corrupt(&u.tokens, rng)),
    }
}

/// Fine-tuning loss and gradient over utterance indices. With `η = 0` the
/// errorful branch is skipped entirely, which makes this a plain
/// cross-entropy step on clean text.
pub fn finetune_gradient<M: ErrorModel + ?Sized>(
    params: &ModelParams,
    batch: &[usize],
    ctx: &StepContext<'_, M>,
    use_real_asr: bool,
    rng: &mut Rng,
    grads: &mut ModelParams,
) -> Result<L2Loss> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty utterance batch".into()));
    }
    grads.fill_zero();
    let eta = ctx.hp.eta;
    let mut acc = L2Loss {
        total: 0.0,
        ce_clean: 0.0,
        ce_err: 0.0,
        kl: 0.0,
    };
    for &index in batch {
        let clean_ids = ctx.ids(index, 0.0, rng)?;
        let y = ctx.data.utterances[index].label;
        let (rep_c, etrace_c) = encode_traced(&clean_ids, params, true, rng)?;
        let (logits_c, ctrace_c) = classify_traced(&rep_c.r, params, true, rng)?;
        if eta == 0.0 {
            let p = softmax(&logits_c)?;
            let ce = cross_entropy(&p, y)?;
            let d: Vec<f64> = p.iter().enumerate().map(|(k, pk)| pk - f64::from(k == y)).collect();
            let d_r = classify_backward(params, &ctrace_c, &d, grads);
            encode_backward(params, &etrace_c, &d_r, grads);
            acc.total += ce;
            acc.ce_clean += ce;
            continue;
        }
        let err_ids = errorful(ctx, index, use_real_asr, rng);
        let (rep_e, etrace_e) = encode_traced(&err_ids, params, true, rng)?;
        let (logits_e, ctrace_e) = classify_traced(&rep_e.r, params, true, rng)?;
        let l = losses::finetune_loss_l2_grad(&logits_c, &logits_e, y, eta)?;
        let d_rc = classify_backward(params, &ctrace_c, &l.d_clean, grads);
        encode_backward(params, &etrace_c, &d_rc, grads);
        let d_re = classify_backward(params, &ctrace_e, &l.d_err, grads);
        encode_backward(params, &etrace_e, &d_re, grads);
        acc.total += l.total;
        acc.ce_clean += l.ce_clean;
        acc.ce_err += l.ce_err;
        acc.kl += l.kl;
    }
    let b = batch.len() as f64;
    grads.scale(1.0 / b);
    Ok(L2Loss {
        total: acc.total / b,
        ce_clean: acc.ce_clean / b,
        ce_err: acc.ce_err / b,
        kl: acc.kl / b,
    })
}

/// Cross-entropy loss and gradient; each input is hallucinated with
/// probability `epsilon`.
pub fn ce_gradient<M: ErrorModel + ?Sized>(
    params: &ModelParams,
    batch: &[usize],
    ctx: &StepContext<'_, M>,
    epsilon: f64,
    rng: &mut Rng,
    grads: &mut ModelParams,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty utterance batch".into()));
    }
    grads.fill_zero();
    let mut total = 0.0;
    for &index in batch {
        let ids = ctx.ids(index, epsilon, rng)?;
        let y = ctx.data.utterances[index].label;
        let (rep, etrace) = encode_traced(&ids, params, true, rng)?;
        let (logits, ctrace) = classify_traced(&rep.r, params, true, rng)?;
        let p = softmax(&logits)?;
        total += cross_entropy(&p, y)?;
        let d: Vec<f64> = p.iter().enumerate().map(|(k, pk)| pk - f64::from(k == y)).collect();
        let d_r = classify_backward(params, &ctrace, &d, grads);
        encode_backward(params, &etrace, &d_r, grads);
    }
    let b = batch.len() as f64;
    grads.scale(1.0 / b);
    Ok(total / b)
}

/// Separate Adam states for the encoder (θ) and the classifier (φ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub encoder: OptimizerState,
    pub classifier: OptimizerState,
}

impl Optimizers {
    pub fn new(params: &ModelParams) -> Self {
        Optimizers {
            encoder: OptimizerState::new(params.encoder_len()),
            classifier: OptimizerState::new(params.classifier_len()),
        }
    }

    /// Update the encoder, and the classifier only if `update_classifier`.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelParams,
        lr: f64,
        update_classifier: bool,
    ) -> Result<()> {
        let mut pairs = params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .map(|(p, g)| (p.as_mut_slice(), g.as_slice()));
        let encoder: Vec<_> = pairs.by_ref().take(ENCODER_BLOCKS).collect();
        self.encoder.step(encoder, lr)?;
        if update_classifier {
            self.classifier.step(pairs, lr)?;
        }
        Ok(())
    }
}

fn check_finite(
    epoch: usize,
    batch: usize,
    components: &[(&str, f64)],
    params: &ModelParams,
    grads: &ModelParams,
) -> Result<()> {
    let losses_ok = components.iter().all(|(_, v)| v.is_finite());
    if losses_ok && grads.is_finite() && params.is_finite() {
        return Ok(());
    }
    let mut detail = String::new();
    for (i, (name, v)) in components.iter().enumerate() {
        if i > 0 {
            detail.push_str(", ");
        }
        detail.push_str(&alloc::format!("{name}={v}"));
    }
    if !grads.is_finite() {
        detail.push_str("; gradient not finite");
    }
    if !params.is_finite() {
        detail.push_str("; parameters not finite");
    }
    Err(Error::NonFinite { epoch, batch, detail })
}

/// One pairwise update. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn pairwise_train_step<M: ErrorModel + ?Sized>(
    params: &mut ModelParams,
    batch: &[PairInstance],
    ctx: &StepContext<'_, M>,
    epsilon: f64,
    optimizers: &mut Optimizers,
    lr: f64,
    rng: &mut Rng,
    position: (usize, usize),
) -> Result<PairwiseLoss> {
    let mut grads = ModelParams::zeros(&params.config);
    let loss = pairwise_gradient(params, batch, ctx, epsilon, rng, &mut grads)?;
    check_finite(
        position.0,
        position.1,
        &[("l1", loss.total), ("l_con", loss.contrastive), ("l_mix", loss.mixup)],
        params,
        &grads,
    )?;
    optimizers.step(params, &grads, lr, ctx.hp.beta_weight < 1.0)?;
    Ok(loss)
}

/// One fine-tuning update on utterance indices; both groups move.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step<M: ErrorModel + ?Sized>(
    params: &mut ModelParams,
    batch: &[usize],
    ctx: &StepContext<'_, M>,
    use_real_asr: bool,
    optimizers: &mut Optimizers,
    lr: f64,
    rng: &mut Rng,
    position: (usize, usize),
) -> Result<L2Loss> {
    let mut grads = ModelParams::zeros(&params.config);
    let loss = finetune_gradient(params, batch, ctx, use_real_asr, rng, &mut grads)?;
    check_finite(
        position.0,
        position.1,
        &[("l2", loss.total), ("ce_clean", loss.ce_clean), ("ce_err", loss.ce_err), ("kl", loss.kl)],
        params,
        &grads,
    )?;
    optimizers.step(params, &grads, lr, true)?;
    Ok(loss)
}

/// One cross-entropy update.
#[allow(clippy::too_many_arguments)]
pub fn ce_step<M: ErrorModel + ?Sized>(
    params: &mut ModelParams,
    batch: &[usize],
    ctx: &StepContext<'_, M>,
    epsilon: f64,
    optimizers: &mut Optimizers,
    lr: f64,
    rng: &mut Rng,
    position: (usize, usize),
) -> Result<f64> {
    let mut grads = ModelParams::zeros(&params.config);
    let loss = ce_gradient(params, batch, ctx, epsilon, rng, &mut grads)?;
    check_finite(position.0, position.1, &[("ce", loss)], params, &grads)?;
    optimizers.step(params, &grads, lr, true)?;
    Ok(loss)
}

/// Classifier-only predictions for pre-encoded inputs.
pub fn predict_ids(params: &ModelParams, inputs: &[Vec<usize>]) -> Result<Vec<usize>> {
    let mut rng = rng::seeded(0);
    inputs
        .iter()
        .map(|ids| {
            let r = encode(ids, params, false, &mut rng)?.r;
            Ok(argmax(&classify(&r, params, false, &mut rng)?))
        })
        .collect()
}

/// Classifier-only dev evaluation on each utterance's observed tokens.
#[derive(Debug, Clone)]
pub struct DevEvaluator {
    inputs: Vec<Vec<usize>>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl DevEvaluator {
    pub fn new(dev: &IntentDataset, vocab: &Vocab) -> Result<Self> {
        if dev.is_empty() {
            return Err(Error::Config("dev split is empty".into()));
        }
        Ok(DevEvaluator {
            inputs: dev.utterances.iter().map(|u| vocab.encode(u.observed())).collect(),
            labels: dev.labels(),
            num_classes: dev.num_classes,
        })
    }

    pub fn score(&self, params: &ModelParams) -> Result<DevScore> {
        let preds = predict_ids(params, &self.inputs)?;
        Ok(DevScore {
            accuracy: data::accuracy(&preds, &self.labels)?,
            macro_f1: data::macro_f1(&preds, &self.labels, self.num_classes)?,
        })
    }
}

/// Early-stopping driver.
///
/// `evaluate` scores the current parameters; `run_epoch(params, epoch)`
/// trains one epoch and returns its mean loss. Training stops once
/// `patience` epochs pass without a strict improvement of `metric`, and the
/// parameters of the best trained epoch are restored. Epoch 0 is recorded
/// but is not a candidate, so a phase always changes the model.
pub fn run_phase<E, S>(
    name: &str,
    params: &mut ModelParams,
    max_epochs: usize,
    patience: usize,
    metric: SelectionMetric,
    mut evaluate: E,
    mut run_epoch: S,
) -> Result<PhaseHistory>
where
    E: FnMut(&ModelParams) -> Result<DevScore>,
    S: FnMut(&mut ModelParams, usize) -> Result<f64>,
{
    if patience == 0 {
        return Err(Error::Config("patience must be >= 1".into()));
    }
    let score = evaluate(params)?;
    let initial = EpochRecord {
        epoch: 0,
        train_loss: None,
        dev_accuracy: score.accuracy,
        dev_macro_f1: score.macro_f1,
    };
    let mut best_value = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_params = params.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=max_epochs {
        let loss = run_epoch(params, epoch)?;
        let score = evaluate(params)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: Some(loss),
            dev_accuracy: score.accuracy,
            dev_macro_f1: score.macro_f1,
        });
        if score.get(metric) > best_value {
            best_value = score.get(metric);
            best_epoch = epoch;
            best_params.clone_from(params);
        } else if epoch - best_epoch >= patience {
            stopped_early = epoch < max_epochs;
            break;
        }
    }
    *params = best_params;
    Ok(PhaseHistory {
        phase: name.to_string(),
        initial,
        epochs,
        best_epoch,
        stopped_early,
    })
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng::below(rng, i + 1));
    }
    order
}

// rng purposes
const SEED_INIT: u64 = 11;
const SEED_PRETRAIN: u64 = 12;
const SEED_FINETUNE: u64 = 13;

/// Vocabulary for a training split: its words plus every word the channel
/// can emit.
pub fn build_vocab(train: &IntentDataset, channel: &ErrorChannel) -> Vocab {
    Vocab::build([train], channel.lexicon().words().map(String::from))
}

/// Freshly initialised model for `train`.
pub fn init_model(train: &IntentDataset, config: &TrainConfig, channel: &ErrorChannel) -> Result<SluModel> {
    config.validate()?;
    let vocab = build_vocab(train, channel);
    let mc = config.model.config(vocab.len(), train.num_classes);
    let params = init_params(&mc, rng::derive_seed(config.seed, SEED_INIT))?;
    SluModel::new(vocab, train.class_names.clone(), params)
}

fn check_splits(model: &SluModel, train: &IntentDataset, dev: &IntentDataset) -> Result<()> {
    for ds in [train, dev] {
        ds.validate()?;
        if ds.num_classes != model.params.config.num_classes {
            return Err(Error::Config(alloc::format!(
                "{} split has {} classes but the model has {}",
                ds.split.as_str(),
                ds.num_classes,
                model.params.config.num_classes
            )));
        }
    }
    if train.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    Ok(())
}

/// First phase of `config.mode` from the given model: cross-entropy for
/// modes 1–2, L₂ for mode 3, pairwise for modes 4–7.
pub fn pretrain<M: ErrorModel + ?Sized>(
    model: &mut SluModel,
    train: &IntentDataset,
    dev: &IntentDataset,
    config: &TrainConfig,
    channel: &M,
) -> Result<PhaseHistory> {
    config.validate()?;
    check_splits(model, train, dev)?;
    let evaluator = DevEvaluator::new(dev, &model.vocab)?;
    let ctx = StepContext {
        data: train,
        vocab: &model.vocab,
        channel,
        hp: &config.loss_hp,
    };
    let mode = config.mode;
    let epsilon = config.epsilon();
    let lr = config.lr_pairwise;
    let mut rng = rng::seeded(rng::derive_seed(config.seed, SEED_PRETRAIN));
    let mut opt = Optimizers::new(&model.params);
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let eval = |p: &ModelParams| evaluator.score(p);

    if mode.is_pairwise() {
        let sampler = PairSampler::new(train, config.pos_pair_fraction)?;
        let phase = if epsilon > 0.0 { "pairwise_halluc" } else { "pairwise" };
        run_phase(
            phase,
            &mut model.params,
            config.max_epochs,
            config.patience,
            config.selection_metric,
            eval,
            |params, epoch| {
                let mut total = 0.0;
                for b in 0..batches_per_epoch {
                    let batch = sampler.batch(config.batch_size, &mut rng);
                    let l = pairwise_train_step(params, &batch, &ctx, epsilon, &mut opt, lr, &mut rng, (epoch, b))?;
                    total += l.total;
                }
                Ok(total / batches_per_epoch as f64)
            },
        )
    } else {
        let l2 = mode == TrainMode::L2Only;
        run_phase(
            mode.as_str(),
            &mut model.params,
            config.max_epochs,
            config.patience,
            config.selection_metric,
            eval,
            |params, epoch| {
                let order = shuffled(train.len(), &mut rng);
                let mut total = 0.0;
                for (b, chunk) in order.chunks(config.batch_size).enumerate() {
                    total += if l2 {
                        finetune_step(params, chunk, &ctx, config.use_real_asr, &mut opt, lr, &mut rng, (epoch, b))?.total
                    } else {
                        ce_step(params, chunk, &ctx, epsilon, &mut opt, lr, &mut rng, (epoch, b))?
                    };
                }
                Ok(total / batches_per_epoch as f64)
            },
        )
    }
}

/// L₂ fine-tuning phase at `lr_finetune`.
pub fn finetune<M: ErrorModel + ?Sized>(
    model: &mut SluModel,
    train: &IntentDataset,
    dev: &IntentDataset,
    config: &TrainConfig,
    channel: &M,
) -> Result<PhaseHistory> {
    config.validate()?;
    check_splits(model, train, dev)?;
    let evaluator = DevEvaluator::new(dev, &model.vocab)?;
    let ctx = StepContext {
        data: train,
        vocab: &model.vocab,
        channel,
        hp: &config.loss_hp,
    };
    let lr = config.lr_finetune;
    let mut rng = rng::seeded(rng::derive_seed(config.seed, SEED_FINETUNE));
    let mut opt = Optimizers::new(&model.params);
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    run_phase(
        "finetune",
        &mut model.params,
        config.max_epochs,
        config.patience,
        config.selection_metric,
        |p| evaluator.score(p),
        |params, epoch| {
            let order = shuffled(train.len(), &mut rng);
            let mut total = 0.0;
            for (b, chunk) in order.chunks(config.batch_size).enumerate() {
                total += finetune_step(params, chunk, &ctx, config.use_real_asr, &mut opt, lr, &mut rng, (epoch, b))?.total;
            }
            Ok(total / batches_per_epoch as f64)
        },
    )
}

/// Full schedule of `config.mode` from a fresh initialisation.
pub fn train(
    train: &IntentDataset,
    dev: &IntentDataset,
    config: &TrainConfig,
    channel: &ErrorChannel,
) -> Result<(SluModel, TrainHistory)> {
    let mut model = init_model(train, config, channel)?;
    let mut phases = vec![pretrain(&mut model, train, dev, config, channel)?];
    if config.mode.fine_tunes() {
        phases.push(finetune(&mut model, train, dev, config, channel)?);
    }
    Ok((model, TrainHistory { mode: config.mode, phases }))
}

/// Grid value maximising `objective`; ties go to the smaller value.
pub fn tune_scalar<F>(grid: &[f64], mut objective: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut best: Option<(f64, f64)> = None;
    for &g in grid {
        let score = objective(g)?;
        best = match best {
            Some((bg, bs)) if bs > score || (bs == score && bg <= g) => Some((bg, bs)),
            _ => Some((g, score)),
        };
    }
    best.map(|(g, _)| g)
        .ok_or_else(|| Error::Config("tuning grid is empty".into()))
}
