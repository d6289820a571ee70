//! Seeded comparison of the training modes at several test WERs, and the
//! fine-tuning η ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use speechify_core::data::{self, generate_synthetic, GeneratorSpec, IntentDataset};
use speechify_core::error_channel::{CalibrationSettings, ErrorChannel};
use speechify_core::inference::{self, build_index, corrupt_at_wer, default_gamma_grid, NNIndex, ScoredSet};
use speechify_core::model::SluModel;
use speechify_core::rng::derive_seed;
use speechify_core::training::{self, PhaseHistory, TrainConfig, TrainMode};

use crate::error::{AppError, Result};
use crate::io;

/// Where the error channel comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelSpec {
    pub lexicon: Option<PathBuf>,
    pub confusion: Option<PathBuf>,
    /// Noise level for hallucination, fine-tuning samples and index
    /// alternatives. Test corruption is calibrated separately.
    pub noise_level: f64,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec {
            lexicon: None,
            confusion: None,
            noise_level: 1.0,
        }
    }
}

impl ChannelSpec {
    pub fn load(&self) -> Result<ErrorChannel> {
        io::load_channel(self.lexicon.as_deref(), self.confusion.as_deref(), self.noise_level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    /// Directory holding `train.jsonl`, `dev.jsonl` and `test.jsonl`. When
    /// absent a corpus is generated.
    pub data_dir: Option<PathBuf>,
    pub generator: GeneratorSpec,
    /// Generate a fresh corpus per seed (its generator seed is the run seed).
    pub vary_data: bool,
    pub channel: ChannelSpec,
    /// Base configuration; mode and seed are set per run.
    pub train: TrainConfig,
    pub modes: Vec<TrainMode>,
    pub seeds: Vec<u64>,
    pub wer_targets: Vec<f64>,
    /// Dev WER used for early stopping and γ tuning.
    pub dev_wer: f64,
    pub gamma_grid: Vec<f64>,
    pub k: usize,
    pub oversample: usize,
    pub calibration: CalibrationSettings,
    /// Non-zero η arms of the ablation; η = 0 always runs.
    pub ablation_etas: Vec<f64>,
    pub ablation_mode: TrainMode,
    pub ablation_wer: f64,
}

pub const DEFAULT_WER_TARGETS: [f64; 3] = [0.089, 0.125, 0.411];

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            data_dir: None,
            generator: GeneratorSpec::default(),
            vary_data: true,
            channel: ChannelSpec::default(),
            train: TrainConfig::default(),
            modes: TrainMode::ALL.to_vec(),
            seeds: (0..5).collect(),
            wer_targets: DEFAULT_WER_TARGETS.to_vec(),
            dev_wer: DEFAULT_WER_TARGETS[0],
            gamma_grid: default_gamma_grid(),
            k: inference::DEFAULT_K,
            oversample: inference::DEFAULT_OVERSAMPLE,
            calibration: CalibrationSettings::default(),
            ablation_etas: vec![1.0],
            ablation_mode: TrainMode::PairwiseHallucFt,
            ablation_wer: DEFAULT_WER_TARGETS[0],
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(AppError::Usage("experiment needs at least one seed".into()));
        }
        for &t in self.wer_targets.iter().chain([&self.dev_wer, &self.ablation_wer]) {
            if !(0.0..1.0).contains(&t) {
                return Err(AppError::Usage(format!("WER target {t} outside [0, 1)")));
            }
        }
        if self.gamma_grid.is_empty() || self.gamma_grid.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(AppError::Usage("gamma grid must be non-empty and within [0, 1]".into()));
        }
        if !self.ablation_mode.fine_tunes() {
            return Err(AppError::Usage(format!(
                "ablation mode {} has no fine-tuning phase",
                self.ablation_mode
            )));
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Metrics on one version of the test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub target_wer: f64,
    pub measured_wer: f64,
    pub noise_level: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub best_dev_macro_f1: f64,
    pub stopped_early: bool,
}

impl From<&PhaseHistory> for PhaseSummary {
    fn from(h: &PhaseHistory) -> Self {
        PhaseSummary {
            phase: h.phase.clone(),
            epochs_run: h.epochs.len(),
            best_epoch: h.best_epoch,
            best_dev_accuracy: h.best().dev_accuracy,
            best_dev_macro_f1: h.best().dev_macro_f1,
            stopped_early: h.stopped_early,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: TrainMode,
    pub seed: u64,
    pub eta: f64,
    /// Whether predictions fuse the nearest-neighbour index.
    pub fused: bool,
    pub gamma: f64,
    pub dev_accuracy: f64,
    pub phases: Vec<PhaseSummary>,
    pub clean: TargetMetrics,
    pub targets: Vec<TargetMetrics>,
}

impl RunResult {
    pub fn at(&self, target_wer: f64) -> Option<&TargetMetrics> {
        if target_wer == 0.0 {
            return Some(&self.clean);
        }
        self.targets.iter().find(|t| t.target_wer == target_wer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub spec: ExperimentSpec,
    pub runs: Vec<RunResult>,
    /// Ablation arms, one per (η, seed).
    pub ablation: Vec<RunResult>,
}

/// Splits prepared for one seed.
pub struct SeedData {
    pub train: IntentDataset,
    pub dev: IntentDataset,
    pub clean_test: IntentDataset,
    /// `(target, corrupted test, noise level)`.
    pub tests: Vec<(f64, IntentDataset, f64)>,
}

pub const SEED_DEV: u64 = 101;
pub const SEED_TEST: u64 = 200;
pub const SEED_INDEX: u64 = 300;

fn load_splits(spec: &ExperimentSpec, seed: u64) -> Result<(IntentDataset, IntentDataset, IntentDataset)> {
    match &spec.data_dir {
        Some(dir) => Ok((
            io::read_dataset(&dir.join("train.jsonl"))?,
            io::read_dataset(&dir.join("dev.jsonl"))?,
            io::read_dataset(&dir.join("test.jsonl"))?,
        )),
        None => {
            let mut g = spec.generator.clone();
            if spec.vary_data {
                g.seed = seed;
            }
            let c = generate_synthetic(&g)?;
            Ok((c.train, c.dev, c.test))
        }
    }
}

/// Load or generate the splits and corrupt dev and test at their targets.
pub fn prepare_seed(spec: &ExperimentSpec, channel: &ErrorChannel, seed: u64) -> Result<SeedData> {
    let (train, dev, test) = load_splits(spec, seed)?;
    let (dev, _) = corrupt_at_wer(
        &dev.clean(),
        channel,
        spec.dev_wer,
        derive_seed(seed, SEED_DEV),
        &spec.calibration,
    )?;
    let clean_test = test.clean();
    let mut tests = Vec::new();
    let mut targets = spec.wer_targets.clone();
    if !targets.contains(&spec.ablation_wer) {
        targets.push(spec.ablation_wer);
    }
    for (i, &t) in targets.iter().enumerate() {
        let (ds, noise) = corrupt_at_wer(
            &clean_test,
            channel,
            t,
            derive_seed(seed, SEED_TEST + i as u64),
            &spec.calibration,
        )?;
        tests.push((t, ds, noise));
    }
    Ok(SeedData {
        train,
        dev,
        clean_test,
        tests,
    })
}

fn classifier_metrics(model: &SluModel, ds: &IntentDataset) -> Result<(f64, f64)> {
    let inputs: Vec<Vec<usize>> = ds.utterances.iter().map(|u| model.ids(u.observed())).collect();
    let preds = training::predict_ids(&model.params, &inputs)?;
    let golds = ds.labels();
    Ok((
        data::accuracy(&preds, &golds)?,
        data::macro_f1(&preds, &golds, ds.num_classes)?,
    ))
}

/// Score a trained model: tune γ on dev when fusing, then evaluate the
/// clean and corrupted test sets.
pub fn assess(
    spec: &ExperimentSpec,
    data: &SeedData,
    channel: &ErrorChannel,
    model: &SluModel,
    fused: bool,
    seed: u64,
) -> Result<(f64, f64, TargetMetrics, Vec<TargetMetrics>)> {
    let metric = |ds: &IntentDataset, gamma: f64, index: Option<&NNIndex>| -> Result<(f64, f64)> {
        match index {
            Some(ix) => Ok(ScoredSet::new(model, ix, ds)?.metrics(gamma)?),
            None => classifier_metrics(model, ds),
        }
    };
    let (index, gamma, dev_accuracy) = if fused {
        let ix = build_index(
            model,
            &data.train,
            channel,
            spec.k,
            spec.oversample,
            derive_seed(seed, SEED_INDEX),
        )?;
        let scored = ScoredSet::new(model, &ix, &data.dev)?;
        let gamma = training::tune_scalar(&spec.gamma_grid, |g| Ok(scored.metrics(g)?.0))?;
        let dev_acc = scored.metrics(gamma)?.0;
        (Some(ix), gamma, dev_acc)
    } else {
        (None, 0.0, classifier_metrics(model, &data.dev)?.0)
    };
    let (acc, f1) = metric(&data.clean_test, gamma, index.as_ref())?;
    let clean = TargetMetrics {
        target_wer: 0.0,
        measured_wer: 0.0,
        noise_level: 0.0,
        accuracy: acc,
        macro_f1: f1,
    };
    let mut targets = Vec::new();
    for (t, ds, noise) in &data.tests {
        let (accuracy, macro_f1) = metric(ds, gamma, index.as_ref())?;
        targets.push(TargetMetrics {
            target_wer: *t,
            measured_wer: inference::observed_wer(ds)?,
            noise_level: *noise,
            accuracy,
            macro_f1,
        });
    }
    Ok((gamma, dev_accuracy, clean, targets))
}

/// Run every mode for every seed, then the ablation arms.
///
/// Modes sharing a first phase train it once: fine-tuned modes start from
/// the matching pairwise model, and the ablation reuses both.
pub fn run(spec: &ExperimentSpec, mut log: impl FnMut(&str)) -> Result<Report> {
    spec.validate()?;
    let start = std::time::Instant::now();
    let mut log = move |msg: &str| log(&format!("[{:>5.0}s] {msg}", start.elapsed().as_secs_f64()));
    let channel = spec.channel.load()?;
    let mut runs = Vec::new();
    let mut ablation = Vec::new();
    let mut etas: Vec<f64> = spec.ablation_etas.iter().copied().filter(|e| *e != 0.0).collect();
    etas.push(0.0);
    let do_ablation = !spec.ablation_etas.is_empty();

    for &seed in &spec.seeds {
        log(&format!("seed {seed}: preparing data"));
        let data = prepare_seed(spec, &channel, seed)?;
        let mut pretrained: BTreeMap<TrainMode, (SluModel, PhaseHistory)> = BTreeMap::new();
        let mut finished: BTreeMap<(TrainMode, u64), RunResult> = BTreeMap::new();

        let mut first_phase = |mode: TrainMode, log: &mut dyn FnMut(&str)| -> Result<(SluModel, PhaseHistory)> {
            let key = mode.pretraining_mode();
            if let Some(hit) = pretrained.get(&key) {
                return Ok(hit.clone());
            }
            let config = TrainConfig {
                mode: key,
                seed,
                ..spec.train.clone()
            };
            let mut model = training::init_model(&data.train, &config, &channel)?;
            let h = training::pretrain(&mut model, &data.train, &data.dev, &config, &channel)?;
            log(&format!(
                "seed {seed}: {} phase done after {} epochs (best {})",
                h.phase,
                h.epochs.len(),
                h.best_epoch
            ));
            pretrained.insert(key, (model.clone(), h.clone()));
            Ok((model, h))
        };

        let mut run_one = |mode: TrainMode, eta: f64, log: &mut dyn FnMut(&str)| -> Result<RunResult> {
            let cache_key = (mode, eta.to_bits());
            if let Some(hit) = finished.get(&cache_key) {
                return Ok(hit.clone());
            }
            let (mut model, h1) = first_phase(mode, log)?;
            let mut phases = vec![PhaseSummary::from(&h1)];
            if mode.fine_tunes() {
                let mut config = TrainConfig {
                    mode,
                    seed,
                    ..spec.train.clone()
                };
                config.loss_hp.eta = eta;
                let h2 = training::finetune(&mut model, &data.train, &data.dev, &config, &channel)?;
                log(&format!(
                    "seed {seed}: {mode} fine-tuning (eta {eta}) done after {} epochs (best {})",
                    h2.epochs.len(),
                    h2.best_epoch
                ));
                phases.push(PhaseSummary::from(&h2));
            }
            let fused = mode.is_pairwise();
            let (gamma, dev_accuracy, clean, targets) = assess(spec, &data, &channel, &model, fused, seed)?;
            let result = RunResult {
                mode,
                seed,
                eta,
                fused,
                gamma,
                dev_accuracy,
                phases,
                clean,
                targets,
            };
            finished.insert(cache_key, result.clone());
            Ok(result)
        };

        let mut modes = spec.modes.clone();
        modes.sort();
        modes.dedup();
        for mode in modes {
            let r = run_one(mode, spec.train.loss_hp.eta, &mut log)?;
            log(&format!(
                "seed {seed}: {mode} gamma {:.1} {}",
                r.gamma,
                r.targets
                    .iter()
                    .map(|t| format!("{:.3}: {:.3}/{:.3}", t.measured_wer, t.accuracy, t.macro_f1))
                    .collect::<Vec<_>>()
                    .join("  ")
            ));
            runs.push(r);
        }
        if do_ablation {
            for &eta in &etas {
                let r = run_one(spec.ablation_mode, eta, &mut log)?;
                ablation.push(r);
            }
        }
    }
    Ok(Report {
        spec: spec.clone(),
        runs,
        ablation,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl Report {
    pub fn runs_for(&self, mode: TrainMode) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.mode == mode)
    }

    /// Mean `(accuracy, macro_f1)` of a mode at a target (0 for clean).
    pub fn mean_metrics(&self, mode: TrainMode, target_wer: f64) -> (f64, f64) {
        let pick = |f: fn(&TargetMetrics) -> f64| {
            mean(self.runs_for(mode).filter_map(|r| r.at(target_wer)).map(f))
        };
        (pick(|t| t.accuracy), pick(|t| t.macro_f1))
    }

    /// Per-seed metric of a run.
    pub fn per_seed(&self, mode: TrainMode, target_wer: f64, f: fn(&TargetMetrics) -> f64) -> Vec<(u64, f64)> {
        self.runs_for(mode)
            .filter_map(|r| r.at(target_wer).map(|t| (r.seed, f(t))))
            .collect()
    }

    pub fn ablation_per_seed(&self, eta: f64, target_wer: f64, f: fn(&TargetMetrics) -> f64) -> Vec<(u64, f64)> {
        self.ablation
            .iter()
            .filter(|r| r.eta == eta)
            .filter_map(|r| r.at(target_wer).map(|t| (r.seed, f(t))))
            .collect()
    }

    fn columns(&self) -> Vec<f64> {
        let mut cols = vec![0.0];
        cols.extend(self.spec.wer_targets.iter().copied());
        cols
    }

    /// Aligned table of mean accuracy/macro-F1 (in %) per mode and test WER.
    pub fn table(&self) -> String {
        let cols = self.columns();
        let mut out = String::new();
        let _ = write!(out, "{:<46}", "test WER (target)");
        for c in &cols {
            let _ = write!(out, "{:>14}", format!("{:.1}%", c * 100.0));
        }
        out.push('\n');
        let _ = write!(out, "{:<46}", "test WER (measured mean)");
        for c in &cols {
            let m = mean(self.runs.iter().filter_map(|r| r.at(*c)).map(|t| t.measured_wer));
            let _ = write!(out, "{:>14}", format!("{:.1}%", m * 100.0));
        }
        out.push('\n');
        let mut modes: Vec<TrainMode> = self.runs.iter().map(|r| r.mode).collect();
        modes.sort();
        modes.dedup();
        for mode in modes {
            let mark = if mode.is_pairwise() { "+nn" } else { "" };
            let label = format!("({}) {}{}", mode.number(), mode.description(), mark);
            let _ = write!(out, "{label:<46}");
            for c in &cols {
                let (a, f) = self.mean_metrics(mode, *c);
                let _ = write!(out, "{:>14}", format!("{:.1}/{:.1}", a * 100.0, f * 100.0));
            }
            out.push('\n');
        }
        let seeds = self.spec.seeds.len();
        let _ = writeln!(out, "accuracy/macro-F1 in %, mean over {seeds} seed(s); +nn = fused with nearest-neighbour index");
        out
    }

    /// Aligned ablation table at the ablation WER.
    pub fn ablation_table(&self) -> String {
        let t = self.spec.ablation_wer;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14}{:>14}   ({} at {:.1}% WER)",
            "eta",
            "acc/F1",
            self.spec.ablation_mode.description(),
            t * 100.0
        );
        let mut etas: Vec<f64> = self.ablation.iter().map(|r| r.eta).collect();
        etas.sort_by(|a, b| b.total_cmp(a));
        etas.dedup();
        for eta in etas {
            let accs = self.ablation_per_seed(eta, t, |m| m.accuracy);
            let f1s = self.ablation_per_seed(eta, t, |m| m.macro_f1);
            let a = mean(accs.iter().map(|x| x.1));
            let f = mean(f1s.iter().map(|x| x.1));
            let _ = write!(out, "{:<14}{:>14}   seeds F1:", format!("{eta}"), format!("{:.1}/{:.1}", a * 100.0, f * 100.0));
            for (s, v) in f1s {
                let _ = write!(out, " {s}={:.1}", v * 100.0);
            }
            out.push('\n');
        }
        out
    }
}
