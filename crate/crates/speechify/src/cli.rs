//! The `speechify` command line.
//!
//! Each command is one step: `gen-data`, `speechify`, `train`, `finetune`,
//! `index`, `evaluate` and `predict`, plus `experiment` and `ablate`, which
//! run whole comparisons. Every command that writes an output directory
//! also writes `run.json` with its configuration, seed and input hashes.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use speechify_core::data::{generate_synthetic, tokenize, GeneratorSpec, IntentDataset};
use speechify_core::error_channel::{self, CalibrationSettings, ErrorChannel, ErrorModel};
use speechify_core::inference::{self, build_index, corrupt_at_wer, default_gamma_grid, ScoredSet};
use speechify_core::model::SluModel;
use speechify_core::rng::{self, derive_seed};
use speechify_core::training::{self, TrainConfig, TrainHistory, TrainMode};

use crate::config::load_overlay;
use crate::error::{AppError, Result};
use crate::experiment::{self, ExperimentSpec, SEED_DEV, SEED_INDEX, SEED_TEST};
use crate::io;
use crate::provenance::write_run_record;

#[derive(Parser, Debug)]
#[command(name = "speechify", version, about = "Intent classification robust to class imbalance and ASR errors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic Zipf-distributed intent corpus.
    GenData(GenDataArgs),
    /// Corrupt sentences with the simulated ASR channel.
    Speechify(SpeechifyArgs),
    /// Train a model from scratch (the first phase of a mode).
    Train(TrainArgs),
    /// Fine-tune a checkpoint with the clean/errorful consistency loss.
    Finetune(FinetuneArgs),
    /// Build the nearest-neighbour index of a training set.
    Index(IndexArgs),
    /// Score a model on a test set.
    Evaluate(EvaluateArgs),
    /// Classify sentences read from standard input.
    Predict(PredictArgs),
    /// Run every training mode over several seeds and WER conditions.
    Experiment(ExperimentArgs),
    /// Compare fine-tuning with and without the consistency term.
    Ablate(ExperimentArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ChannelArgs {
    /// Pronunciation lexicon (`word<TAB>PH1 PH2 …`); bundled when omitted.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Confusion model JSON; articulatory default when omitted.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    /// Channel noise level used for hallucination and index alternatives.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
}

impl ChannelArgs {
    fn load(&self) -> Result<ErrorChannel> {
        io::load_channel(self.lexicon.as_deref(), self.confusion.as_deref(), self.noise)
    }

    fn inputs(&self) -> Vec<&Path> {
        self.lexicon.iter().chain(&self.confusion).map(PathBuf::as_path).collect()
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory for train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Number of training utterances.
    #[arg(long)]
    pub total_size: Option<usize>,
    #[arg(long)]
    pub zipf_exponent: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key = value` overrides of the generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SpeechifyArgs {
    /// One sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Target corpus WER; the noise level is calibrated on the input.
    #[arg(long, conflicts_with = "noise_level", required_unless_present = "noise_level")]
    pub wer: Option<f64>,
    /// Channel noise level to apply directly.
    #[arg(long = "noise-level")]
    pub noise_level: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    /// `key = value` overrides of the calibration settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct DevArgs {
    #[arg(long)]
    pub dev: PathBuf,
    /// WER at which the clean dev text is corrupted for model selection;
    /// 0 uses the dev file as given.
    #[arg(long, default_value_t = experiment::DEFAULT_WER_TARGETS[0])]
    pub dev_wer: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[command(flatten)]
    pub dev: DevArgs,
    /// Output directory for model.json, history.jsonl and run.json.
    #[arg(long)]
    pub out: PathBuf,
    /// ce, ce_halluc, l2_only, pairwise, pairwise_halluc, pairwise_ft or
    /// pairwise_halluc_ft. Fine-tuned modes train their first phase here.
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Pretrained word vectors (`word v1 v2 …`) copied into the embedding.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[command(flatten)]
    pub channel: ChannelArgs,
    /// `key = value` overrides of the training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Checkpoint to start from.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[command(flatten)]
    pub dev: DevArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the clean/errorful consistency term.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Use stored ASR hypotheses as the errorful input where present.
    #[arg(long)]
    pub use_real_asr: bool,
    #[command(flatten)]
    pub channel: ChannelArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    /// Output directory for index.json and run.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Alternatives kept per utterance.
    #[arg(long, default_value_t = inference::DEFAULT_K)]
    pub k: usize,
    /// Candidate alternatives sampled per utterance.
    #[arg(long, default_value_t = inference::DEFAULT_OVERSAMPLE)]
    pub oversample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub channel: ChannelArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Nearest-neighbour index; without it the classifier alone is scored.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    /// Output directory for metrics.json and run.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Fusion weight of the nearest-neighbour scores.
    #[arg(long, conflicts_with = "dev")]
    pub gamma: Option<f64>,
    /// Tune γ on this dev set instead.
    #[arg(long, requires = "index")]
    pub dev: Option<PathBuf>,
    #[arg(long, default_value_t = experiment::DEFAULT_WER_TARGETS[0])]
    pub dev_wer: f64,
    /// Corrupt the clean test text at this WER; by default the file's own
    /// hypotheses (or clean text) are scored.
    #[arg(long)]
    pub wer: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Output directory for results.json, table.txt and run.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated modes.
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<TrainMode>>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Directory with train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `key = value` overrides of the experiment settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Suppress progress messages.
    #[arg(long)]
    pub quiet: bool,
}

/// Parse `args` and run the command. Returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Speechify(a) => speechify(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Index(a) => index(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Experiment(a) => run_experiment(a, false),
        Command::Ablate(a) => run_experiment(a, true),
    }
}

fn with_config<T: Serialize + DeserializeOwned>(base: T, path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => load_overlay(&base, p),
        None => Ok(base),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec = with_config(GeneratorSpec::default(), &a.config)?;
    set(&mut spec.num_classes, a.num_classes);
    set(&mut spec.total_size, a.total_size);
    set(&mut spec.zipf_exponent, a.zipf_exponent);
    set(&mut spec.seed, a.seed);
    let corpus = generate_synthetic(&spec)?;
    for ds in [&corpus.train, &corpus.dev, &corpus.test] {
        io::write_dataset(ds, &a.out.join(format!("{}.jsonl", ds.split.as_str())))?;
    }
    let inputs: Vec<&Path> = a.config.iter().map(PathBuf::as_path).collect();
    write_run_record(&a.out, "gen-data", spec.seed, &spec, &inputs)?;
    let counts = corpus.train.class_counts();
    println!(
        "train {} / dev {} / test {} utterances, {} classes",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        spec.num_classes
    );
    println!(
        "class sizes: largest {}, smallest {}",
        counts.iter().max().unwrap_or(&0),
        counts.iter().min().unwrap_or(&0)
    );
    println!("head-quintile mass: {:.4}", corpus.train.head_quintile_mass());
    Ok(())
}

fn speechify(a: SpeechifyArgs) -> Result<()> {
    let settings = with_config(CalibrationSettings::default(), &a.config)?;
    let text = io::read_text(&a.input)?;
    let lines: Vec<&str> = text.lines().collect();
    let sentences: Vec<Vec<String>> = lines.iter().map(|l| tokenize(l)).collect();
    let corpus: Vec<Vec<String>> = sentences.iter().filter(|s| !s.is_empty()).cloned().collect();
    if corpus.is_empty() {
        return Err(AppError::Usage(format!("{} has no sentences", a.input.display())));
    }
    let base = io::load_channel(a.lexicon.as_deref(), a.confusion.as_deref(), 1.0)?;
    let noise = match (a.wer, a.noise_level) {
        (Some(t), _) => {
            if !(0.0..1.0).contains(&t) {
                return Err(AppError::Usage(format!("--wer must be in [0, 1), got {t}")));
            }
            error_channel::calibrate_noise_with(&base, &corpus, t, error_channel::MIN_CALIBRATION_TOLERANCE, &settings)?
        }
        (None, Some(n)) => n,
        (None, None) => return Err(AppError::Usage("one of --wer or --noise-level is required".into())),
    };
    let channel = base.with_noise_level(noise)?;
    let mut rng = rng::seeded(a.seed);
    let mut out = String::new();
    let mut pairs = Vec::new();
    for (line, tokens) in lines.iter().zip(&sentences) {
        if tokens.is_empty() {
            out.push_str(line);
        } else {
            let hyp = channel.corrupt(tokens, &mut rng);
            if &hyp == tokens {
                out.push_str(line);
            } else {
                out.push_str(&hyp.join(" "));
            }
            pairs.push((tokens.clone(), hyp));
        }
        out.push('\n');
    }
    io::write_text(&a.output, &out)?;
    let measured = error_channel::corpus_wer(pairs.iter().map(|(r, h)| (r.as_slice(), h.as_slice())))?;
    println!("noise level: {noise:.6}");
    println!("measured WER: {measured:.6}");
    Ok(())
}

/// Dev split as used for model selection: the clean text corrupted at
/// `dev_wer`, or the file as given when `dev_wer` is 0.
fn load_dev(dev: &DevArgs, channel: &ErrorChannel, seed: u64) -> Result<IntentDataset> {
    let ds = io::read_dataset(&dev.dev)?;
    if dev.dev_wer == 0.0 {
        return Ok(ds);
    }
    let (ds, _) = corrupt_at_wer(
        &ds.clean(),
        channel,
        dev.dev_wer,
        derive_seed(seed, SEED_DEV),
        &CalibrationSettings::default(),
    )?;
    Ok(ds)
}

fn write_training_outputs(out: &Path, model: &SluModel, history: &TrainHistory) -> Result<()> {
    io::save_model(model, &out.join("model.json"))?;
    io::write_text(&out.join("history.jsonl"), &io::format_history(history)?)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = with_config(TrainConfig::default(), &a.config)?;
    set(&mut config.mode, a.mode);
    set(&mut config.seed, a.seed);
    set(&mut config.max_epochs, a.max_epochs);
    set(&mut config.patience, a.patience);
    set(&mut config.batch_size, a.batch_size);
    set(&mut config.lr_pairwise, a.lr);
    config.validate()?;
    let channel = a.channel.load()?;
    let train = io::read_dataset(&a.train)?;
    let dev = load_dev(&a.dev, &channel, config.seed)?;
    let mut model = training::init_model(&train, &config, &channel)?;
    if let Some(path) = &a.vectors {
        let vectors = io::read_vectors(path)?;
        let n = model.params.overlay_vectors(&model.vocab, &vectors)?;
        eprintln!("copied {n} pretrained vectors");
    }
    let phase = training::pretrain(&mut model, &train, &dev, &config, &channel)?;
    if config.mode.fine_tunes() {
        eprintln!("{} trained its first phase; run `finetune` next", config.mode);
    }
    report_phase(&phase);
    let history = TrainHistory {
        mode: config.mode,
        phases: vec![phase],
    };
    write_training_outputs(&a.out, &model, &history)?;
    let mut inputs = vec![a.train.as_path(), a.dev.dev.as_path()];
    inputs.extend(a.vectors.as_deref());
    inputs.extend(a.channel.inputs());
    inputs.extend(a.config.as_deref());
    let record = json!({ "train": config, "dev_wer": a.dev.dev_wer, "noise_level": a.channel.noise });
    write_run_record(&a.out, "train", config.seed, &record, &inputs)
}

fn report_phase(phase: &training::PhaseHistory) {
    let best = phase.best();
    eprintln!(
        "{}: {} epochs, best epoch {} (dev accuracy {:.4}, macro-F1 {:.4})",
        phase.phase,
        phase.epochs.len(),
        phase.best_epoch,
        best.dev_accuracy,
        best.dev_macro_f1
    );
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut config = with_config(
        TrainConfig {
            mode: TrainMode::PairwiseHallucFt,
            ..TrainConfig::default()
        },
        &a.config,
    )?;
    set(&mut config.seed, a.seed);
    set(&mut config.loss_hp.eta, a.eta);
    set(&mut config.lr_finetune, a.lr);
    set(&mut config.max_epochs, a.max_epochs);
    set(&mut config.patience, a.patience);
    config.use_real_asr |= a.use_real_asr;
    config.validate()?;
    let channel = a.channel.load()?;
    let mut model = io::load_model(&a.model)?;
    let train = io::read_dataset(&a.train)?;
    let dev = load_dev(&a.dev, &channel, config.seed)?;
    let phase = training::finetune(&mut model, &train, &dev, &config, &channel)?;
    report_phase(&phase);
    let history = TrainHistory {
        mode: config.mode,
        phases: vec![phase],
    };
    write_training_outputs(&a.out, &model, &history)?;
    let mut inputs = vec![a.model.as_path(), a.train.as_path(), a.dev.dev.as_path()];
    inputs.extend(a.channel.inputs());
    inputs.extend(a.config.as_deref());
    let record = json!({ "train": config, "dev_wer": a.dev.dev_wer, "noise_level": a.channel.noise });
    write_run_record(&a.out, "finetune", config.seed, &record, &inputs)
}

fn index(a: IndexArgs) -> Result<()> {
    let channel = a.channel.load()?;
    let model = io::load_model(&a.model)?;
    let train = io::read_dataset(&a.train)?;
    let ix = build_index(&model, &train, &channel, a.k, a.oversample, derive_seed(a.seed, SEED_INDEX))?;
    io::save_index(&ix, &a.out.join("index.json"))?;
    eprintln!("{} index entries", ix.len());
    let mut inputs = vec![a.model.as_path(), a.train.as_path()];
    inputs.extend(a.channel.inputs());
    let record = json!({ "k": a.k, "oversample": a.oversample, "noise_level": a.channel.noise });
    write_run_record(&a.out, "index", a.seed, &record, &inputs)
}

#[derive(Serialize)]
struct Metrics {
    accuracy: f64,
    macro_f1: f64,
    gamma: f64,
    /// Corpus WER of the scored text against the clean text.
    wer: f64,
    noise_level: Option<f64>,
    utterances: usize,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = io::load_model(&a.model)?;
    let index = a.index.as_deref().map(io::load_index).transpose()?;
    let test = io::read_dataset(&a.test)?;
    if test.num_classes != model.class_names.len() {
        return Err(AppError::Usage(format!(
            "{} has {} classes but the model has {}",
            a.test.display(),
            test.num_classes,
            model.class_names.len()
        )));
    }
    let channel = io::load_channel(a.lexicon.as_deref(), a.confusion.as_deref(), 1.0)?;
    let (test, noise_level) = match a.wer {
        Some(t) => {
            let (ds, n) = corrupt_at_wer(
                &test.clean(),
                &channel,
                t,
                derive_seed(a.seed, SEED_TEST),
                &CalibrationSettings::default(),
            )?;
            (ds, Some(n))
        }
        None => (test, None),
    };
    let gamma = match (&a.dev, &index, a.gamma) {
        (Some(dev_path), Some(ix), _) => {
            let dev = load_dev(
                &DevArgs {
                    dev: dev_path.clone(),
                    dev_wer: a.dev_wer,
                },
                &channel,
                a.seed,
            )?;
            let scored = ScoredSet::new(&model, ix, &dev)?;
            training::tune_scalar(&default_gamma_grid(), |g| Ok(scored.metrics(g)?.0))?
        }
        (_, _, Some(g)) => g,
        _ => 0.0,
    };
    if !(0.0..=1.0).contains(&gamma) {
        return Err(AppError::Usage(format!("--gamma must be in [0, 1], got {gamma}")));
    }
    let (accuracy, macro_f1) = match &index {
        Some(ix) => ScoredSet::new(&model, ix, &test)?.metrics(gamma)?,
        None if gamma == 0.0 => {
            let inputs: Vec<Vec<usize>> = test.utterances.iter().map(|u| model.ids(u.observed())).collect();
            let preds = training::predict_ids(&model.params, &inputs)?;
            let golds = test.labels();
            (
                speechify_core::data::accuracy(&preds, &golds)?,
                speechify_core::data::macro_f1(&preds, &golds, test.num_classes)?,
            )
        }
        None => return Err(AppError::Usage("--gamma above 0 needs --index".into())),
    };
    let metrics = Metrics {
        accuracy,
        macro_f1,
        gamma,
        wer: inference::observed_wer(&test)?,
        noise_level,
        utterances: test.len(),
    };
    io::write_json(&a.out.join("metrics.json"), &metrics)?;
    println!(
        "accuracy {:.4}  macro-F1 {:.4}  gamma {gamma:.1}  WER {:.4}",
        metrics.accuracy, metrics.macro_f1, metrics.wer
    );
    let mut inputs = vec![a.model.as_path(), a.test.as_path()];
    inputs.extend(a.index.as_deref());
    inputs.extend(a.dev.as_deref());
    inputs.extend(a.lexicon.as_deref());
    inputs.extend(a.confusion.as_deref());
    let record = json!({ "gamma": a.gamma, "tuned_gamma": gamma, "wer": a.wer, "dev_wer": a.dev_wer });
    write_run_record(&a.out, "evaluate", a.seed, &record, &inputs)
}

fn predict(a: PredictArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.gamma) {
        return Err(AppError::Usage(format!("--gamma must be in [0, 1], got {}", a.gamma)));
    }
    let model = io::load_model(&a.model)?;
    let index = a.index.as_deref().map(io::load_index).transpose()?;
    if index.is_none() && a.gamma > 0.0 {
        return Err(AppError::Usage("--gamma above 0 needs --index".into()));
    }
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let stdin_path = Path::new("<stdin>");
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| AppError::io(stdin_path, e))?;
        let tokens = tokenize(&line);
        let probs = match &index {
            Some(ix) => inference::fuse_predict(&model, ix, &tokens, a.gamma)?,
            None => {
                let logits = model.logits(&tokens)?;
                speechify_core::numerics::softmax(&logits)?
            }
        };
        let (best, p) = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
        writeln!(out, "{}\t{p:.6}", model.class_names[best]).map_err(|e| AppError::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

fn run_experiment(a: ExperimentArgs, ablation_only: bool) -> Result<()> {
    let mut spec = with_config(ExperimentSpec::default(), &a.config)?;
    set(&mut spec.seeds, a.seeds.clone());
    set(&mut spec.modes, a.modes.clone());
    set(&mut spec.train.max_epochs, a.max_epochs);
    if a.data.is_some() {
        spec.data_dir = a.data.clone();
    }
    if ablation_only {
        spec.modes.clear();
        if spec.ablation_etas.is_empty() {
            return Err(AppError::Usage("ablation needs at least one non-zero eta".into()));
        }
    }
    let quiet = a.quiet;
    let report = experiment::run(&spec, |msg| {
        if !quiet {
            eprintln!("{msg}");
        }
    })?;
    io::write_json(&a.out.join("results.json"), &report)?;
    let mut table = String::new();
    if !report.runs.is_empty() {
        table.push_str(&report.table());
        table.push('\n');
    }
    if !report.ablation.is_empty() {
        table.push_str(&report.ablation_table());
    }
    io::write_text(&a.out.join("table.txt"), &table)?;
    print!("{table}");
    let mut inputs: Vec<PathBuf> = a.config.iter().cloned().collect();
    if let Some(dir) = &spec.data_dir {
        inputs.extend(["train.jsonl", "dev.jsonl", "test.jsonl"].map(|f| dir.join(f)));
    }
    inputs.extend(spec.channel.lexicon.iter().cloned());
    inputs.extend(spec.channel.confusion.iter().cloned());
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let command = if ablation_only { "ablate" } else { "experiment" };
    let seed = spec.seeds.first().copied().unwrap_or(0);
    write_run_record(&a.out, command, seed, &spec, &refs)
}

