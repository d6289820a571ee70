//! Datasets, vocabulary, the synthetic imbalanced intent corpus, and
//! evaluation metrics.

mod templates;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error_channel::{ErrorChannel, ErrorModel};
use crate::math;
use crate::model::{PAD_ID, UNK_ID};
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    /// Recognition hypothesis for the same utterance, real or simulated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr_tokens: Option<Vec<String>>,
    pub label: usize,
}

impl Utterance {
    pub fn new(text: &str, label: usize) -> Self {
        Utterance {
            tokens: tokenize(text),
            asr_tokens: None,
            label,
        }
    }

    /// The text a deployed system would see: the hypothesis if present.
    pub fn observed(&self) -> &[String] {
        self.asr_tokens.as_deref().unwrap_or(&self.tokens)
    }
}

/// Lowercase and split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl core::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(alloc::format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentDataset {
    pub utterances: Vec<Utterance>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl IntentDataset {
    pub fn new(utterances: Vec<Utterance>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let ds = IntentDataset {
            num_classes: class_names.len(),
            utterances,
            class_names,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Labels in range and tokens non-empty.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.num_classes {
            return Err(Error::Config(alloc::format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.label >= self.num_classes {
                return Err(Error::Index {
                    index: u.label,
                    len: self.num_classes,
                });
            }
            if u.tokens.is_empty() || u.asr_tokens.as_ref().is_some_and(|a| a.is_empty()) {
                return Err(Error::InvalidInput(alloc::format!("utterance {i} has no tokens")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for u in &self.utterances {
            counts[u.label] += 1;
        }
        counts
    }

    /// Utterance indices grouped by class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, u) in self.utterances.iter().enumerate() {
            groups[u.label].push(i);
        }
        groups
    }

    pub fn covers_all_classes(&self) -> bool {
        self.class_counts().iter().all(|&c| c > 0)
    }

    /// Share of utterances in the most frequent 20% of classes.
    pub fn head_quintile_mass(&self) -> f64 {
        head_quintile_mass(&self.class_counts())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }

    /// Copy whose `asr_tokens` are replaced by channel samples of the clean
    /// tokens.
    pub fn corrupted<M: ErrorModel + ?Sized>(&self, channel: &M, rng: &mut Rng) -> Self {
        let mut out = self.clone();
        for u in &mut out.utterances {
            u.asr_tokens = Some(channel.corrupt(&u.tokens, rng));
        }
        out
    }

    /// Copy with every `asr_tokens` removed.
    pub fn clean(&self) -> Self {
        let mut out = self.clone();
        out.utterances.iter_mut().for_each(|u| u.asr_tokens = None);
        out
    }
}

/// Share of the total held by the top `ceil(n/5)` classes by count.
pub fn head_quintile_mass(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let head = counts.len().div_ceil(5);
    sorted[..head].iter().sum::<usize>() as f64 / total as f64
}

/// Word ↔ id map with reserved `0 = <pad>` and `1 = <unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Reserved entries followed by the distinct words, sorted.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let set: BTreeSet<String> = words
            .into_iter()
            .filter(|w| w != PAD_TOKEN && w != UNK_TOKEN)
            .collect();
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(set);
        Vocab::from(all)
    }

    /// Words of a dataset (clean and hypothesis tokens) plus any extras.
    pub fn build<'a, I>(datasets: I, extra: impl IntoIterator<Item = String>) -> Self
    where
        I: IntoIterator<Item = &'a IntentDataset>,
    {
        let mut words: Vec<String> = extra.into_iter().collect();
        for ds in datasets {
            for u in &ds.utterances {
                words.extend(u.tokens.iter().cloned());
                if let Some(a) = &u.asr_tokens {
                    words.extend(a.iter().cloned());
                }
            }
        }
        Vocab::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }
}

const _: () = assert!(PAD_ID == 0 && UNK_ID == 1);

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    /// Number of training utterances.
    pub total_size: usize,
    pub zipf_exponent: f64,
    /// Dev and test sizes relative to `total_size`.
    pub dev_fraction: f64,
    pub test_fraction: f64,
    /// Share of training utterances that carry a simulated hypothesis.
    pub asr_fraction: f64,
    /// Noise level of the fixed channel producing those hypotheses.
    pub asr_noise: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            num_classes: 40,
            total_size: 2000,
            zipf_exponent: 1.2,
            dev_fraction: 0.14,
            test_fraction: 0.43,
            asr_fraction: 0.42,
            asr_noise: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let max = templates::max_classes();
        if self.num_classes < 2 || self.num_classes > max {
            return Err(Error::Config(alloc::format!(
                "num_classes must be in [2, {max}], got {}",
                self.num_classes
            )));
        }
        if self.total_size < self.num_classes {
            return Err(Error::Config(alloc::format!(
                "total_size {} is smaller than num_classes {}",
                self.total_size,
                self.num_classes
            )));
        }
        if !(self.zipf_exponent >= 0.0) || !self.zipf_exponent.is_finite() {
            return Err(Error::Config("zipf_exponent must be finite and >= 0".into()));
        }
        for (name, v) in [
            ("dev_fraction", self.dev_fraction),
            ("test_fraction", self.test_fraction),
            ("asr_fraction", self.asr_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(alloc::format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.asr_noise >= 0.0) {
            return Err(Error::Config("asr_noise must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: IntentDataset,
    pub dev: IntentDataset,
    pub test: IntentDataset,
}

/// Apportion `total` items over classes with weights `rank^(−s)` by the
/// largest-remainder method. With `min_one`, every class gets at least one.
pub fn zipf_counts(total: usize, num_classes: usize, exponent: f64, min_one: bool) -> Vec<usize> {
    if num_classes == 0 {
        return vec![];
    }
    let weights: Vec<f64> = (1..=num_classes)
        .map(|k| math::powf(k as f64, -exponent))
        .collect();
    let wsum: f64 = weights.iter().sum();
    let reserved = if min_one { num_classes.min(total) } else { 0 };
    let free = total - reserved;
    let exact: Vec<f64> = weights.iter().map(|w| w / wsum * free as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| *x as usize).collect();
    let mut rest = free - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[k] += 1;
        rest -= 1;
    }
    if min_one {
        for c in counts.iter_mut().take(reserved) {
            *c += 1;
        }
    }
    counts
}

fn class_name(class: usize) -> String {
    let (f, t) = templates::class_parts(class);
    alloc::format!("{}_{}", templates::FRAMES[f].name, templates::TOPICS[t].name)
}

fn pick<'a>(items: &'a [&'a str], rng: &mut Rng) -> &'a str {
    items[rng::below(rng, items.len())]
}

fn sample_sentence(class: usize, rng: &mut Rng) -> String {
    let (f, t) = templates::class_parts(class);
    let pattern = pick(templates::FRAMES[f].patterns, rng);
    let topic = pick(templates::TOPICS[t].phrases, rng);
    let prefix = pick(templates::PREFIXES, rng);
    let suffix = pick(templates::SUFFIXES, rng);
    let body = pattern.replace("{T}", topic);
    let mut s = String::new();
    for part in [prefix, body.as_str(), suffix] {
        if !part.is_empty() {
            if !s.is_empty() {
                s.push(' ');
            }
            s.push_str(part);
        }
    }
    s
}

fn sample_split(counts: &[usize], rng: &mut Rng) -> Vec<Utterance> {
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            out.push(Utterance::new(&sample_sentence(class, rng), class));
        }
    }
    // Fisher–Yates so classes interleave
    for i in (1..out.len()).rev() {
        let j = rng::below(rng, i + 1);
        out.swap(i, j);
    }
    out
}

/// Generate train/dev/test splits with Zipf-distributed class frequencies.
///
/// Class `k` has rank `k + 1`. Every class appears in train; dev and test
/// follow the same shape without the one-per-class floor.
pub fn generate_synthetic(spec: &GeneratorSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let names: Vec<String> = (0..spec.num_classes).map(class_name).collect();
    let scaled = |f: f64| libm::round(spec.total_size as f64 * f) as usize;

    let train_counts = zipf_counts(spec.total_size, spec.num_classes, spec.zipf_exponent, true);
    let dev_counts = zipf_counts(scaled(spec.dev_fraction), spec.num_classes, spec.zipf_exponent, false);
    let test_counts = zipf_counts(scaled(spec.test_fraction), spec.num_classes, spec.zipf_exponent, false);

    let mut rng = rng::seeded(rng::derive_seed(spec.seed, 1));
    let mut train = sample_split(&train_counts, &mut rng);
    let dev = sample_split(&dev_counts, &mut rng);
    let test = sample_split(&test_counts, &mut rng);

    if spec.asr_fraction > 0.0 {
        let channel = ErrorChannel::default_channel(spec.asr_noise);
        let mut asr_rng = rng::seeded(rng::derive_seed(spec.seed, 2));
        for u in &mut train {
            if rng::uniform(&mut asr_rng) < spec.asr_fraction {
                u.asr_tokens = Some(channel.corrupt(&u.tokens, &mut asr_rng));
            }
        }
    }

    Ok(SyntheticCorpus {
        train: IntentDataset::new(train, names.clone(), Split::Train)?,
        dev: IntentDataset::new(dev, names.clone(), Split::Dev)?,
        test: IntentDataset::new(test, names, Split::Test)?,
    })
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::shape(golds.len(), preds.len(), "predictions"));
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty prediction set".into()));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 over all `num_classes` classes. Classes
/// with no gold and no predicted instances score 0.
pub fn macro_f1(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::shape(golds.len(), preds.len(), "predictions"));
    }
    if num_classes == 0 {
        return Err(Error::InvalidInput("macro-F1 needs at least one class".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        for l in [p, g] {
            if l >= num_classes {
                return Err(Error::Index {
                    index: l,
                    len: num_classes,
                });
            }
        }
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|k| {
            let denom = 2 * tp[k] + fp[k] + fn_[k];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / num_classes as f64)
}
