//! Phoneme-confusion error channel: turns clean word sequences into
//! plausible recognition hypotheses.
//!
//! Text is phonemised through a pronunciation lexicon, each phoneme may be
//! deleted, substituted by a confusable phoneme, or followed by an inserted
//! one, and every edited word span is decoded back to the lexicon word with
//! the smallest phoneme edit distance.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Word-boundary marker in phonemised output.
pub const BOUNDARY: &str = "|";

/// Event probabilities are capped here regardless of the noise level.
pub const MAX_EVENT_PROB: f64 = 0.9;

const BUNDLED_LEXICON: &str = include_str!("../assets/lexicon.tsv");

const VOWELS: &[&str] = &[
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW",
];
const STOPS: &[&str] = &["P", "B", "T", "D", "K", "G"];
const FRICATIVES: &[&str] = &["F", "V", "TH", "DH", "S", "Z", "SH", "ZH", "HH", "CH", "JH"];
const NASALS: &[&str] = &["M", "N", "NG"];
const APPROXIMANTS: &[&str] = &["L", "R", "W", "Y"];

/// Articulatory classes used by the default confusion model.
pub const ARTICULATORY_GROUPS: &[&[&str]] = &[VOWELS, STOPS, FRICATIVES, NASALS, APPROXIMANTS];

/// Word ⇄ pronunciation map.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeLexicon {
    entries: BTreeMap<String, Vec<String>>,
    inventory: Vec<String>,
    reverse: BTreeMap<Vec<String>, Vec<String>>,
}

impl PhonemeLexicon {
    /// Build from `(word, phonemes)` pairs. Words are lowercased; later
    /// duplicates replace earlier ones.
    pub fn from_entries<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<String>)>,
    {
        let mut map = BTreeMap::new();
        for (word, phones) in entries {
            let word = word.to_lowercase();
            if word.is_empty() || phones.is_empty() {
                return Err(Error::InvalidInput(alloc::format!(
                    "lexicon entry {word:?} needs a word and at least one phoneme"
                )));
            }
            if phones.iter().any(|p| p == BOUNDARY || p.is_empty()) {
                return Err(Error::InvalidInput(alloc::format!(
                    "lexicon entry {word:?} contains a reserved or empty phoneme"
                )));
            }
            map.insert(word, phones);
        }
        let mut inventory: Vec<String> = ARTICULATORY_GROUPS
            .iter()
            .flat_map(|g| g.iter().map(|s| s.to_string()))
            .collect();
        for phones in map.values() {
            for p in phones {
                if !inventory.contains(p) {
                    inventory.push(p.clone());
                }
            }
        }
        inventory.sort();
        let mut reverse: BTreeMap<Vec<String>, Vec<String>> = BTreeMap::new();
        for (w, p) in &map {
            reverse.entry(p.clone()).or_default().push(w.clone());
        }
        Ok(PhonemeLexicon {
            entries: map,
            inventory,
            reverse,
        })
    }

    /// Parse `word<TAB>PH1 PH2 ...` lines. Blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, phones) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidInput(alloc::format!(
                    "lexicon line {}: expected `word<TAB>phonemes`",
                    n + 1
                ))
            })?;
            let phones: Vec<String> = phones.split_whitespace().map(str::to_string).collect();
            if phones.is_empty() || word.trim().is_empty() {
                return Err(Error::InvalidInput(alloc::format!(
                    "lexicon line {}: empty word or pronunciation",
                    n + 1
                )));
            }
            entries.push((word.trim().to_string(), phones));
        }
        Self::from_entries(entries)
    }

    /// The pronunciation list shipped with the crate; it covers the synthetic
    /// corpus vocabulary plus a set of phonetically close distractors.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon is well formed")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (w, p) in &self.entries {
            out.push_str(w);
            out.push('\t');
            out.push_str(&p.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn inventory(&self) -> &[String] {
        &self.inventory
    }

    /// Words sharing a pronunciation.
    pub fn words_for(&self, phones: &[String]) -> &[String] {
        self.reverse.get(phones).map_or(&[], Vec::as_slice)
    }

    /// Lexicon pronunciation, or the letter-to-sound fallback for unknown
    /// words.
    pub fn pronounce(&self, word: &str) -> Vec<String> {
        match self.entries.get(word) {
            Some(p) => p.clone(),
            None => letter_to_sound(word),
        }
    }
}

/// Deterministic spelling-based pronunciation for out-of-lexicon words.
pub fn letter_to_sound(word: &str) -> Vec<String> {
    const DIGRAPHS: &[(&str, &[&str])] = &[
        ("ch", &["CH"]),
        ("sh", &["SH"]),
        ("th", &["TH"]),
        ("ph", &["F"]),
        ("ng", &["NG"]),
        ("ck", &["K"]),
        ("ee", &["IY"]),
        ("ea", &["IY"]),
        ("oo", &["UW"]),
        ("ou", &["AW"]),
        ("ai", &["EY"]),
        ("ay", &["EY"]),
        ("oa", &["OW"]),
        ("wh", &["W"]),
    ];
    let single = |c: char| -> &'static [&'static str] {
        match c {
            'a' => &["AE"],
            'b' => &["B"],
            'c' => &["K"],
            'd' => &["D"],
            'e' => &["EH"],
            'f' => &["F"],
            'g' => &["G"],
            'h' => &["HH"],
            'i' => &["IH"],
            'j' => &["JH"],
            'k' => &["K"],
            'l' => &["L"],
            'm' => &["M"],
            'n' => &["N"],
            'o' => &["AA"],
            'p' => &["P"],
            'q' => &["K"],
            'r' => &["R"],
            's' => &["S"],
            't' => &["T"],
            'u' => &["AH"],
            'v' => &["V"],
            'w' => &["W"],
            'x' => &["K", "S"],
            'y' => &["Y"],
            'z' => &["Z"],
            _ => &[],
        }
    };
    let lower = word.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if i + 1 < chars.len() {
            let pair: String = chars[i..i + 2].iter().collect();
            if let Some((_, ph)) = DIGRAPHS.iter().find(|(g, _)| *g == pair) {
                out.extend(ph.iter().map(|s| s.to_string()));
                i += 2;
                continue;
            }
        }
        out.extend(single(chars[i]).iter().map(|s| s.to_string()));
        i += 1;
    }
    if out.is_empty() {
        out.push("AH".to_string());
    }
    out
}

/// Concatenate pronunciations with [`BOUNDARY`] between words.
pub fn phonemize<S: AsRef<str>>(tokens: &[S], lexicon: &PhonemeLexicon) -> Vec<String> {
    let mut out = Vec::new();
    for (i, w) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(BOUNDARY.to_string());
        }
        out.extend(lexicon.pronounce(w.as_ref()));
    }
    out
}

/// Per-phoneme confusion distribution plus base event rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionModel {
    /// `phoneme → {replacement → probability}`; each row sums to 1.
    pub substitutions: BTreeMap<String, BTreeMap<String, f64>>,
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    /// Global multiplier on the three event rates.
    pub noise_level: f64,
}

impl ConfusionModel {
    /// Uniform confusion within articulatory classes; base rates 0.06/0.02/0.02.
    pub fn articulatory_default() -> Self {
        let mut substitutions = BTreeMap::new();
        for group in ARTICULATORY_GROUPS {
            for &p in group.iter() {
                let others: Vec<&str> = group.iter().copied().filter(|q| *q != p).collect();
                let w = 1.0 / others.len() as f64;
                substitutions.insert(
                    p.to_string(),
                    others.iter().map(|q| (q.to_string(), w)).collect(),
                );
            }
        }
        ConfusionModel {
            substitutions,
            p_sub: 0.06,
            p_del: 0.02,
            p_ins: 0.02,
            noise_level: 1.0,
        }
    }

    pub fn with_noise_level(&self, noise_level: f64) -> Self {
        ConfusionModel {
            noise_level,
            ..self.clone()
        }
    }

    fn effective(&self, base: f64) -> f64 {
        (base * self.noise_level).min(1.0).min(MAX_EVENT_PROB)
    }

    /// `(p_sub, p_del, p_ins)` after scaling and capping.
    pub fn effective_probs(&self) -> (f64, f64, f64) {
        (
            self.effective(self.p_sub),
            self.effective(self.p_del),
            self.effective(self.p_ins),
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_sub", self.p_sub), ("p_del", self.p_del), ("p_ins", self.p_ins)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(alloc::format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(Error::Config(alloc::format!(
                "noise_level must be finite and >= 0, got {}",
                self.noise_level
            )));
        }
        for (p, row) in &self.substitutions {
            let total: f64 = row.values().sum();
            if row.values().any(|&x| x < 0.0) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::Config(alloc::format!(
                    "substitution row for {p} must be non-negative and sum to 1 (sum {total})"
                )));
            }
        }
        Ok(())
    }
}

/// Anything that can turn a clean word sequence into an errorful hypothesis.
pub trait ErrorModel {
    fn corrupt(&self, tokens: &[String], rng: &mut Rng) -> Vec<String>;
}

/// Compiled substitution row: cumulative probabilities over phoneme ids.
#[derive(Debug, Clone, PartialEq)]
struct SubRow {
    targets: Vec<u16>,
    cdf: Vec<f64>,
}

impl SubRow {
    fn pick(&self, u: f64) -> Option<u16> {
        if self.targets.is_empty() {
            return None;
        }
        let idx = self.cdf.iter().position(|&c| u < c).unwrap_or(self.targets.len() - 1);
        Some(self.targets[idx])
    }
}

/// Lexicon + confusion model, compiled to integer phoneme ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorChannel {
    lexicon: PhonemeLexicon,
    confusion: ConfusionModel,
    phone_ids: BTreeMap<String, u16>,
    rows: Vec<SubRow>,
    /// Lexicon words (sorted) with coded pronunciations, for decoding.
    decode_table: Vec<(String, Vec<u16>)>,
}

impl ErrorChannel {
    pub fn new(lexicon: PhonemeLexicon, confusion: ConfusionModel) -> Result<Self> {
        confusion.validate()?;
        if lexicon.is_empty() {
            return Err(Error::Config("error channel needs a non-empty lexicon".into()));
        }
        let mut inventory: Vec<String> = lexicon.inventory().to_vec();
        for (p, row) in &confusion.substitutions {
            for q in core::iter::once(p).chain(row.keys()) {
                if !inventory.contains(q) {
                    inventory.push(q.clone());
                }
            }
        }
        inventory.sort();
        let phone_ids: BTreeMap<String, u16> = inventory
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u16))
            .collect();
        let rows = inventory
            .iter()
            .map(|p| {
                let mut row = SubRow {
                    targets: vec![],
                    cdf: vec![],
                };
                if let Some(dist) = confusion.substitutions.get(p) {
                    let mut acc = 0.0;
                    for (q, &w) in dist {
                        if w > 0.0 {
                            acc += w;
                            row.targets.push(phone_ids[q]);
                            row.cdf.push(acc);
                        }
                    }
                }
                row
            })
            .collect();
        let decode_table = lexicon
            .entries
            .iter()
            .map(|(w, p)| (w.clone(), p.iter().map(|x| phone_ids[x]).collect()))
            .collect();
        Ok(ErrorChannel {
            lexicon,
            confusion,
            phone_ids,
            rows,
            decode_table,
        })
    }

    /// Bundled lexicon with the articulatory default confusions.
    pub fn default_channel(noise_level: f64) -> Self {
        let confusion = ConfusionModel::articulatory_default().with_noise_level(noise_level);
        ErrorChannel::new(PhonemeLexicon::bundled(), confusion).expect("default channel is valid")
    }

    pub fn lexicon(&self) -> &PhonemeLexicon {
        &self.lexicon
    }

    pub fn confusion(&self) -> &ConfusionModel {
        &self.confusion
    }

    pub fn noise_level(&self) -> f64 {
        self.confusion.noise_level
    }

    /// Same lexicon and confusions at a different noise level.
    pub fn with_noise_level(&self, noise_level: f64) -> Result<Self> {
        if !(noise_level >= 0.0) || !noise_level.is_finite() {
            return Err(Error::Config(alloc::format!(
                "noise_level must be finite and >= 0, got {noise_level}"
            )));
        }
        let mut c = self.clone();
        c.confusion.noise_level = noise_level;
        Ok(c)
    }

    fn code(&self, phones: &[String]) -> Vec<u16> {
        // every symbol produced by the lexicon or the fallback is in the inventory
        phones.iter().filter_map(|p| self.phone_ids.get(p).copied()).collect()
    }

    /// Lexicon word whose pronunciation is closest to `phones` (ties go to
    /// the lexicographically smallest word).
    pub fn decode_span(&self, phones: &[String]) -> String {
        self.decode_coded(&self.code(phones)).to_string()
    }

    fn decode_coded(&self, span: &[u16]) -> &str {
        let mut best: Option<(&str, usize)> = None;
        let mut buf = Vec::new();
        for (word, pron) in &self.decode_table {
            let bound = best.map_or(usize::MAX, |(_, d)| d);
            if span.len().abs_diff(pron.len()) >= bound {
                continue;
            }
            let d = edit_distance_buf(span, pron, &mut buf);
            if d < bound {
                best = Some((word, d));
                if d == 0 {
                    break;
                }
            }
        }
        best.map_or("", |(w, _)| w)
    }

    /// Apply phoneme events to one pronunciation. Returns `None` when no
    /// event changed it. Five uniforms are drawn per phoneme whatever
    /// happens, which keeps draws aligned across noise levels.
    fn perturb(&self, pron: &[u16], rng: &mut Rng) -> Option<Vec<u16>> {
        let (p_sub, p_del, p_ins) = self.confusion.effective_probs();
        let mut out = Vec::with_capacity(pron.len() + 1);
        let mut changed = false;
        for &ph in pron {
            let [u_del, u_sub, u_pick, u_ins, u_ins_pick] = core::array::from_fn(|_| rng::uniform(rng));
            let row = &self.rows[ph as usize];
            if u_del < p_del {
                changed = true;
            } else if u_sub < p_sub {
                match row.pick(u_pick) {
                    Some(q) => {
                        changed |= q != ph;
                        out.push(q);
                    }
                    None => out.push(ph),
                }
            } else {
                out.push(ph);
            }
            if u_ins < p_ins {
                out.push(row.pick(u_ins_pick).unwrap_or(ph));
                changed = true;
            }
        }
        changed.then_some(out)
    }
}

impl ErrorModel for ErrorChannel {
    /// Sample one hypothesis. At noise level 0 this is the identity.
    fn corrupt(&self, tokens: &[String], rng: &mut Rng) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        for w in tokens {
            let pron = self.code(&self.lexicon.pronounce(w));
            match self.perturb(&pron, rng) {
                None => out.push(w.clone()),
                Some(span) if span.is_empty() => {}
                Some(span) => out.push(self.decode_coded(&span).to_string()),
            }
        }
        if out.is_empty() {
            if let Some(first) = tokens.first() {
                out.push(first.clone());
            }
        }
        out
    }
}

/// Corrupt `tokens` with probability `epsilon`, else return them unchanged.
pub fn hallucinate<M: ErrorModel + ?Sized>(tokens: &[String], channel: &M, epsilon: f64, rng: &mut Rng) -> Vec<String> {
    if rng::uniform(rng) < epsilon {
        channel.corrupt(tokens, rng)
    } else {
        tokens.to_vec()
    }
}

/// Up to `k` distinct hypotheses different from `tokens`, drawn from at most
/// `4k` samples, in first-seen order.
pub fn sample_alternatives<M: ErrorModel + ?Sized>(
    tokens: &[String],
    channel: &M,
    k: usize,
    rng: &mut Rng,
) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::with_capacity(k);
    for _ in 0..4 * k {
        if out.len() == k {
            break;
        }
        let alt = channel.corrupt(tokens, rng);
        if alt.as_slice() != tokens && !out.contains(&alt) {
            out.push(alt);
        }
    }
    out
}

fn edit_distance_buf<T: PartialEq>(a: &[T], b: &[T], row: &mut Vec<usize>) -> usize {
    row.clear();
    row.extend(0..=b.len());
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            let cost = if x == y { diag } else { diag + 1 };
            row[j + 1] = cost.min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    edit_distance_buf(a, b, &mut Vec::new())
}

/// `(S + D + I) / |reference|`.
pub fn wer<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("WER needs a non-empty reference".into()));
    }
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Corpus-level WER: total edits over total reference words.
pub fn corpus_wer<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [String], &'a [String])>,
{
    let (mut edits, mut words) = (0usize, 0usize);
    for (r, h) in pairs {
        if r.is_empty() {
            return Err(Error::InvalidInput("WER needs non-empty references".into()));
        }
        edits += edit_distance(r, h);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::InvalidInput("WER over an empty corpus".into()));
    }
    Ok(edits as f64 / words as f64)
}

/// Knobs for [`calibrate_noise_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    /// Sentences corrupted per probe, rounded up to whole passes over the
    /// corpus so every sentence is weighted equally.
    pub probe_sentences: usize,
    pub probe_seed: u64,
    pub max_iterations: usize,
    pub max_noise: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            probe_sentences: 8000,
            probe_seed: 0x5EED_CA1B,
            max_iterations: 40,
            max_noise: 10.0,
        }
    }
}

pub const MIN_CALIBRATION_CORPUS: usize = 200;
pub const MIN_CALIBRATION_PROBE: usize = 500;
pub const MIN_CALIBRATION_TOLERANCE: f64 = 0.005;

/// Corpus WER of `channel` over `n` sentences drawn cyclically from
/// `corpus`, with a fixed seed.
pub fn measure_wer<M: ErrorModel + ?Sized>(channel: &M, corpus: &[Vec<String>], n: usize, seed: u64) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot measure WER on an empty corpus".into()));
    }
    let mut rng = rng::seeded(seed);
    let (mut edits, mut words) = (0usize, 0usize);
    let mut buf = Vec::new();
    for i in 0..n {
        let sent = &corpus[i % corpus.len()];
        if sent.is_empty() {
            return Err(Error::InvalidInput("WER needs non-empty references".into()));
        }
        let hyp = channel.corrupt(sent, &mut rng);
        edits += edit_distance_buf(sent, &hyp, &mut buf);
        words += sent.len();
    }
    Ok(edits as f64 / words.max(1) as f64)
}

/// Binary-search the noise level so the channel's corpus WER lands within
/// `tolerance` of `target`. The search keeps narrowing until the probe is
/// within a quarter of the tolerance (or the iterations run out) and returns
/// the closest level seen.
pub fn calibrate_noise(channel: &ErrorChannel, corpus: &[Vec<String>], target_wer: f64, tolerance: f64) -> Result<f64> {
    calibrate_noise_with(channel, corpus, target_wer, tolerance, &CalibrationSettings::default())
}

pub fn calibrate_noise_with(
    channel: &ErrorChannel,
    corpus: &[Vec<String>],
    target_wer: f64,
    tolerance: f64,
    settings: &CalibrationSettings,
) -> Result<f64> {
    if !(0.0..1.0).contains(&target_wer) {
        return Err(Error::InvalidInput(alloc::format!("target WER {target_wer} outside [0, 1)")));
    }
    if corpus.len() < MIN_CALIBRATION_CORPUS {
        return Err(Error::InvalidInput(alloc::format!(
            "calibration needs at least {MIN_CALIBRATION_CORPUS} sentences, got {}",
            corpus.len()
        )));
    }
    if !(tolerance >= MIN_CALIBRATION_TOLERANCE) {
        return Err(Error::InvalidInput(alloc::format!(
            "calibration tolerance must be >= {MIN_CALIBRATION_TOLERANCE}, got {tolerance}"
        )));
    }
    if target_wer == 0.0 {
        return Ok(0.0);
    }
    let n = settings.probe_sentences.max(MIN_CALIBRATION_PROBE).div_ceil(corpus.len()) * corpus.len();
    let probe = |level: f64| -> Result<f64> {
        let c = channel.with_noise_level(level)?;
        measure_wer(&c, corpus, n, settings.probe_seed)
    };
    let (mut lo, mut hi) = (0.0, settings.max_noise);
    let mut best = (f64::INFINITY, 0.0, 0.0); // (|error|, wer, level)
    for _ in 0..settings.max_iterations {
        let mid = 0.5 * (lo + hi);
        let measured = probe(mid)?;
        let err = (measured - target_wer).abs();
        if err < best.0 {
            best = (err, measured, mid);
        }
        if err <= 0.25 * tolerance {
            break;
        }
        if measured < target_wer {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 <= tolerance {
        return Ok(best.2);
    }
    Err(Error::Calibration {
        target: target_wer,
        best_wer: best.1,
        best_noise: best.2,
    })
}
