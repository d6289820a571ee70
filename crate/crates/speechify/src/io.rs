//! File formats: JSON Lines datasets, JSON checkpoints and indices, lexicon
//! and confusion files, pretrained vectors, and plain sentence lists.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use speechify_core::data::{tokenize, IntentDataset, Split, Utterance, Vocab};
use speechify_core::error_channel::{ConfusionModel, ErrorChannel, PhonemeLexicon};
use speechify_core::inference::NNIndex;
use speechify_core::model::{ModelConfig, ModelParams, SluModel};
use speechify_core::numerics::Tensor;
use speechify_core::training::{PhaseHistory, TrainHistory};

use crate::error::{AppError, Result};

pub const CHECKPOINT_FORMAT: &str = "speechify-checkpoint";
pub const INDEX_FORMAT: &str = "speechify-index";
pub const FORMAT_VERSION: u32 = 1;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| AppError::parse(path, e.line(), e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    num_classes: usize,
    class_names: Vec<String>,
    split: Split,
}

#[derive(Serialize)]
struct DatasetLine<'a> {
    text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    asr_text: Option<String>,
    label: &'a str,
}

/// Parse a dataset. The first non-empty line is the header; each later
/// non-empty line is one utterance whose label is a class name.
pub fn parse_dataset(text: &str, path: &Path) -> Result<IntentDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (header_no, header_line) = lines
        .next()
        .ok_or_else(|| AppError::parse(path, 1, "missing header line"))?;
    let header: DatasetHeader = serde_json::from_str(header_line)
        .map_err(|e| AppError::parse(path, header_no + 1, format!("bad header: {e}")))?;
    if header.class_names.len() != header.num_classes {
        return Err(AppError::parse(
            path,
            header_no + 1,
            format!(
                "header lists {} class names for num_classes = {}",
                header.class_names.len(),
                header.num_classes
            ),
        ));
    }
    let mut utterances = Vec::new();
    for (i, line) in lines {
        let no = i + 1;
        let obj: Value = serde_json::from_str(line).map_err(|e| AppError::parse(path, no, e.to_string()))?;
        let field = |key: &str| -> Result<Option<&str>> {
            match obj.get(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(s)),
                Some(_) => Err(AppError::parse(path, no, format!("\"{key}\" must be a string"))),
            }
        };
        let text = field("text")?.ok_or_else(|| AppError::parse(path, no, "missing \"text\""))?;
        let label = field("label")?.ok_or_else(|| AppError::parse(path, no, "missing \"label\""))?;
        let label = header
            .class_names
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| AppError::parse(path, no, format!("unknown label {label:?}")))?;
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(AppError::parse(path, no, "empty \"text\""));
        }
        let asr_tokens = match field("asr_text")? {
            Some(a) => {
                let t = tokenize(a);
                if t.is_empty() {
                    return Err(AppError::parse(path, no, "empty \"asr_text\""));
                }
                Some(t)
            }
            None => None,
        };
        utterances.push(Utterance {
            tokens,
            asr_tokens,
            label,
        });
    }
    Ok(IntentDataset::new(utterances, header.class_names, header.split)?)
}

pub fn format_dataset(ds: &IntentDataset) -> Result<String> {
    let header = DatasetHeader {
        num_classes: ds.num_classes,
        class_names: ds.class_names.clone(),
        split: ds.split,
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for u in &ds.utterances {
        let line = DatasetLine {
            text: u.tokens.join(" "),
            asr_text: u.asr_tokens.as_ref().map(|a| a.join(" ")),
            label: &ds.class_names[u.label],
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<IntentDataset> {
    parse_dataset(&read_text(path)?, path)
}

pub fn write_dataset(ds: &IntentDataset, path: &Path) -> Result<()> {
    write_text(path, &format_dataset(ds)?)
}

/// One tokenised sentence per non-empty line.
pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_text(path)?
        .lines()
        .map(tokenize)
        .filter(|t| !t.is_empty())
        .collect())
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vocab,
    class_names: Vec<String>,
    parameters: Vec<NamedTensor>,
}

fn check_format(path: &Path, format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(AppError::parse(path, 1, format!("expected a {expected} file, found {format:?}")));
    }
    if version != FORMAT_VERSION {
        return Err(AppError::parse(path, 1, format!("unsupported {expected} version {version}")));
    }
    Ok(())
}

pub fn save_model(model: &SluModel, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: FORMAT_VERSION,
        config: model.params.config.clone(),
        vocab: model.vocab.clone(),
        class_names: model.class_names.clone(),
        parameters: model
            .params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape,
                values: t.values,
            })
            .collect(),
    };
    write_json(path, &ckpt)
}

pub fn load_model(path: &Path) -> Result<SluModel> {
    let ckpt: Checkpoint = read_json(path)?;
    check_format(path, &ckpt.format, ckpt.version, CHECKPOINT_FORMAT)?;
    let tensors: Vec<(String, Tensor)> = ckpt
        .parameters
        .into_iter()
        .map(|t| Ok((t.name, Tensor::new(t.shape, t.values)?)))
        .collect::<Result<_>>()?;
    let params = ModelParams::from_named_tensors(&ckpt.config, &tensors)?;
    Ok(SluModel::new(ckpt.vocab, ckpt.class_names, params)?)
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    index: NNIndex,
}

pub fn save_index(index: &NNIndex, path: &Path) -> Result<()> {
    write_json(
        path,
        &IndexFile {
            format: INDEX_FORMAT.into(),
            version: FORMAT_VERSION,
            index: index.clone(),
        },
    )
}

pub fn load_index(path: &Path) -> Result<NNIndex> {
    let file: IndexFile = read_json(path)?;
    check_format(path, &file.format, file.version, INDEX_FORMAT)?;
    file.index.validate()?;
    Ok(file.index)
}

pub fn load_lexicon(path: &Path) -> Result<PhonemeLexicon> {
    PhonemeLexicon::parse(&read_text(path)?).map_err(|e| match e {
        speechify_core::Error::InvalidInput(msg) => AppError::parse(path, 0, msg),
        other => other.into(),
    })
}

pub fn load_confusion(path: &Path) -> Result<ConfusionModel> {
    let model: ConfusionModel = read_json(path)?;
    model.validate()?;
    Ok(model)
}

/// Channel from optional lexicon and confusion files (bundled defaults
/// otherwise) at the given noise level.
pub fn load_channel(lexicon: Option<&Path>, confusion: Option<&Path>, noise_level: f64) -> Result<ErrorChannel> {
    let lexicon = match lexicon {
        Some(p) => load_lexicon(p)?,
        None => PhonemeLexicon::bundled(),
    };
    let confusion = match confusion {
        Some(p) => load_confusion(p)?,
        None => ConfusionModel::articulatory_default(),
    };
    Ok(ErrorChannel::new(lexicon, confusion.with_noise_level(noise_level))?)
}

/// Whitespace-separated `word v1 v2 …` lines.
pub fn read_vectors(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let v: Vec<f64> = parts
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| AppError::parse(path, i + 1, format!("bad number: {e}")))?;
        if *dim.get_or_insert(v.len()) != v.len() || v.is_empty() {
            return Err(AppError::parse(path, i + 1, "inconsistent vector dimension"));
        }
        out.push((word.to_lowercase(), v));
    }
    Ok(out)
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    phase: &'a str,
    epoch: usize,
    train_loss: Option<f64>,
    dev_accuracy: f64,
    dev_macro_f1: f64,
    best: bool,
}

fn phase_lines(phase: &PhaseHistory, out: &mut String) -> Result<()> {
    for rec in std::iter::once(&phase.initial).chain(&phase.epochs) {
        let line = HistoryLine {
            phase: &phase.phase,
            epoch: rec.epoch,
            train_loss: rec.train_loss,
            dev_accuracy: rec.dev_accuracy,
            dev_macro_f1: rec.dev_macro_f1,
            best: rec.epoch == phase.best_epoch,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(())
}

/// One JSON object per evaluated epoch, epoch 0 being the starting point.
pub fn format_history(history: &TrainHistory) -> Result<String> {
    let mut out = String::new();
    for phase in &history.phases {
        phase_lines(phase, &mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use speechify_core::data::{generate_synthetic, GeneratorSpec};

    #[test]
    fn dataset_round_trip() {
        let c = generate_synthetic(&GeneratorSpec {
            num_classes: 5,
            total_size: 50,
            ..Default::default()
        })
        .unwrap();
        let p = Path::new("mem.jsonl");
        for ds in [&c.train, &c.dev, &c.test] {
            let text = format_dataset(ds).unwrap();
            assert_eq!(&parse_dataset(&text, p).unwrap(), ds);
        }
    }

    #[test]
    fn header_only_is_an_empty_dataset() {
        let text = "{\"num_classes\":2,\"class_names\":[\"a\",\"b\"],\"split\":\"dev\"}\n";
        let ds = parse_dataset(text, Path::new("x")).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.split, Split::Dev);
    }

    #[test]
    fn dataset_errors_name_the_line() {
        let head = "{\"num_classes\":2,\"class_names\":[\"a\",\"b\"],\"split\":\"dev\"}\n";
        let missing = format!("{head}{{\"text\":\"hi\",\"label\":\"a\"}}\n{{\"text\":\"yo\"}}\n");
        let err = parse_dataset(&missing, Path::new("d.jsonl")).unwrap_err();
        assert!(matches!(err, AppError::Parse { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("label"));
        let unknown = format!("{head}{{\"text\":\"hi\",\"label\":\"c\"}}\n");
        assert!(matches!(
            parse_dataset(&unknown, Path::new("d")).unwrap_err(),
            AppError::Parse { line: 2, .. }
        ));
        assert!(parse_dataset("", Path::new("d")).is_err());
        let broken = format!("{head}not json\n");
        assert!(matches!(parse_dataset(&broken, Path::new("d")).unwrap_err(), AppError::Parse { line: 2, .. }));
    }

    #[test]
    fn vectors_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        fs::write(&p, "Pain 0.5 -1\nback 1e-3 2\n").unwrap();
        let v = read_vectors(&p).unwrap();
        assert_eq!(v[0], ("pain".to_string(), vec![0.5, -1.0]));
        fs::write(&p, "a 1 2\nb 1\n").unwrap();
        assert!(matches!(read_vectors(&p).unwrap_err(), AppError::Parse { line: 2, .. }));
    }
}
