//! Acceptance checks, one line per criterion.
//!
//! Set `SPEECHIFY_ACCEPTANCE=1,2,3` to run a subset.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use speechify::experiment::{self, ExperimentSpec, Report};
use speechify_core::data::{generate_synthetic, GeneratorSpec, IntentDataset, Vocab};
use speechify_core::error_channel::{self, ErrorChannel, ErrorModel};
use speechify_core::inference::{build_index, fuse, fuse_predict, nn_class_scores, NNIndex};
use speechify_core::losses::{self, LossHyperparams, PairInstance};
use speechify_core::model::{init_params, ModelConfig, ModelParams, SluModel};
use speechify_core::numerics::{self, argmax, grad_check};
use speechify_core::rng::{self, Rng};
use speechify_core::training::{self, make_pairs, ModelShape, Optimizers, StepContext, TrainConfig, TrainMode};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> std::result::Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{what}: got {got}, expected {want} ± {tol}"))
}

fn e<T: std::fmt::Display>(err: T) -> String {
    err.to_string()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        embed_dim: 4,
        hidden_dim: 4,
        attention_dim: 4,
        mlp_dim: 4,
        num_classes: 3,
        dropout_rate: 0.0,
        max_len: 16,
    }
}

/// Initialised parameters plus uniform noise on every entry, biases included.
fn random_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = init_params(config, seed).unwrap();
    let mut r = rng::seeded(seed ^ 0xABCD);
    for block in p.blocks_mut() {
        for x in block.iter_mut() {
            *x += 0.3 * (2.0 * rng::uniform(&mut r) - 1.0);
        }
    }
    p
}

fn tiny_data() -> (IntentDataset, Vocab) {
    use speechify_core::data::{Split, Utterance};
    let words = ["a", "b", "c", "d", "e", "f", "g", "h", "i"];
    let vocab = Vocab::from_words(words.iter().map(|w| w.to_string()));
    let texts = [("a b c", 0), ("b c", 0), ("d e f", 1), ("e f g h", 1), ("i", 2), ("g h i a", 2)];
    let utts = texts.iter().map(|(t, y)| Utterance::new(t, *y)).collect();
    let names = vec!["x".into(), "y".into(), "z".into()];
    (IntentDataset::new(utts, names, Split::Train).unwrap(), vocab)
}

/// Replaces a word by the next letter with probability one half.
struct Shift;

impl ErrorModel for Shift {
    fn corrupt(&self, tokens: &[String], rng: &mut Rng) -> Vec<String> {
        tokens
            .iter()
            .map(|t| {
                if rng::uniform(rng) < 0.5 {
                    let c = t.as_bytes()[0];
                    char::from(b'a' + (c - b'a' + 1) % 9).to_string()
                } else {
                    t.clone()
                }
            })
            .collect()
    }
}

fn gradients() -> Check {
    let (ds, vocab) = tiny_data();
    let config = tiny_config();
    ensure(vocab.len() == 11, || format!("vocab {}", vocab.len()))?;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for seed in 0..20u64 {
        let params = random_params(&config, seed);
        let point = params.to_flat();
        let batch = make_pairs(&ds, 4, 0.5, 1, &mut rng::seeded(seed)).map_err(e)?.remove(0);
        let arms: [(&str, f64); 3] = [("L_con", 1.0), ("L_mix", 0.0), ("L1", 0.5)];
        for (name, beta) in arms {
            let hp = LossHyperparams {
                beta_weight: beta,
                ..Default::default()
            };
            let ctx = StepContext {
                data: &ds,
                vocab: &vocab,
                channel: &Shift,
                hp: &hp,
            };
            let f = |x: &[f64]| {
                let p = ModelParams::from_flat(&config, x).unwrap();
                let mut g = ModelParams::zeros(&config);
                let l = training::pairwise_gradient(&p, &batch, &ctx, 0.5, &mut rng::seeded(seed + 100), &mut g).unwrap();
                (l.total, g.to_flat())
            };
            let err = grad_check(f, &point, 1e-6).map_err(e)?;
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(err);
        }
        let hp = LossHyperparams {
            eta: 0.7,
            ..Default::default()
        };
        let ctx = StepContext {
            data: &ds,
            vocab: &vocab,
            channel: &Shift,
            hp: &hp,
        };
        let idx = [0usize, 2, 3, 5];
        let f = |x: &[f64]| {
            let p = ModelParams::from_flat(&config, x).unwrap();
            let mut g = ModelParams::zeros(&config);
            let l = training::finetune_gradient(&p, &idx, &ctx, false, &mut rng::seeded(seed + 200), &mut g).unwrap();
            (l.total, g.to_flat())
        };
        let err = grad_check(f, &point, 1e-6).map_err(e)?;
        let w = worst.entry("L2").or_insert(0.0);
        *w = w.max(err);
    }
    let summary = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst.values().all(|&w| w < 1e-4), || format!("max relative error above 1e-4: {summary}"))?;
    Ok(format!("20 seeds, max relative error {summary}"))
}

fn oracle_softmax(z: &[f64]) -> Vec<f64> {
    let s: f64 = z.iter().map(|x| x.exp()).sum();
    z.iter().map(|x| x.exp() / s).collect()
}

fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

fn loss_oracles() -> Check {
    const TOL: f64 = 1e-5;
    let mut n = 0;
    let mut check = |got: f64, oracle: f64, stated: Option<f64>, what: &str| -> std::result::Result<(), String> {
        close(got, oracle, TOL, what)?;
        if let Some(s) = stated {
            close(oracle, s, TOL, &format!("{what} (oracle vs stated)"))?;
        }
        n += 1;
        Ok(())
    };
    let sm = numerics::softmax(&[1.0, 0.0]).map_err(e)?;
    let o = oracle_softmax(&[1.0, 0.0]);
    check(sm[0], o[0], Some(0.73106), "softmax[0]")?;
    check(sm[1], o[1], Some(0.26894), "softmax[1]")?;

    let kl = numerics::kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).map_err(e)?;
    check(kl, 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln(), Some(0.14384), "KL([.5,.5]||[.25,.75])")?;
    let kl = numerics::kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).map_err(e)?;
    check(kl, oracle_kl(&[1.0, 0.0], &[0.5, 0.5]), Some(0.69315), "KL([1,0]||[.5,.5])")?;

    let ce = numerics::cross_entropy(&[0.25, 0.75], 0).map_err(e)?;
    check(ce, -(0.25f64).ln(), Some(1.38629), "CE label 0")?;
    let ce = numerics::cross_entropy(&[0.5, 0.5], 1).map_err(e)?;
    check(ce, -(0.5f64).ln(), Some(0.69315), "CE label 1")?;

    let hp = LossHyperparams::default();
    let d = ((1.0f64 - 0.0).powi(2) + (0.0f64 - 1.0).powi(2)).sqrt();
    let neg = losses::contrastive_loss(&[1.0, 0.0], &[0.0, 1.0], false, &hp).map_err(e)?;
    check(neg, 0.5 * (hp.m_neg - d).max(0.0).powi(2), Some(0.0), "contrastive negative")?;
    let pos = losses::contrastive_loss(&[1.0, 0.0], &[0.0, 1.0], true, &hp).map_err(e)?;
    check(pos, 0.5 * (d - hp.m_pos).max(0.0).powi(2), Some(0.18863), "contrastive positive")?;

    let (r_mix, y_mix) = losses::mixup(&[1.0, 0.0], &[0.0, 1.0], 0, 1, 3, 0.5).map_err(e)?;
    for (k, (got, want)) in r_mix.iter().zip([0.5 * 1.0 + 0.5 * 0.0, 0.5 * 0.0 + 0.5 * 1.0]).enumerate() {
        check(*got, want, Some(0.5), &format!("r_mix[{k}]"))?;
    }
    for (k, (got, want)) in y_mix.iter().zip([0.5, 0.5, 0.0]).enumerate() {
        check(*got, want, None, &format!("y_mix[{k}]"))?;
    }

    // uniform logits give softmax 1/3 each
    let ml = losses::mixup_loss(&[0.5, 0.5, 0.0], &[0.0, 0.0, 0.0]).map_err(e)?;
    let oracle = oracle_kl(&[0.5, 0.5, 0.0], &[1.0 / 3.0; 3]);
    check(ml, oracle, None, "mixup loss")?;
    close(oracle, 0.5 * 1.5f64.ln() * 2.0, TOL, "mixup loss derivation")?;
    let stated_mixup = 0.28768;

    check(losses::pairwise_loss_l1(2.0, 4.0, 0.25), 0.25 * 2.0 + 0.75 * 4.0, Some(3.5), "L1")?;

    // L2 on random logits against component oracles, then the stated composition
    let mut r = rng::seeded(42);
    for _ in 0..50 {
        let zc: Vec<f64> = (0..4).map(|_| 4.0 * rng::uniform(&mut r) - 2.0).collect();
        let ze: Vec<f64> = (0..4).map(|_| 4.0 * rng::uniform(&mut r) - 2.0).collect();
        let y = rng::below(&mut r, 4);
        let eta = 2.0 * rng::uniform(&mut r);
        let l = losses::finetune_loss_l2_grad(&zc, &ze, y, eta).map_err(e)?;
        let (p, q) = (oracle_softmax(&zc), oracle_softmax(&ze));
        check(l.ce_clean, -p[y].ln(), None, "L2 ce_clean")?;
        check(l.ce_err, -q[y].ln(), None, "L2 ce_err")?;
        check(l.kl, oracle_kl(&p, &q), None, "L2 kl")?;
        check(l.total, -p[y].ln() + eta * (-q[y].ln() + oracle_kl(&p, &q)), None, "L2 total")?;
    }
    check(1.0 + 1.0 * (2.0 + 0.5), 3.5, Some(3.5), "L2 composition")?;
    Ok(format!(
        "{n} values match independent oracles to 1e-5; the stated mixup value {stated_mixup} \
         disagrees with its own derivation 0.5·ln(1.5)·2 = {oracle:.5}, the oracle value is asserted"
    ))
}

/// Shortest edit-sequence length by breadth-first search over every word
/// sequence of length ≤ 4 on `alphabet`, one insertion, deletion or
/// substitution per step.
fn bfs_distances(alphabet: &[&str], max_len: usize) -> HashMap<(Vec<usize>, Vec<usize>), usize> {
    let mut all: Vec<Vec<usize>> = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for a in 0..alphabet.len() {
                let mut t: Vec<usize> = s.clone();
                t.push(a);
                next.push(t);
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    let neighbours = |s: &Vec<usize>| -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for i in 0..s.len() {
            let mut t = s.clone();
            t.remove(i);
            out.push(t);
            for a in 0..alphabet.len() {
                if a != s[i] {
                    let mut t = s.clone();
                    t[i] = a;
                    out.push(t);
                }
            }
        }
        if s.len() < max_len {
            for i in 0..=s.len() {
                for a in 0..alphabet.len() {
                    let mut t = s.clone();
                    t.insert(i, a);
                    out.push(t);
                }
            }
        }
        out
    };
    let mut dist = HashMap::new();
    for src in &all {
        let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
        seen.insert(src.clone(), 0);
        let mut queue = VecDeque::from([src.clone()]);
        while let Some(s) = queue.pop_front() {
            let d = seen[&s];
            for t in neighbours(&s) {
                if !seen.contains_key(&t) {
                    seen.insert(t.clone(), d + 1);
                    queue.push_back(t);
                }
            }
        }
        for (t, d) in seen {
            dist.insert((src.clone(), t), d);
        }
    }
    dist
}

fn wer_oracle() -> Check {
    let alphabet = ["show", "me", "flights"];
    let dist = bfs_distances(&alphabet, 4);
    let words = |s: &[usize]| s.iter().map(|&i| alphabet[i].to_string()).collect::<Vec<_>>();
    let mut pairs = 0;
    for ((r, h), &d) in &dist {
        let (rw, hw) = (words(r), words(h));
        let dp = error_channel::edit_distance(&rw, &hw);
        ensure(dp == d, || format!("edit distance {rw:?} -> {hw:?}: dp {dp}, search {d}"))?;
        if rw.is_empty() {
            ensure(error_channel::wer(&rw, &hw).is_err(), || "empty reference accepted".into())?;
        } else {
            let w = error_channel::wer(&rw, &hw).map_err(e)?;
            ensure(w == d as f64 / rw.len() as f64, || format!("wer {rw:?} -> {hw:?}: {w}"))?;
        }
        pairs += 1;
    }
    ensure(pairs == 121 * 121, || format!("{pairs} pairs enumerated"))?;
    Ok(format!("{pairs} ref/hyp pairs (lengths 0..=4, 3 words) agree with exhaustive search"))
}

fn calibration() -> Check {
    let corpus = generate_synthetic(&GeneratorSpec {
        seed: 2024,
        ..Default::default()
    })
    .map_err(e)?;
    let sentences: Vec<Vec<String>> = [&corpus.train, &corpus.dev, &corpus.test]
        .iter()
        .flat_map(|ds| ds.utterances.iter().map(|u| u.tokens.clone()))
        .collect();
    let channel = ErrorChannel::default_channel(1.0);
    let mut parts = Vec::new();
    for (i, target) in experiment::DEFAULT_WER_TARGETS.into_iter().enumerate() {
        let t0 = Instant::now();
        let noise = error_channel::calibrate_noise(&channel, &sentences, target, 0.005).map_err(e)?;
        let ch = channel.with_noise_level(noise).map_err(e)?;
        let mut r = rng::seeded(0xF2E5_0000 + i as u64);
        let hyps: Vec<Vec<String>> = sentences.iter().map(|s| ch.corrupt(s, &mut r)).collect();
        let measured =
            error_channel::corpus_wer(sentences.iter().zip(&hyps).map(|(a, b)| (a.as_slice(), b.as_slice()))).map_err(e)?;
        let secs = t0.elapsed().as_secs_f64();
        close(measured, target, 0.01, &format!("target {target}"))?;
        ensure(secs < 60.0, || format!("target {target} took {secs:.1}s"))?;
        parts.push(format!("{target} -> {measured:.4}"));
    }
    Ok(format!("{} sentences, fresh seeds: {}", sentences.len(), parts.join(", ")))
}

fn routing() -> Check {
    let corpus = generate_synthetic(&GeneratorSpec {
        num_classes: 10,
        total_size: 300,
        seed: 8,
        ..Default::default()
    })
    .map_err(e)?;
    let channel = ErrorChannel::default_channel(1.0);
    let mut config = TrainConfig {
        mode: TrainMode::PairwiseHalluc,
        max_epochs: 1,
        model: ModelShape {
            embed_dim: 16,
            hidden_dim: 16,
            attention_dim: 16,
            mlp_dim: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    config.loss_hp.beta_weight = 1.0;
    let mut model = training::init_model(&corpus.train, &config, &channel).map_err(e)?;
    let before = model.params.clone();
    let ctx = StepContext {
        data: &corpus.train,
        vocab: &model.vocab,
        channel: &channel,
        hp: &config.loss_hp,
    };
    let mut params = before.clone();
    let mut opt = Optimizers::new(&params);
    let mut r = rng::seeded(3);
    for step in 0..5 {
        let batch: Vec<PairInstance> = make_pairs(&corpus.train, 16, 0.5, 1, &mut r).map_err(e)?.remove(0);
        training::pairwise_train_step(&mut params, &batch, &ctx, 0.5, &mut opt, 1e-2, &mut r, (1, step)).map_err(e)?;
    }
    let bits = |p: &ModelParams| p.to_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let enc = before.encoder_len();
    let (a, b) = (bits(&before), bits(&params));
    ensure(a[enc..] == b[enc..], || "classifier moved under single steps".into())?;
    ensure(a[..enc] != b[..enc], || "encoder did not move".into())?;
    // a whole pretraining phase routes the same way
    training::pretrain(&mut model, &corpus.train, &corpus.dev, &config, &channel).map_err(e)?;
    let c = bits(&model.params);
    ensure(a[enc..] == c[enc..], || "classifier moved during pretraining".into())?;
    Ok(format!(
        "{} classifier parameters bit-identical after 5 steps and one epoch",
        before.classifier_len()
    ))
}

fn random_index(r: &mut Rng) -> NNIndex {
    let classes = 1 + rng::below(r, 6);
    let dim = 1 + rng::below(r, 8);
    let n = classes + rng::below(r, 201 - classes);
    let labels: Vec<usize> = (0..n).map(|i| if i < classes { i } else { rng::below(r, classes) }).collect();
    let vectors = (0..n * dim).map(|_| 4.0 * rng::uniform(r) - 2.0).collect();
    NNIndex::new(dim, classes, vectors, labels).unwrap()
}

fn fusion() -> Check {
    let mut r = rng::seeded(77);
    // brute force: sort every distance per class and keep the first
    for _ in 0..200 {
        let ix = random_index(&mut r);
        let q: Vec<f64> = (0..ix.dim).map(|_| 4.0 * rng::uniform(&mut r) - 2.0).collect();
        let got = nn_class_scores(&ix, &q).map_err(e)?;
        for (c, g) in got.iter().enumerate() {
            let mut ds: Vec<f64> = (0..ix.len())
                .filter(|&i| ix.labels[i] == c)
                .map(|i| ix.entry(i).iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect();
            ds.sort_by(f64::total_cmp);
            close(*g, ds[0], 1e-12, "class score")?;
        }
    }

    let corpus = generate_synthetic(&GeneratorSpec {
        num_classes: 8,
        total_size: 60,
        seed: 4,
        ..Default::default()
    })
    .map_err(e)?;
    let channel = ErrorChannel::default_channel(1.0);
    let config = TrainConfig {
        model: ModelShape {
            embed_dim: 8,
            hidden_dim: 8,
            attention_dim: 8,
            mlp_dim: 8,
            ..Default::default()
        },
        seed: 5,
        ..Default::default()
    };
    let mut model: SluModel = training::init_model(&corpus.train, &config, &channel).map_err(e)?;
    model.params = random_params(&model.params.config, 6);
    let index = build_index(&model, &corpus.train, &channel, 2, 4, 1).map_err(e)?;
    let words = model.vocab.words().to_vec();
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let len = 1 + rng::below(&mut r, 10);
        let tokens: Vec<String> = (0..len).map(|_| words[rng::below(&mut r, words.len())].clone()).collect();
        for gamma in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let p = fuse_predict(&model, &index, &tokens, gamma).map_err(e)?;
            worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        }
        let p0 = fuse_predict(&model, &index, &tokens, 0.0).map_err(e)?;
        let logits = model.logits(&tokens).map_err(e)?;
        ensure(argmax(&p0) == argmax(&logits), || format!("γ=0 argmax differs for {tokens:?}"))?;
    }
    ensure(worst_sum <= 1e-9, || format!("p_final sum off by {worst_sum:e}"))?;
    // degenerate inputs still normalise
    let p = fuse(&[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0], 0.5).map_err(e)?;
    close(p.iter().sum(), 1.0, 1e-9, "flat inputs")?;
    Ok(format!(
        "max |Σp − 1| = {worst_sum:.1e} over 5000 fusions; γ=0 argmax matches on 1000 inputs; 200 random indices match brute force"
    ))
}

/// Settings shared by the matrix and ablation checks.
fn matrix_spec() -> ExperimentSpec {
    let mut spec = ExperimentSpec::default();
    spec.train.model = ModelShape {
        embed_dim: 32,
        hidden_dim: 32,
        attention_dim: 32,
        mlp_dim: 32,
        ..Default::default()
    };
    spec
}

fn results_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn run_matrix() -> std::result::Result<(Report, f64), String> {
    let spec = matrix_spec();
    let t0 = Instant::now();
    let report = experiment::run(&spec, |msg| eprintln!("  {msg}")).map_err(e)?;
    let secs = t0.elapsed().as_secs_f64();
    let dir = results_dir();
    speechify::io::write_json(&dir.join("results.json"), &report).map_err(e)?;
    let tables = format!("{}\n{}", report.table(), report.ablation_table());
    speechify::io::write_text(&dir.join("table.txt"), &tables).map_err(e)?;
    eprintln!("{tables}");
    Ok((report, secs))
}

fn table_one(report: &Report, secs: f64) -> Check {
    let t = 0.125;
    let f1 = |m| report.per_seed(m, t, |x| x.macro_f1);
    let (ce, pw) = (f1(TrainMode::Ce), f1(TrainMode::Pairwise));
    ensure(ce.len() == 5 && pw.len() == 5, || "expected 5 seeds per mode".into())?;
    let wins = ce.iter().zip(&pw).filter(|(a, b)| b.1 > a.1).count();
    let gap = 100.0 * (report.mean_metrics(TrainMode::Pairwise, t).1 - report.mean_metrics(TrainMode::Ce, t).1);
    let f7 = report.mean_metrics(TrainMode::PairwiseHallucFt, t).1;
    let f5 = report.mean_metrics(TrainMode::PairwiseHalluc, t).1;
    let f6 = report.mean_metrics(TrainMode::PairwiseFt, t).1;
    let a1 = report.mean_metrics(TrainMode::Ce, t).0;
    let a2 = report.mean_metrics(TrainMode::CeHalluc, t).0;
    let wer = report.runs.iter().filter_map(|r| r.at(t)).map(|m| m.measured_wer).sum::<f64>()
        / report.runs.len() as f64;
    let detail = format!(
        "(a) (4) beats (1) on F1 in {wins}/5 seeds, mean gap {gap:.1} pts; (b) F1 (7) {:.1} vs (5) {:.1}, (6) {:.1}; \
         (c) acc (2) {:.1} vs (1) {:.1}; measured test WER {:.3}; {:.0} s",
        100.0 * f7,
        100.0 * f5,
        100.0 * f6,
        100.0 * a2,
        100.0 * a1,
        wer,
        secs
    );
    let mut failed = Vec::new();
    if !(wins >= 4 && gap >= 2.0) {
        failed.push("a");
    }
    if !(f7 >= f5 && f7 >= f6) {
        failed.push("b");
    }
    if !(a2 >= a1) {
        failed.push("c");
    }
    if secs >= 1800.0 {
        failed.push("runtime");
    }
    ensure(failed.is_empty(), || format!("failed {}: {detail}", failed.join(", ")))?;
    Ok(detail)
}

fn table_two(report: &Report) -> Check {
    let t = report.spec.ablation_wer;
    let with = report.ablation_per_seed(1.0, t, |m| m.macro_f1);
    let without = report.ablation_per_seed(0.0, t, |m| m.macro_f1);
    ensure(with.len() == 5 && without.len() == 5, || "expected 5 seeds per arm".into())?;
    let wins = with.iter().zip(&without).filter(|(a, b)| a.1 > b.1).count();
    let per_seed = with
        .iter()
        .zip(&without)
        .map(|(a, b)| format!("{:.1}/{:.1}", 100.0 * a.1, 100.0 * b.1))
        .collect::<Vec<_>>()
        .join(" ");
    let detail = format!("η=1 beats η=0 on F1 at {t} WER in {wins}/5 seeds (η=1/η=0: {per_seed})");
    ensure(wins >= 3, || detail.clone())?;
    Ok(detail)
}

fn cli(dir: &Path, args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_speechify"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(e)?;
    ensure(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(e)?;
    let conf = "embed_dim = 8\nhidden_dim = 8\nattention_dim = 8\nmlp_dim = 8\nmax_epochs = 2\n";
    let exp = "embed_dim = 8\nhidden_dim = 8\nattention_dim = 8\nmlp_dim = 8\nmax_epochs = 1\n\
               modes = ce, pairwise_halluc_ft\nseeds = 3\nwer_targets = 0.125\ndev_wer = 0\n\
               ablation_wer = 0.125\noversample = 4\ndata_dir = data\n";
    let runs = ["a", "b"].map(|n| tmp.path().join(n));
    for dir in &runs {
        fs::create_dir_all(dir).map_err(e)?;
        fs::write(dir.join("tiny.conf"), conf).map_err(e)?;
        fs::write(dir.join("exp.conf"), exp).map_err(e)?;
        let steps: Vec<Vec<&str>> = vec![
            vec!["gen-data", "--out", "data", "--num-classes", "4", "--total-size", "600", "--seed", "7"],
            vec!["speechify", "--input", "sentences.txt", "--output", "speechified.txt", "--wer", "0.125", "--seed", "2"],
            vec![
                "train", "--train", "data/train.jsonl", "--dev", "data/dev.jsonl", "--dev-wer", "0", "--mode",
                "pairwise_halluc", "--config", "tiny.conf", "--seed", "1", "--out", "pre",
            ],
            vec![
                "finetune", "--model", "pre/model.json", "--train", "data/train.jsonl", "--dev", "data/dev.jsonl",
                "--dev-wer", "0", "--max-epochs", "1", "--seed", "1", "--out", "ft",
            ],
            vec!["index", "--model", "ft/model.json", "--train", "data/train.jsonl", "--oversample", "6", "--out", "ix"],
            vec![
                "evaluate", "--model", "ft/model.json", "--index", "ix/index.json", "--test", "data/test.jsonl",
                "--dev", "data/dev.jsonl", "--dev-wer", "0", "--wer", "0.125", "--out", "eval",
            ],
            vec!["experiment", "--quiet", "--config", "exp.conf", "--out", "exp"],
        ];
        for step in steps {
            if step[0] == "speechify" {
                let test = fs::read_to_string(dir.join("data/test.jsonl")).map_err(e)?;
                let text: String = test
                    .lines()
                    .skip(1)
                    .map(|l| {
                        let v: serde_json::Value = serde_json::from_str(l).unwrap();
                        format!("{}\n", v["text"].as_str().unwrap())
                    })
                    .collect();
                fs::write(dir.join("sentences.txt"), text).map_err(e)?;
            }
            cli(dir, &step)?;
        }
    }
    let (fa, fb) = (files(&runs[0]), files(&runs[1]));
    ensure(fa == fb, || "runs produced different file sets".into())?;
    for f in &fa {
        let (a, b) = (fs::read(runs[0].join(f)).map_err(e)?, fs::read(runs[1].join(f)).map_err(e)?);
        ensure(a == b, || format!("{} differs between identical runs", f.display()))?;
    }
    Ok(format!(
        "7 commands run twice, {} output files byte-identical (metrics.json, results.json included)",
        fa.len()
    ))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("SPEECHIFY_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results: Vec<(u32, &str, Check, f64)> = Vec::new();
    let mut record = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Check| {
        if wanted(n) {
            let t0 = Instant::now();
            let r = f();
            results.push((n, name, r, t0.elapsed().as_secs_f64()));
        }
    };
    record(1, "gradient correctness", &mut gradients);
    record(2, "loss oracles", &mut loss_oracles);
    record(3, "WER oracle", &mut wer_oracle);
    record(4, "channel calibration", &mut calibration);
    record(5, "gradient routing", &mut routing);
    record(6, "fusion properties", &mut fusion);
    if wanted(7) || wanted(8) {
        match run_matrix() {
            Ok((report, secs)) => {
                record(7, "directional comparison matrix", &mut || table_one(&report, secs));
                record(8, "directional eta ablation", &mut || table_two(&report));
            }
            Err(err) => {
                record(7, "directional comparison matrix", &mut || Err(err.clone()));
                record(8, "directional eta ablation", &mut || Err(err.clone()));
            }
        }
    }
    record(9, "determinism", &mut determinism);

    let mut failed = 0;
    for (n, name, r, secs) in &results {
        match r {
            Ok(detail) => println!("PASS {n} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
