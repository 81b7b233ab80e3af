//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The report is printed even without `--nocapture`. The dataset-count
//! criterion reads the 14-Lap split files from `$BMRC_14LAP_DIR` (or
//! `tests/data/14lap/`) and is skipped when they are absent.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bmrc::cli::{cmd_train, seed_dir, RunConfig, METRICS_FILE};
use bmrc::corpus::{load_split, AnnotatedSentence, Sentiment, SplitName, TokenSpan, Triplet};
use bmrc::encoder::{EncoderConfig, Vocabulary};
use bmrc::eval::{score, MatchMode};
use bmrc::heads::{SentimentDistribution, TokenSpanProbabilities};
use bmrc::inference::{extract_triplets, fuse, InferenceConfig, PairSet, ScoredEntity, ScoredPair};
use bmrc::model::{Model, Reader};
use bmrc::queries::{Direction, GoldStructure, Query, QueryKind};
use bmrc::training::gradcheck::{gradient_check, perturbed};
use bmrc::training::{fit, prepare_sentence, sentiment_loss, span_loss, OptimizerConfig};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn within(elapsed: Duration, limit_secs: u64, detail: String) -> Outcome {
    if elapsed.as_secs_f64() < limit_secs as f64 {
        Outcome::Pass(format!("{detail}; {:.2}s", elapsed.as_secs_f64()))
    } else {
        Outcome::Fail(format!("{detail}; {:.2}s exceeds {limit_secs}s", elapsed.as_secs_f64()))
    }
}

/// Answers every query with one-hot gold labels.
struct GoldOracle {
    gold: BTreeMap<String, GoldStructure>,
}

impl GoldOracle {
    fn new(sentences: &[AnnotatedSentence]) -> Self {
        let gold = sentences
            .iter()
            .map(|s| (s.id.clone(), GoldStructure::from_sentence(s).unwrap()))
            .collect();
        Self { gold }
    }
}

fn one_hot(n: usize, spans: impl IntoIterator<Item = TokenSpan>) -> TokenSpanProbabilities {
    let mut p = TokenSpanProbabilities {
        p_start: vec![0.0; n],
        p_end: vec![0.0; n],
    };
    for s in spans {
        p.p_start[s.start] = 1.0;
        p.p_end[s.end] = 1.0;
    }
    p
}

impl Reader for GoldOracle {
    fn answer_span(&self, query: &Query, sentence: &AnnotatedSentence) -> bmrc::Result<TokenSpanProbabilities> {
        let g = &self.gold[&sentence.id];
        let n = sentence.tokens.len();
        let spans: Vec<TokenSpan> = match (query.kind, query.direction) {
            (QueryKind::NonRestrictive, Some(Direction::AtoO)) => g.aspect_opinions.keys().copied().collect(),
            (QueryKind::NonRestrictive, Some(Direction::OtoA)) => g.opinion_aspects.keys().copied().collect(),
            (QueryKind::Restrictive, Some(Direction::AtoO)) => {
                g.aspect_opinions.get(&query.anchors[0]).into_iter().flatten().copied().collect()
            }
            (QueryKind::Restrictive, Some(Direction::OtoA)) => {
                g.opinion_aspects.get(&query.anchors[0]).into_iter().flatten().copied().collect()
            }
            _ => panic!("not an extraction query: {query:?}"),
        };
        Ok(one_hot(n, spans))
    }

    fn answer_sentiment(&self, query: &Query, sentence: &AnnotatedSentence) -> bmrc::Result<SentimentDistribution> {
        let s = self.gold[&sentence.id].aspect_sentiment[&query.anchors[0]];
        let mut p = [0.0; 3];
        p[s.index()] = 1.0;
        Ok(SentimentDistribution(p))
    }
}

fn gold_round_trip() -> Outcome {
    let start = Instant::now();
    let split = load_split(fixture("roundtrip.txt"), SplitName::Test).unwrap();
    let oracle = GoldOracle::new(&split.sentences);
    let mut mismatches = Vec::new();
    for delta in [0.0, 0.5, 0.8] {
        let config = InferenceConfig { delta, ..Default::default() };
        for s in &split.sentences {
            let got: BTreeSet<Triplet> = extract_triplets(&oracle, s, &config)
                .unwrap()
                .iter()
                .map(|t| t.triplet())
                .collect();
            let want: BTreeSet<Triplet> = s.triplets.iter().copied().collect();
            if got != want {
                mismatches.push(format!("delta {delta}, sentence {}", s.id));
            }
        }
    }
    if !mismatches.is_empty() {
        return Outcome::Fail(format!("{} mismatches, first {}", mismatches.len(), mismatches[0]));
    }
    let n = split.num_sentences();
    within(start.elapsed(), 10, format!("{n} sentences x 3 deltas reproduce gold exactly"))
}

struct FusionInstance {
    ao: PairSet,
    oa: PairSet,
    raw_ao: Vec<((usize, usize), f64)>,
    raw_oa: Vec<((usize, usize), f64)>,
    delta: f64,
}

fn span(i: usize) -> TokenSpan {
    TokenSpan::new(i, i + i % 2)
}

fn random_pairs(rng: &mut ChaCha8Rng) -> Vec<((usize, usize), f64)> {
    let n = rng.random_range(0..=10);
    (0..n)
        .map(|_| {
            let key = (rng.random_range(0..4), rng.random_range(0..4));
            let mut p: f64 = rng.random();
            while p == 0.0 {
                p = rng.random();
            }
            (key, p)
        })
        .collect()
}

fn pair_set(direction: Direction, raw: &[((usize, usize), f64)]) -> PairSet {
    let mut set = PairSet::new(direction);
    for &((a, o), p) in raw {
        set.insert(ScoredPair {
            aspect: ScoredEntity { span: span(a), probability: 1.0 },
            opinion: ScoredEntity { span: span(o), probability: 1.0 },
            direction,
            probability: p,
        });
    }
    set
}

fn fusion_instances() -> Vec<FusionInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..1000)
        .map(|_| {
            let raw_ao = random_pairs(&mut rng);
            let raw_oa = random_pairs(&mut rng);
            let delta = rng.random_range(0.0..1.0);
            FusionInstance {
                ao: pair_set(Direction::AtoO, &raw_ao),
                oa: pair_set(Direction::OtoA, &raw_oa),
                raw_ao,
                raw_oa,
                delta,
            }
        })
        .collect()
}

type Key = (TokenSpan, TokenSpan);

fn fused_keys(inst: &FusionInstance, delta: f64) -> BTreeSet<Key> {
    fuse(&inst.ao, &inst.oa, delta).iter().map(|p| (p.aspect, p.opinion)).collect()
}

/// Intersection kept unconditionally; difference pairs kept above delta.
fn brute_force(raw_ao: &[((usize, usize), f64)], raw_oa: &[((usize, usize), f64)], delta: f64) -> BTreeSet<Key> {
    let best = |raw: &[((usize, usize), f64)], k: (usize, usize)| {
        raw.iter().filter(|(kk, _)| *kk == k).map(|(_, p)| *p).fold(f64::NEG_INFINITY, f64::max)
    };
    let mut out = BTreeSet::new();
    for a in 0..4 {
        for o in 0..4 {
            let in_ao = raw_ao.iter().any(|(k, _)| *k == (a, o));
            let in_oa = raw_oa.iter().any(|(k, _)| *k == (a, o));
            let keep = match (in_ao, in_oa) {
                (true, true) => true,
                (true, false) => best(raw_ao, (a, o)) > delta,
                (false, true) => best(raw_oa, (a, o)) > delta,
                (false, false) => false,
            };
            if keep {
                out.insert((span(a), span(o)));
            }
        }
    }
    out
}

fn fusion_oracle() -> Outcome {
    let start = Instant::now();
    let instances = fusion_instances();
    let bad = instances
        .iter()
        .filter(|i| fused_keys(i, i.delta) != brute_force(&i.raw_ao, &i.raw_oa, i.delta))
        .count();
    if bad > 0 {
        return Outcome::Fail(format!("{bad} of 1000 instances differ from brute force"));
    }
    within(start.elapsed(), 5, "1000 random instances equal the brute-force sets".into())
}

fn fusion_bounds() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (n, inst) in fusion_instances().iter().enumerate() {
        let ao: BTreeSet<Key> = inst.ao.iter().map(|p| p.key()).collect();
        let oa: BTreeSet<Key> = inst.oa.iter().map(|p| p.key()).collect();
        let both: BTreeSet<Key> = ao.intersection(&oa).copied().collect();
        let union: BTreeSet<Key> = ao.union(&oa).copied().collect();
        let v = fused_keys(inst, inst.delta);
        if !both.is_subset(&v) || !v.is_subset(&union) {
            return Outcome::Fail(format!("instance {n}: intersection/union bounds violated"));
        }
        let d2 = rng.random_range(inst.delta..1.0);
        if !fused_keys(inst, d2).is_subset(&v) {
            return Outcome::Fail(format!("instance {n}: raising delta {} -> {d2} added pairs", inst.delta));
        }
    }
    within(start.elapsed(), 5, "bounds and delta-monotonicity hold on 1000 instances".into())
}

fn gradient_verification() -> Outcome {
    let start = Instant::now();
    let split = load_split(fixture("overfit.txt"), SplitName::Train).unwrap();
    let sentence = &split.sentences[1];
    let config = EncoderConfig {
        d_h: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_len: 48,
        dropout_rate: 0.1,
    };
    let vocab = Vocabulary::build(sentence.tokens.iter().map(String::as_str));
    let model = perturbed(&Model::new(config, vocab, 0).unwrap(), 0.3, 1);
    let instances = prepare_sentence(&model, sentence).unwrap();
    let kinds: BTreeSet<_> = instances.iter().map(|i| format!("{:?}", i.kind)).collect();
    let report = gradient_check(&model, &instances, 3, 42).unwrap();
    let tensors: BTreeSet<&str> = report.probes.iter().map(|p| p.tensor.as_str()).collect();
    let detail = format!(
        "{} probes over {} tensors, {} query kinds, max rel error {:.2e}",
        report.probes.len(),
        tensors.len(),
        kinds.len(),
        report.max_rel_error
    );
    let n_tensors = model.params.named_tensors().len();
    if report.probes.len() < 100 || tensors.len() != n_tensors || kinds.len() != 3 {
        return Outcome::Fail(format!("insufficient coverage: {detail}"));
    }
    if report.max_rel_error > 1e-4 {
        let worst = report.worst().unwrap();
        return Outcome::Fail(format!("{detail}; worst {worst:?}"));
    }
    within(start.elapsed(), 60, detail)
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let train = load_split(fixture("overfit.txt"), SplitName::Train).unwrap();
    let dev = bmrc::DatasetSplit::new(SplitName::Dev, train.sentences.clone()).unwrap();
    let vocab = Vocabulary::build(train.sentences.iter().flat_map(|s| s.tokens.iter().map(String::as_str)));
    let model = Model::new(EncoderConfig::default(), vocab, 0).unwrap();
    let optimizer = OptimizerConfig {
        encoder_lr: 1e-3,
        warmup_fraction: 0.01,
        epochs: 300,
        stop_at_dev_f1: Some(1.0),
        ..Default::default()
    };
    let inference = InferenceConfig::default();
    let outcome = fit(model, &train, &dev, &optimizer, &inference).unwrap();
    let best = outcome.best_metrics().dev;
    let detail = format!(
        "best epoch {} of {}: T {:.3}, P {:.3}, A-S {:.3}",
        outcome.best_epoch,
        outcome.history.len() - 1,
        best.triplet.f1,
        best.pair.f1,
        best.aspect_sentiment.f1
    );
    if best.triplet.f1 < 0.95 || best.pair.f1 < 0.95 || best.aspect_sentiment.f1 < 0.95 {
        return Outcome::Fail(detail);
    }
    let first = outcome.history[1].total;
    if first >= outcome.history[0].total {
        return Outcome::Fail(format!("{detail}; epoch 1 loss {first} not below initial"));
    }
    within(start.elapsed(), 600, detail)
}

fn uniform_span(n: usize) -> TokenSpanProbabilities {
    TokenSpanProbabilities {
        p_start: vec![0.5; n],
        p_end: vec![0.5; n],
    }
}

fn loss_truths() -> Outcome {
    let labels = bmrc::queries::SpanLabels::from_spans(1, &[TokenSpan::single(0)]);
    let l_span = span_loss(&[(&labels, &uniform_span(1))]).unwrap();
    let uniform = SentimentDistribution([1.0 / 3.0; 3]);
    let l_sent = sentiment_loss(&[(Sentiment::Neutral, &uniform)]);
    let detail = format!("span {l_span:.12} (2 ln 2), sentiment {l_sent:.12} (ln 3)");
    if (l_span - 2.0 * 2f64.ln()).abs() <= 1e-9 && (l_sent - 3f64.ln()).abs() <= 1e-9 {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn scorer_truths() -> Outcome {
    let t = |a, o, s| Triplet::new(TokenSpan::single(a), TokenSpan::single(o), s);
    let gold = [
        t(0, 1, Sentiment::Positive),
        t(2, 3, Sentiment::Negative),
        t(4, 5, Sentiment::Neutral),
        t(6, 7, Sentiment::Positive),
    ];
    let pred = [t(0, 1, Sentiment::Positive), t(2, 3, Sentiment::Negative), t(8, 9, Sentiment::Positive)];
    let s = score(&pred, &gold, MatchMode::Triplet);
    let identity = score(&gold, &gold, MatchMode::Triplet);
    let disjoint = score(&pred[2..], &gold, MatchMode::Triplet);
    let close = (s.precision - 2.0 / 3.0).abs() <= 1e-12
        && (s.recall - 0.5).abs() <= 1e-12
        && (s.f1 - 4.0 / 7.0).abs() <= 1e-12;
    let exact = [identity.precision, identity.recall, identity.f1] == [1.0; 3]
        && [disjoint.precision, disjoint.recall, disjoint.f1] == [0.0; 3];
    let detail = format!("P {:.12} R {:.12} F1 {:.12}; identity 1, disjoint 0", s.precision, s.recall, s.f1);
    if close && exact {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn lap14_dir() -> PathBuf {
    std::env::var_os("BMRC_14LAP_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/14lap"))
}

fn dataset_counts() -> Outcome {
    let dir = lap14_dir();
    let expected = [
        (SplitName::Train, "train", 920, 1265),
        (SplitName::Dev, "dev", 228, 337),
        (SplitName::Test, "test", 339, 490),
    ];
    let mut parts = Vec::new();
    for (name, stem, sentences, triplets) in expected {
        let path = ["_triplets.txt", ".txt"]
            .iter()
            .map(|suffix| dir.join(format!("{stem}{suffix}")))
            .find(|p| p.is_file());
        let Some(path) = path else {
            return Outcome::Skip(format!("14-Lap files not found under {}", dir.display()));
        };
        let split = match load_split(&path, name) {
            Ok(s) => s,
            Err(e) => return Outcome::Fail(format!("{}: {e}", path.display())),
        };
        let got = (split.num_sentences(), split.num_triplets());
        if got != (sentences, triplets) {
            return Outcome::Fail(format!("{stem}: {got:?}, expected ({sentences}, {triplets})"));
        }
        parts.push(format!("{stem} {sentences}/{triplets}"));
    }
    Outcome::Pass(parts.join(", "))
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let config = |out: &Path| RunConfig {
        train: Some(fixture("overfit.txt")),
        dev: Some(fixture("overfit.txt")),
        out: out.to_path_buf(),
        seeds: vec![3],
        encoder: EncoderConfig {
            d_h: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 48,
            dropout_rate: 0.1,
        },
        optimizer: OptimizerConfig {
            epochs: 3,
            encoder_lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    for d in &dirs {
        cmd_train(&config(d.path())).unwrap();
    }
    let mut compared = 0;
    for file in [METRICS_FILE, "model.ckpt", "vocab.txt"] {
        let read = |d: &tempfile::TempDir| std::fs::read(seed_dir(d.path(), 3).join(file)).unwrap();
        let (a, b) = (read(&dirs[0]), read(&dirs[1]));
        if a != b {
            return Outcome::Fail(format!("{file} differs between runs"));
        }
        compared += a.len();
    }
    Outcome::Pass(format!("metrics, checkpoint, and vocabulary byte-identical ({compared} bytes)"))
}

#[test]
fn acceptance() {
    let checks: [(&str, Check); 9] = [
        ("gold round-trip", gold_round_trip),
        ("fusion oracle equivalence", fusion_oracle),
        ("fusion bounds and delta-monotonicity", fusion_bounds),
        ("gradient verification", gradient_verification),
        ("overfit end-to-end", overfit),
        ("loss ground truths", loss_truths),
        ("scorer ground truths", scorer_truths),
        ("14-Lap ingestion counts", dataset_counts),
        ("training determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        let line = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Outcome::Pass(d)) => format!("PASS [{n}] {name}: {d}"),
            Ok(Outcome::Skip(d)) => format!("SKIP [{n}] {name}: {d}"),
            Ok(Outcome::Fail(d)) => {
                failed.push(n);
                format!("FAIL [{n}] {name}: {d}")
            }
            Err(_) => {
                failed.push(n);
                format!("FAIL [{n}] {name}: panicked")
            }
        };
        // Written past the test harness capture so the report always shows.
        writeln!(std::io::stdout().lock(), "{line}").unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
