//! The `train`, `predict`, and `eval` commands.
//!
//! Predictions are JSON lines. The first line is the header
//! `{"format":"bmrc-predictions","version":1}`; every following line is one
//! sentence:
//!
//! ```text
//! {"id":"3","triplets":[{"aspect":[0,1],"opinion":[4,4],"sentiment":"POS","pair_probability":0.93,"sentiment_probability":0.88}]}
//! ```
//!
//! Spans are inclusive 0-based token indices.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, save_model};
use crate::corpus::{load_split, AnnotatedSentence, DatasetSplit, Sentiment, SplitName, TokenSpan, Triplet};
use crate::encoder::{EncoderConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{report, ReportRecord, SubtaskScores};
use crate::inference::{extract_triplets, DirectionMode, InferenceConfig, TripletPrediction};
use crate::model::Model;
use crate::training::{fit, EpochMetrics, OptimizerConfig};

pub const PREDICTION_FORMAT: &str = "bmrc-predictions";
pub const PREDICTION_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Everything a run needs, read from a TOML file and then overridden by
/// flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub encoder: EncoderConfig,
    pub optimizer: OptimizerConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: None,
            dev: None,
            test: None,
            out: PathBuf::from("runs"),
            seeds: vec![0, 1, 2, 3, 4],
            encoder: EncoderConfig::default(),
            optimizer: OptimizerConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.encoder.validate()?;
        self.optimizer.validate()?;
        self.inference.validate()
    }
}

fn require_file(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    let path = path.ok_or_else(|| Error::Config(format!("no {what} path given")))?;
    if !path.is_file() {
        return Err(Error::Config(format!("{what} path {} is not a readable file", path.display())));
    }
    Ok(path.clone())
}

/// Output of one seed's training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Trains one model per seed; writes `seed-{s}/model.ckpt`, `vocab.txt`,
/// and `metrics.jsonl` under the output directory.
pub fn cmd_train(config: &RunConfig) -> Result<Vec<TrainRun>> {
    config.validate()?;
    let train_path = require_file(config.train.as_ref(), "train")?;
    let dev_path = require_file(config.dev.as_ref(), "dev")?;
    let train = load_split(&train_path, SplitName::Train)?;
    let dev = load_split(&dev_path, SplitName::Dev)?;
    let vocab = Vocabulary::build(train.sentences.iter().flat_map(|s| s.tokens.iter().map(String::as_str)));

    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        info!("training seed {seed} on {} sentences", train.num_sentences());
        let model = Model::new(config.encoder, vocab.clone(), seed)?;
        let optimizer = OptimizerConfig { seed, ..config.optimizer };
        let outcome = fit(model, &train, &dev, &optimizer, &config.inference)?;

        let dir = seed_dir(&config.out, seed);
        save_model(&outcome.best, &dir)?;
        let mut log = String::new();
        for m in &outcome.history {
            log.push_str(&serde_json::to_string(m).expect("metrics serialize"));
            log.push('\n');
        }
        let path = dir.join(METRICS_FILE);
        std::fs::write(&path, log).map_err(|e| Error::io(&path, e))?;
        info!(
            "seed {seed}: best epoch {} with dev T-F1 {:.4}",
            outcome.best_epoch,
            outcome.best_metrics().dev.triplet.f1
        );
        runs.push(TrainRun {
            seed,
            dir,
            best_epoch: outcome.best_epoch,
            history: outcome.history,
        });
    }
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionHeader {
    pub format: String,
    pub version: u32,
}

impl Default for PredictionHeader {
    fn default() -> Self {
        Self {
            format: PREDICTION_FORMAT.to_string(),
            version: PREDICTION_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedTriplet {
    pub aspect: [usize; 2],
    pub opinion: [usize; 2],
    pub sentiment: String,
    pub pair_probability: f64,
    pub sentiment_probability: f64,
}

impl From<&TripletPrediction> for PredictedTriplet {
    fn from(t: &TripletPrediction) -> Self {
        Self {
            aspect: [t.aspect.start, t.aspect.end],
            opinion: [t.opinion.start, t.opinion.end],
            sentiment: t.sentiment.tag().to_string(),
            pair_probability: t.pair_probability,
            sentiment_probability: t.sentiment_probability,
        }
    }
}

impl PredictedTriplet {
    pub fn triplet(&self) -> Result<Triplet> {
        let sentiment: Sentiment = self
            .sentiment
            .parse()
            .map_err(|_| Error::Eval(format!("unknown sentiment tag `{}`", self.sentiment)))?;
        Ok(Triplet::new(
            TokenSpan::new(self.aspect[0], self.aspect[1]),
            TokenSpan::new(self.opinion[0], self.opinion[1]),
            sentiment,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub triplets: Vec<PredictedTriplet>,
}

fn predict_all(model: &Model, sentences: &[AnnotatedSentence], config: &InferenceConfig) -> Result<Vec<Vec<TripletPrediction>>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = sentences.len().div_ceil(workers).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = sentences
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| extract_triplets(model, s, config))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(sentences.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}

/// Writes a predictions file for `sentences`; one record per sentence, in
/// input order.
pub fn write_predictions(
    model: &Model,
    sentences: &[AnnotatedSentence],
    config: &InferenceConfig,
    out: &Path,
) -> Result<()> {
    config.validate()?;
    let predictions = predict_all(model, sentences, config)?;
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |value: String| writeln!(w, "{value}").map_err(|e| Error::io(out, e));
    line(serde_json::to_string(&PredictionHeader::default()).expect("header serializes"))?;
    for (s, preds) in sentences.iter().zip(&predictions) {
        let record = PredictionRecord {
            id: s.id.clone(),
            triplets: preds.iter().map(PredictedTriplet::from).collect(),
        };
        line(serde_json::to_string(&record).expect("record serializes"))?;
    }
    w.flush().map_err(|e| Error::io(out, e))
}

pub fn cmd_predict(config: &InferenceConfig, checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    config.validate()?;
    let model = load_model(checkpoint)?;
    let split = load_split(input, SplitName::Test)?;
    write_predictions(&model, &split.sentences, config, out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let bad = |n: usize, m: String| Error::Eval(format!("{}:{}: {m}", path.display(), n + 1));
    let (n, first) = lines.next().ok_or_else(|| bad(0, "missing header line".into()))?;
    let header: PredictionHeader = serde_json::from_str(first).map_err(|e| bad(n, e.to_string()))?;
    if header != PredictionHeader::default() {
        return Err(bad(n, format!("unsupported header {first}")));
    }
    lines
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| bad(n, e.to_string())))
        .collect()
}

fn align<'a>(records: &'a [PredictionRecord], gold: &DatasetSplit) -> Result<Vec<&'a PredictionRecord>> {
    let gold_ids: BTreeSet<&str> = gold.sentences.iter().map(|s| s.id.as_str()).collect();
    let pred_ids: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    if pred_ids.len() != records.len() {
        return Err(Error::Eval("duplicate sentence ids in predictions".into()));
    }
    if gold_ids != pred_ids {
        let missing: Vec<_> = gold_ids.difference(&pred_ids).collect();
        let extra: Vec<_> = pred_ids.difference(&gold_ids).collect();
        return Err(Error::Eval(format!(
            "prediction ids do not match gold; missing {missing:?}, extra {extra:?}"
        )));
    }
    Ok(gold
        .sentences
        .iter()
        .map(|s| records.iter().find(|r| r.id == s.id).expect("ids aligned"))
        .collect())
}

/// Scores one predictions file against gold.
pub fn score_predictions(records: &[PredictionRecord], gold: &DatasetSplit) -> Result<SubtaskScores> {
    let aligned = align(records, gold)?;
    let predicted = aligned
        .iter()
        .map(|r| r.triplets.iter().map(PredictedTriplet::triplet).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&[Triplet], &[Triplet])> = predicted
        .iter()
        .zip(&gold.sentences)
        .map(|(p, g)| (p.as_slice(), g.triplets.as_slice()))
        .collect();
    Ok(SubtaskScores::compute(&pairs))
}

/// One report row per subtask, averaged over the given prediction files.
pub fn cmd_eval(predictions: &[PathBuf], gold: &Path, split: &str) -> Result<Vec<ReportRecord>> {
    if predictions.is_empty() {
        return Err(Error::Config("at least one predictions file is required".into()));
    }
    let gold = load_split(gold, SplitName::Test)?;
    let runs = predictions
        .iter()
        .map(|p| score_predictions(&read_predictions(p)?, &gold))
        .collect::<Result<Vec<_>>>()?;
    report(split, &runs)
}

#[derive(Debug, Parser)]
#[command(name = "bmrc", version, about = "Aspect sentiment triplet extraction by multi-turn reading comprehension")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed and keep each run's best dev epoch.
    Train(TrainArgs),
    /// Extract triplets from a dataset file with a trained checkpoint.
    Predict(PredictArgs),
    /// Score one or more predictions files against gold annotations.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct InferenceArgs {
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub direction: Option<DirectionMode>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Train a single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding model.ckpt and vocab.txt.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions file; repeat to average several runs.
    #[arg(long = "pred", required = true)]
    pub predictions: Vec<PathBuf>,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn base_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn apply_inference(config: &mut InferenceConfig, args: &InferenceArgs) {
    if let Some(d) = args.delta {
        config.delta = d;
    }
    if let Some(t) = args.tau {
        config.tau = t;
    }
    if let Some(d) = args.direction {
        config.direction = d;
    }
}

pub fn train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut config = base_config(args.config.as_ref())?;
    if args.train.is_some() {
        config.train.clone_from(&args.train);
    }
    if args.dev.is_some() {
        config.dev.clone_from(&args.dev);
    }
    if let Some(s) = args.seed {
        config.seeds = vec![s];
    }
    if let Some(out) = &args.out {
        config.out.clone_from(out);
    }
    apply_inference(&mut config.inference, &args.inference);
    config.validate()?;
    Ok(config)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            cmd_train(&train_config(&args)?)?;
        }
        Command::Predict(args) => {
            let mut config = base_config(args.config.as_ref())?;
            apply_inference(&mut config.inference, &args.inference);
            cmd_predict(&config.inference, &args.checkpoint, &args.input, &args.out)?;
        }
        Command::Eval(args) => {
            let records = cmd_eval(&args.predictions, &args.gold, &args.split)?;
            let mut text = String::new();
            for r in &records {
                text.push_str(&serde_json::to_string(r).expect("report serializes"));
                text.push('\n');
            }
            match &args.out {
                Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_with_overrides() {
        let cfg = RunConfig::from_toml(
            "train = \"a.txt\"\nseeds = [7]\n[encoder]\nd_h = 16\nn_heads = 2\n[inference]\ndelta = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.encoder.d_h, 16);
        assert_eq!(cfg.encoder.n_layers, 2);
        assert_eq!(cfg.inference.delta, 0.5);
        assert_eq!(cfg.optimizer.head_lr, 1e-3);
        assert!(RunConfig::from_toml("unknown = 1").is_err());
    }

    #[test]
    fn invalid_delta_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.inference.delta = 1.2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.inference.delta = 0.8;
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from(["bmrc", "train", "--seed", "3", "--delta", "0.4", "--direction", "oa"]).unwrap();
        let Command::Train(args) = cli.command else { panic!() };
        let cfg = train_config(&args).unwrap();
        assert_eq!(cfg.seeds, vec![3]);
        assert_eq!(cfg.inference.delta, 0.4);
        assert_eq!(cfg.inference.direction, DirectionMode::Oa);
        assert!(Cli::try_parse_from(["bmrc", "train", "--direction", "sideways"]).is_err());
        assert!(Cli::try_parse_from(["bmrc", "eval", "--gold", "g"]).is_err());
    }

    #[test]
    fn prediction_triplet_round_trip() {
        let t = TripletPrediction {
            aspect: TokenSpan::new(0, 1),
            opinion: TokenSpan::single(4),
            sentiment: Sentiment::Negative,
            pair_probability: 0.9,
            sentiment_probability: 0.7,
        };
        let p = PredictedTriplet::from(&t);
        assert_eq!(p.sentiment, "NEG");
        assert_eq!(p.triplet().unwrap(), t.triplet());
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.starts_with("{\"aspect\":[0,1],\"opinion\":[4,4],\"sentiment\":\"NEG\""), "{json}");
    }
}
