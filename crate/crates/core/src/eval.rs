//! Exact-match precision/recall/F1 on the four subtasks.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentiment, TokenSpan, Triplet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchMode {
    /// Aspect span with its sentiment.
    AspectSentiment,
    Opinion,
    Pair,
    Triplet,
}

impl MatchMode {
    pub const ALL: [MatchMode; 4] = [
        MatchMode::AspectSentiment,
        MatchMode::Opinion,
        MatchMode::Pair,
        MatchMode::Triplet,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MatchMode::AspectSentiment => "A-S",
            MatchMode::Opinion => "O",
            MatchMode::Pair => "P",
            MatchMode::Triplet => "T",
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Key {
    AspectSentiment(TokenSpan, Sentiment),
    Opinion(TokenSpan),
    Pair(TokenSpan, TokenSpan),
    Triplet(TokenSpan, TokenSpan, Sentiment),
}

pub fn project(items: &[Triplet], mode: MatchMode) -> HashSet<Key> {
    items
        .iter()
        .map(|t| match mode {
            MatchMode::AspectSentiment => Key::AspectSentiment(t.aspect, t.sentiment),
            MatchMode::Opinion => Key::Opinion(t.opinion),
            MatchMode::Pair => Key::Pair(t.aspect, t.opinion),
            MatchMode::Triplet => Key::Triplet(t.aspect, t.opinion, t.sentiment),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Both sides empty scores 1; an empty side otherwise scores 0.
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        if predicted == 0 && gold == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let precision = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
        let recall = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

/// Match counts accumulated over many sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn of(pred: &[Triplet], gold: &[Triplet], mode: MatchMode) -> Self {
        let p = project(pred, mode);
        let g = project(gold, mode);
        Self {
            correct: p.intersection(&g).count(),
            predicted: p.len(),
            gold: g.len(),
        }
    }

    pub fn add(&mut self, other: Counts) {
        self.correct += other.correct;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.correct, self.predicted, self.gold)
    }
}

pub fn score(pred: &[Triplet], gold: &[Triplet], mode: MatchMode) -> Prf {
    Counts::of(pred, gold, mode).prf()
}

/// Micro-averaged score over aligned (prediction, gold) sentence pairs.
pub fn score_corpus<'a>(pairs: impl IntoIterator<Item = (&'a [Triplet], &'a [Triplet])>, mode: MatchMode) -> Prf {
    let mut counts = Counts::default();
    for (p, g) in pairs {
        counts.add(Counts::of(p, g, mode));
    }
    counts.prf()
}

/// Scores for all four modes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubtaskScores {
    pub aspect_sentiment: Prf,
    pub opinion: Prf,
    pub pair: Prf,
    pub triplet: Prf,
}

impl SubtaskScores {
    pub fn compute<'a>(pairs: &[(&'a [Triplet], &'a [Triplet])]) -> Self {
        let s = |m| score_corpus(pairs.iter().copied(), m);
        Self {
            aspect_sentiment: s(MatchMode::AspectSentiment),
            opinion: s(MatchMode::Opinion),
            pair: s(MatchMode::Pair),
            triplet: s(MatchMode::Triplet),
        }
    }

    pub fn get(&self, mode: MatchMode) -> Prf {
        match mode {
            MatchMode::AspectSentiment => self.aspect_sentiment,
            MatchMode::Opinion => self.opinion,
            MatchMode::Pair => self.pair,
            MatchMode::Triplet => self.triplet,
        }
    }
}

/// Component-wise arithmetic mean; F1 is averaged, not recomputed.
pub fn aggregate_runs(per_run: &[Prf]) -> Result<Prf> {
    if per_run.is_empty() {
        return Err(Error::Eval("cannot aggregate zero runs".into()));
    }
    let n = per_run.len() as f64;
    let sum = per_run.iter().fold(Prf::default(), |acc, r| Prf {
        precision: acc.precision + r.precision,
        recall: acc.recall + r.recall,
        f1: acc.f1 + r.f1,
    });
    Ok(Prf {
        precision: sum.precision / n,
        recall: sum.recall / n,
        f1: sum.f1 / n,
    })
}

/// One report row per (mode, split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub mode: String,
    pub split: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub runs: Vec<Prf>,
}

pub fn report(split: &str, per_run: &[SubtaskScores]) -> Result<Vec<ReportRecord>> {
    MatchMode::ALL
        .iter()
        .map(|&mode| {
            let runs: Vec<Prf> = per_run.iter().map(|s| s.get(mode)).collect();
            let mean = aggregate_runs(&runs)?;
            Ok(ReportRecord {
                mode: mode.label().to_string(),
                split: split.to_string(),
                precision: mean.precision,
                recall: mean.recall,
                f1: mean.f1,
                runs,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(a: usize, o: usize, s: Sentiment) -> Triplet {
        Triplet::new(TokenSpan::single(a), TokenSpan::single(o), s)
    }

    #[test]
    fn projection_semantics() {
        let items = [t(0, 3, Sentiment::Positive), t(1, 3, Sentiment::Negative)];
        assert_eq!(project(&items, MatchMode::Opinion).len(), 1);
        assert_eq!(project(&items, MatchMode::Triplet).len(), 2);
        assert_eq!(project(&items, MatchMode::AspectSentiment).len(), 2);
        assert!(project(&[], MatchMode::Pair).is_empty());
    }

    #[test]
    fn hand_computed_f1() {
        let gold = [
            t(0, 1, Sentiment::Positive),
            t(2, 3, Sentiment::Positive),
            t(4, 5, Sentiment::Negative),
            t(6, 7, Sentiment::Neutral),
        ];
        let pred = [t(0, 1, Sentiment::Positive), t(2, 3, Sentiment::Positive), t(8, 9, Sentiment::Neutral)];
        let s = score(&pred, &gold, MatchMode::Triplet);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 0.5).abs() < 1e-12);
        assert!((s.f1 - 4.0 / 7.0).abs() < 1e-12);

        let swapped = score(&gold, &pred, MatchMode::Triplet);
        assert_eq!(swapped.precision, s.recall);
        assert_eq!(swapped.recall, s.precision);
    }

    #[test]
    fn identity_disjoint_and_empty_conventions() {
        let a = [t(0, 1, Sentiment::Positive)];
        let b = [t(2, 3, Sentiment::Positive)];
        assert_eq!(score(&a, &a, MatchMode::Triplet), Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert_eq!(score(&a, &b, MatchMode::Triplet), Prf::default());
        assert_eq!(score(&[], &a, MatchMode::Triplet), Prf::default());
        assert_eq!(score(&a, &[], MatchMode::Triplet), Prf::default());
        assert_eq!(score(&[], &[], MatchMode::Triplet).f1, 1.0);
    }

    #[test]
    fn duplicates_do_not_change_scores() {
        let gold = [t(0, 1, Sentiment::Positive), t(2, 3, Sentiment::Negative)];
        let pred = [t(0, 1, Sentiment::Positive), t(4, 5, Sentiment::Negative)];
        let dup = [pred[0], pred[0], pred[1]];
        for m in MatchMode::ALL {
            assert_eq!(score(&pred, &gold, m), score(&dup, &gold, m));
        }
    }

    #[test]
    fn aggregation() {
        let r = |f1| Prf { precision: f1, recall: f1, f1 };
        assert!(aggregate_runs(&[]).is_err());
        assert_eq!(aggregate_runs(&[r(0.3), r(0.3)]).unwrap(), r(0.3));
        assert!((aggregate_runs(&[r(0.4), r(0.6)]).unwrap().f1 - 0.5).abs() < 1e-15);
        let a = aggregate_runs(&[r(0.1), r(0.7), r(0.4)]).unwrap();
        let b = aggregate_runs(&[r(0.4), r(0.1), r(0.7)]).unwrap();
        assert!((a.f1 - b.f1).abs() < 1e-15 && (a.precision - b.precision).abs() < 1e-15);
    }
}
