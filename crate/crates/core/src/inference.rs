//! Multi-turn inference: decode spans from start/end probabilities, run the
//! A->O and O->A extraction directions, fuse their pair sets, then classify
//! one sentiment per aspect.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, Sentiment, TokenSpan, Triplet};
use crate::error::{Error, Result};
use crate::heads::TokenSpanProbabilities;
use crate::model::Reader;
use crate::queries::{build_nonrestrictive_query, restrictive_for, sentiment_for, Direction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionMode {
    #[default]
    Both,
    Ao,
    Oa,
}

impl FromStr for DirectionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "both" => Ok(DirectionMode::Both),
            "ao" => Ok(DirectionMode::Ao),
            "oa" => Ok(DirectionMode::Oa),
            other => Err(format!("unknown direction mode `{other}` (expected both, ao, oa)")),
        }
    }
}

impl fmt::Display for DirectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DirectionMode::Both => "both",
            DirectionMode::Ao => "ao",
            DirectionMode::Oa => "oa",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Start/end decision threshold.
    pub tau: f64,
    /// Fusion threshold for pairs found by only one direction.
    pub delta: f64,
    pub max_span_len: usize,
    pub direction: DirectionMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            delta: 0.8,
            max_span_len: 8,
            direction: DirectionMode::Both,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta {} outside [0, 1)", self.delta)));
        }
        if self.max_span_len == 0 {
            return Err(Error::Config("max_span_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntity {
    pub span: TokenSpan,
    /// `p_start · p_end`
    pub probability: f64,
}

/// Pairs each candidate start with the nearest unconsumed candidate end at
/// or after it, no more than `max_span_len` tokens long.
pub fn decode_spans(probs: &TokenSpanProbabilities, tau: f64, max_span_len: usize) -> Vec<ScoredEntity> {
    let mut ends: Vec<(usize, bool)> = probs
        .p_end
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > tau)
        .map(|(i, _)| (i, false))
        .collect();
    let mut out = Vec::new();
    for (s, &ps) in probs.p_start.iter().enumerate() {
        if ps <= tau {
            continue;
        }
        let hit = ends
            .iter_mut()
            .find(|(e, used)| !used && *e >= s && *e - s < max_span_len);
        if let Some((e, used)) = hit {
            *used = true;
            out.push(ScoredEntity {
                span: TokenSpan::new(s, *e),
                probability: ps * probs.p_end[*e],
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub aspect: ScoredEntity,
    pub opinion: ScoredEntity,
    pub direction: Direction,
    /// `p(a)·p(o|a)` for A->O, `p(o)·p(a|o)` for O->A.
    pub probability: f64,
}

impl ScoredPair {
    pub fn key(&self) -> (TokenSpan, TokenSpan) {
        (self.aspect.span, self.opinion.span)
    }
}

/// Pairs from one direction, unique by (aspect span, opinion span).
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    direction: Direction,
    pairs: BTreeMap<(TokenSpan, TokenSpan), ScoredPair>,
}

impl PairSet {
    pub fn new(direction: Direction) -> Self {
        Self {
            direction,
            pairs: BTreeMap::new(),
        }
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Builds a pair from the first-turn and second-turn entities; a
    /// duplicate key keeps the higher probability.
    pub fn insert_entities(&mut self, first: ScoredEntity, second: ScoredEntity) {
        let (aspect, opinion) = match self.direction {
            Direction::AtoO => (first, second),
            Direction::OtoA => (second, first),
        };
        self.insert(ScoredPair {
            aspect,
            opinion,
            direction: self.direction,
            probability: first.probability * second.probability,
        });
    }

    /// Panics if `pair` belongs to the other direction.
    pub fn insert(&mut self, pair: ScoredPair) {
        assert_eq!(pair.direction, self.direction, "pair direction differs from set direction");
        match self.pairs.get(&pair.key()) {
            Some(existing) if existing.probability >= pair.probability => {}
            _ => {
                self.pairs.insert(pair.key(), pair);
            }
        }
    }

    pub fn get(&self, key: &(TokenSpan, TokenSpan)) -> Option<&ScoredPair> {
        self.pairs.get(key)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ScoredPair> {
        self.pairs.values()
    }
}

pub fn run_direction(
    reader: &impl Reader,
    sentence: &AnnotatedSentence,
    direction: Direction,
    tau: f64,
    max_span_len: usize,
) -> Result<PairSet> {
    let mut set = PairSet::new(direction);
    let first_probs = reader.answer_span(&build_nonrestrictive_query(direction), sentence)?;
    for first in decode_spans(&first_probs, tau, max_span_len) {
        let query = restrictive_for(direction, &sentence.tokens, first.span)?;
        let probs = match reader.answer_span(&query, sentence) {
            Ok(p) => p,
            Err(Error::Overlength { len, max_len, .. }) => {
                warn!(
                    "sentence `{}`: skipping {direction} restrictive query for {} ({len} > {max_len} tokens)",
                    sentence.id, first.span
                );
                continue;
            }
            Err(e) => return Err(e),
        };
        for second in decode_spans(&probs, tau, max_span_len) {
            set.insert_entities(first, second);
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairOrigin {
    /// Found by both directions.
    Both,
    /// Found by one direction only.
    Only(Direction),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedPair {
    pub aspect: TokenSpan,
    pub opinion: TokenSpan,
    pub probability: f64,
    pub origin: PairOrigin,
}

/// Keeps every pair found by both directions, plus one-direction pairs with
/// probability strictly above `delta`. Output is sorted by key.
pub fn fuse(v_ao: &PairSet, v_oa: &PairSet, delta: f64) -> Vec<FusedPair> {
    let mut out: BTreeMap<(TokenSpan, TokenSpan), FusedPair> = BTreeMap::new();
    for (set, other) in [(v_ao, v_oa), (v_oa, v_ao)] {
        for pair in set.iter() {
            let key = pair.key();
            let fused = match other.get(&key) {
                Some(twin) => FusedPair {
                    aspect: key.0,
                    opinion: key.1,
                    probability: pair.probability.max(twin.probability),
                    origin: PairOrigin::Both,
                },
                None if pair.probability > delta => FusedPair {
                    aspect: key.0,
                    opinion: key.1,
                    probability: pair.probability,
                    origin: PairOrigin::Only(set.direction()),
                },
                None => continue,
            };
            out.insert(key, fused);
        }
    }
    out.into_values().collect()
}

/// All pairs of a single direction, unfiltered.
pub fn single_direction(set: &PairSet) -> Vec<FusedPair> {
    set.iter()
        .map(|p| FusedPair {
            aspect: p.aspect.span,
            opinion: p.opinion.span,
            probability: p.probability,
            origin: PairOrigin::Only(set.direction()),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletPrediction {
    pub aspect: TokenSpan,
    pub opinion: TokenSpan,
    pub sentiment: Sentiment,
    pub pair_probability: f64,
    pub sentiment_probability: f64,
}

impl TripletPrediction {
    pub fn triplet(&self) -> Triplet {
        Triplet::new(self.aspect, self.opinion, self.sentiment)
    }
}

/// One sentiment query per distinct aspect, listing its fused opinions in
/// sentence order; the argmax class goes to every pair of that aspect.
pub fn classify_sentiments(
    reader: &impl Reader,
    sentence: &AnnotatedSentence,
    fused: &[FusedPair],
) -> Result<Vec<TripletPrediction>> {
    let mut by_aspect: BTreeMap<TokenSpan, Vec<&FusedPair>> = BTreeMap::new();
    for p in fused {
        by_aspect.entry(p.aspect).or_default().push(p);
    }
    let mut out = Vec::with_capacity(fused.len());
    for (aspect, mut pairs) in by_aspect {
        pairs.sort_by_key(|p| p.opinion);
        pairs.dedup_by_key(|p| p.opinion);
        let opinions: Vec<TokenSpan> = pairs.iter().map(|p| p.opinion).collect();
        let query = sentiment_for(&sentence.tokens, aspect, &opinions)?;
        let (sentiment, sentiment_probability) = reader.answer_sentiment(&query, sentence)?.argmax();
        out.extend(pairs.iter().map(|p| TripletPrediction {
            aspect,
            opinion: p.opinion,
            sentiment,
            pair_probability: p.probability,
            sentiment_probability,
        }));
    }
    out.sort_by_key(|t| (t.aspect.start, t.opinion.start, t.aspect.end, t.opinion.end));
    Ok(out)
}

pub fn extract_triplets(
    reader: &impl Reader,
    sentence: &AnnotatedSentence,
    config: &InferenceConfig,
) -> Result<Vec<TripletPrediction>> {
    let run = |d| run_direction(reader, sentence, d, config.tau, config.max_span_len);
    let fused = match config.direction {
        DirectionMode::Both => fuse(&run(Direction::AtoO)?, &run(Direction::OtoA)?, config.delta),
        DirectionMode::Ao => single_direction(&run(Direction::AtoO)?),
        DirectionMode::Oa => single_direction(&run(Direction::OtoA)?),
    };
    classify_sentiments(reader, sentence, &fused)
}
