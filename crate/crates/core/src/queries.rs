//! Query templates and gold supervision.
//!
//! Every sentence yields three families of reading-comprehension queries:
//! non-restrictive extraction ("what aspects ?"), restrictive extraction
//! conditioned on one entity, and sentiment classification for an aspect
//! together with its opinions. Templates are lower-cased word lists with
//! `?` and `/` as standalone tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{validate, AnnotatedSentence, Sentiment, TokenSpan};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Aspects first, then their opinions.
    AtoO,
    /// Opinions first, then the aspects they describe.
    OtoA,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::AtoO => "A->O",
            Direction::OtoA => "O->A",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryKind {
    NonRestrictive,
    Restrictive,
    SentimentCls,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub kind: QueryKind,
    /// `None` only for sentiment queries.
    pub direction: Option<Direction>,
    pub tokens: Vec<String>,
    /// Sentence spans interpolated into the template, in template order.
    pub anchors: Vec<TokenSpan>,
}

impl Query {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace().map(str::to_owned)
}

fn lowered(tokens: &[String]) -> impl Iterator<Item = String> + '_ {
    tokens.iter().map(|t| t.to_lowercase())
}

pub fn build_nonrestrictive_query(direction: Direction) -> Query {
    let text = match direction {
        Direction::AtoO => "what aspects ?",
        Direction::OtoA => "what opinions ?",
    };
    Query {
        kind: QueryKind::NonRestrictive,
        direction: Some(direction),
        tokens: words(text).collect(),
        anchors: Vec::new(),
    }
}

/// `entity` holds the surface tokens of `anchor` within the sentence.
pub fn build_restrictive_query(direction: Direction, entity: &[String], anchor: TokenSpan) -> Result<Query> {
    if entity.is_empty() {
        return Err(Error::Query("restrictive query needs a non-empty entity".into()));
    }
    let tokens: Vec<String> = match direction {
        Direction::AtoO => words("what opinions given the aspect")
            .chain(lowered(entity))
            .chain(words("?"))
            .collect(),
        Direction::OtoA => words("what aspect does the opinion")
            .chain(lowered(entity))
            .chain(words("describe ?"))
            .collect(),
    };
    Ok(Query {
        kind: QueryKind::Restrictive,
        direction: Some(direction),
        tokens,
        anchors: vec![anchor],
    })
}

/// Opinions are joined with `/` in the order given.
pub fn build_sentiment_query(
    aspect: (&[String], TokenSpan),
    opinions: &[(&[String], TokenSpan)],
) -> Result<Query> {
    if aspect.0.is_empty() {
        return Err(Error::Query("sentiment query needs a non-empty aspect".into()));
    }
    if opinions.is_empty() {
        return Err(Error::Query("sentiment query needs at least one opinion".into()));
    }
    let mut tokens: Vec<String> = words("what sentiment given the aspect").collect();
    tokens.extend(lowered(aspect.0));
    tokens.extend(words("and the opinion"));
    let mut anchors = vec![aspect.1];
    for (i, (opinion, span)) in opinions.iter().enumerate() {
        if opinion.is_empty() {
            return Err(Error::Query(format!("opinion {i} of sentiment query is empty")));
        }
        if i > 0 {
            tokens.push("/".into());
        }
        tokens.extend(lowered(opinion));
        anchors.push(*span);
    }
    tokens.push("?".into());
    Ok(Query {
        kind: QueryKind::SentimentCls,
        direction: None,
        tokens,
        anchors,
    })
}

/// Restrictive query for the entity at `span` of `sentence_tokens`.
pub fn restrictive_for(direction: Direction, sentence_tokens: &[String], span: TokenSpan) -> Result<Query> {
    build_restrictive_query(direction, span.slice(sentence_tokens), span)
}

/// Sentiment query for `aspect` with `opinions` listed in the order given.
pub fn sentiment_for(sentence_tokens: &[String], aspect: TokenSpan, opinions: &[TokenSpan]) -> Result<Query> {
    let ops: Vec<(&[String], TokenSpan)> = opinions.iter().map(|s| (s.slice(sentence_tokens), *s)).collect();
    build_sentiment_query((aspect.slice(sentence_tokens), aspect), &ops)
}

/// Per-token start/end indicators over sentence tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanLabels {
    pub start: Vec<u8>,
    pub end: Vec<u8>,
}

impl SpanLabels {
    pub fn from_spans(n_tokens: usize, spans: &[TokenSpan]) -> Self {
        let mut start = vec![0; n_tokens];
        let mut end = vec![0; n_tokens];
        for s in spans {
            start[s.start] = 1;
            end[s.end] = 1;
        }
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }

    /// Checks count equality and the ascending start/end pairing.
    pub fn is_consistent(&self) -> bool {
        let starts: Vec<usize> = positions(&self.start);
        let ends: Vec<usize> = positions(&self.end);
        starts.len() == ends.len()
            && self.start.len() == self.end.len()
            && starts.iter().zip(&ends).all(|(s, e)| s <= e)
    }
}

fn positions(ind: &[u8]) -> Vec<usize> {
    ind.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Answer {
    Spans(SpanLabels),
    Sentiment(Sentiment),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionInstance {
    pub sentence_id: String,
    pub query: Query,
    pub answer: Answer,
}

impl SupervisionInstance {
    /// One JSON object per instance, for inspection.
    pub fn to_debug_line(&self) -> String {
        serde_json::to_string(self).expect("supervision instances always serialize")
    }
}

/// Distinct gold entities of a sentence and their relations.
#[derive(Debug, Clone, Default)]
pub struct GoldStructure {
    pub aspect_opinions: BTreeMap<TokenSpan, BTreeSet<TokenSpan>>,
    pub opinion_aspects: BTreeMap<TokenSpan, BTreeSet<TokenSpan>>,
    pub aspect_sentiment: BTreeMap<TokenSpan, Sentiment>,
}

impl GoldStructure {
    pub fn from_sentence(sentence: &AnnotatedSentence) -> Result<Self> {
        let mut g = GoldStructure::default();
        for t in &sentence.triplets {
            g.aspect_opinions.entry(t.aspect).or_default().insert(t.opinion);
            g.opinion_aspects.entry(t.opinion).or_default().insert(t.aspect);
            match g.aspect_sentiment.get(&t.aspect) {
                Some(&prev) if prev != t.sentiment => {
                    return Err(Error::Supervision {
                        id: sentence.id.clone(),
                        message: format!(
                            "aspect {} carries conflicting sentiments {prev} and {}",
                            t.aspect, t.sentiment
                        ),
                    })
                }
                _ => {
                    g.aspect_sentiment.insert(t.aspect, t.sentiment);
                }
            }
        }
        Ok(g)
    }
}

/// Gold instances for all three query families. Ordering: the two
/// non-restrictive queries (A->O, O->A), restrictive A->O per aspect,
/// restrictive O->A per opinion, then one sentiment query per aspect;
/// entities sorted by (start, end).
pub fn derive_supervision(sentence: &AnnotatedSentence) -> Result<Vec<SupervisionInstance>> {
    if let Some(v) = validate(sentence).first() {
        return Err(Error::Supervision {
            id: sentence.id.clone(),
            message: format!("sentence fails validation: {v:?}"),
        });
    }
    let gold = GoldStructure::from_sentence(sentence)?;
    let n = sentence.len();
    let tokens = &sentence.tokens;
    let labels = |spans: &mut dyn Iterator<Item = TokenSpan>| {
        let spans: Vec<TokenSpan> = spans.collect();
        Answer::Spans(SpanLabels::from_spans(n, &spans))
    };
    let inst = |query: Query, answer: Answer| SupervisionInstance {
        sentence_id: sentence.id.clone(),
        query,
        answer,
    };

    let mut out = Vec::new();
    out.push(inst(
        build_nonrestrictive_query(Direction::AtoO),
        labels(&mut gold.aspect_opinions.keys().copied()),
    ));
    out.push(inst(
        build_nonrestrictive_query(Direction::OtoA),
        labels(&mut gold.opinion_aspects.keys().copied()),
    ));
    for (aspect, opinions) in &gold.aspect_opinions {
        out.push(inst(
            restrictive_for(Direction::AtoO, tokens, *aspect)?,
            labels(&mut opinions.iter().copied()),
        ));
    }
    for (opinion, aspects) in &gold.opinion_aspects {
        out.push(inst(
            restrictive_for(Direction::OtoA, tokens, *opinion)?,
            labels(&mut aspects.iter().copied()),
        ));
    }
    for (aspect, opinions) in &gold.aspect_opinions {
        let ops: Vec<TokenSpan> = opinions.iter().copied().collect();
        out.push(inst(
            sentiment_for(tokens, *aspect, &ops)?,
            Answer::Sentiment(gold.aspect_sentiment[aspect]),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_line;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn nonrestrictive_templates() {
        assert_eq!(build_nonrestrictive_query(Direction::AtoO).text(), "what aspects ?");
        assert_eq!(build_nonrestrictive_query(Direction::OtoA).text(), "what opinions ?");
        assert_eq!(
            build_nonrestrictive_query(Direction::AtoO),
            build_nonrestrictive_query(Direction::AtoO)
        );
        assert!(build_nonrestrictive_query(Direction::AtoO).anchors.is_empty());
    }

    #[test]
    fn restrictive_templates() {
        let q = build_restrictive_query(Direction::AtoO, &toks("food"), TokenSpan::single(1)).unwrap();
        assert_eq!(q.text(), "what opinions given the aspect food ?");
        assert_eq!(q.anchors, vec![TokenSpan::single(1)]);

        let q = build_restrictive_query(Direction::OtoA, &toks("delicious"), TokenSpan::single(3)).unwrap();
        assert_eq!(q.text(), "what aspect does the opinion delicious describe ?");

        let q = build_restrictive_query(Direction::AtoO, &toks("Battery life"), TokenSpan::new(1, 2)).unwrap();
        assert_eq!(q.text(), "what opinions given the aspect battery life ?");

        assert!(build_restrictive_query(Direction::AtoO, &[], TokenSpan::single(0)).is_err());
    }

    #[test]
    fn sentiment_templates() {
        let food = toks("food");
        let delicious = toks("delicious");
        let q = build_sentiment_query((&food, TokenSpan::single(1)), &[(&delicious, TokenSpan::single(3))]).unwrap();
        assert_eq!(q.text(), "what sentiment given the aspect food and the opinion delicious ?");
        assert!(!q.tokens.contains(&"/".to_string()));
        assert_eq!(q.anchors.len(), 2);

        let s = toks("salads are fresh and tasty");
        let q = sentiment_for(&s, TokenSpan::single(0), &[TokenSpan::single(2), TokenSpan::single(4)]).unwrap();
        assert_eq!(
            q.text(),
            "what sentiment given the aspect salads and the opinion fresh / tasty ?"
        );

        assert!(build_sentiment_query((&food, TokenSpan::single(1)), &[]).is_err());
        assert!(build_sentiment_query((&[], TokenSpan::single(1)), &[(&delicious, TokenSpan::single(3))]).is_err());
    }

    #[test]
    fn figure_one_supervision() {
        let s = parse_line(
            "the food was delicious but the price was high####[([1], [3], 'POS'), ([6], [8], 'NEG')]",
            1,
        )
        .unwrap();
        let inst = derive_supervision(&s).unwrap();
        let count = |k: QueryKind| inst.iter().filter(|i| i.query.kind == k).count();
        assert_eq!(count(QueryKind::NonRestrictive), 2);
        assert_eq!(count(QueryKind::Restrictive), 4);
        assert_eq!(count(QueryKind::SentimentCls), 2);

        let Answer::Spans(labels) = &inst[0].answer else {
            panic!("expected span labels")
        };
        assert_eq!(inst[0].query.text(), "what aspects ?");
        assert_eq!(positions(&labels.start), vec![1, 6]);
        assert_eq!(positions(&labels.end), vec![1, 6]);

        assert_eq!(inst[6].answer, Answer::Sentiment(Sentiment::Positive));
        assert_eq!(inst[7].answer, Answer::Sentiment(Sentiment::Negative));
    }

    #[test]
    fn zero_triplets_gives_two_empty_instances() {
        let s = parse_line("nothing here####[]", 1).unwrap();
        let inst = derive_supervision(&s).unwrap();
        assert_eq!(inst.len(), 2);
        for i in &inst {
            assert_eq!(i.answer, Answer::Spans(SpanLabels::from_spans(2, &[])));
        }
    }

    #[test]
    fn one_to_many_groups_by_aspect() {
        let s = parse_line(
            "salads are fresh and tasty####[([0], [2], 'POS'), ([0], [4], 'POS')]",
            1,
        )
        .unwrap();
        let inst = derive_supervision(&s).unwrap();
        let ao: Vec<_> = inst
            .iter()
            .filter(|i| i.query.kind == QueryKind::Restrictive && i.query.direction == Some(Direction::AtoO))
            .collect();
        assert_eq!(ao.len(), 1);
        let Answer::Spans(l) = &ao[0].answer else { panic!() };
        assert_eq!(positions(&l.start), vec![2, 4]);
        assert_eq!(positions(&l.end), vec![2, 4]);

        let sent: Vec<_> = inst.iter().filter(|i| i.query.kind == QueryKind::SentimentCls).collect();
        assert_eq!(sent.len(), 1);
        assert!(sent[0].query.text().ends_with("the opinion fresh / tasty ?"));
    }

    #[test]
    fn conflicting_sentiment_is_an_error() {
        let s = parse_line("a b c####[([0], [1], 'POS'), ([0], [2], 'NEG')]", 1).unwrap();
        assert!(matches!(derive_supervision(&s), Err(Error::Supervision { .. })));
    }

    #[test]
    fn debug_line_is_single_json_object() {
        let s = parse_line("the food was delicious####[([1], [3], 'POS')]", 1).unwrap();
        for i in derive_supervision(&s).unwrap() {
            let line = i.to_debug_line();
            assert!(!line.contains('\n'));
            let back: SupervisionInstance = serde_json::from_str(&line).unwrap();
            assert_eq!(back, i);
        }
    }
}
