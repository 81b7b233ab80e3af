//! Span-annotated review datasets.
//!
//! One sentence per line in the widely circulated triplet format:
//!
//! ```text
//! the battery life is short####[([1, 2], [4], 'NEG')]
//! ```
//!
//! Each annotation is `(aspect indices, opinion indices, 'TAG')` with
//! `TAG` one of `POS`, `NEG`, `NEU`. Index lists are inclusive token spans
//! over the whitespace-split sentence.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};

/// Inclusive token range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn single(index: usize) -> Self {
        Self::new(index, index)
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_well_formed(&self, n_tokens: usize) -> bool {
        self.start <= self.end && self.end < n_tokens
    }

    /// Surface tokens covered by the span. Panics when out of range.
    pub fn slice<'a>(&self, tokens: &'a [String]) -> &'a [String] {
        &tokens[self.start..=self.end]
    }
}

impl fmt::Display for TokenSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Negative, Sentiment::Neutral];

    /// Class index used by the sentiment head.
    pub fn index(self) -> usize {
        match self {
            Sentiment::Positive => 0,
            Sentiment::Negative => 1,
            Sentiment::Neutral => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn tag(self) -> &'static str {
        match self {
            Sentiment::Positive => "POS",
            Sentiment::Negative => "NEG",
            Sentiment::Neutral => "NEU",
        }
    }
}

impl FromStr for Sentiment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "POS" => Ok(Sentiment::Positive),
            "NEG" => Ok(Sentiment::Negative),
            "NEU" => Ok(Sentiment::Neutral),
            other => Err(format!("unknown sentiment tag `{other}`")),
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// An (aspect, opinion, sentiment) triplet over token spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub aspect: TokenSpan,
    pub opinion: TokenSpan,
    pub sentiment: Sentiment,
}

impl Triplet {
    pub fn new(aspect: TokenSpan, opinion: TokenSpan, sentiment: Sentiment) -> Self {
        Self {
            aspect,
            opinion,
            sentiment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub triplets: Vec<Triplet>,
}

impl AnnotatedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub sentences: Vec<AnnotatedSentence>,
}

impl DatasetSplit {
    /// Builds a split, rejecting duplicate sentence ids.
    pub fn new(name: SplitName, sentences: Vec<AnnotatedSentence>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &sentences {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(Self { name, sentences })
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn num_triplets(&self) -> usize {
        self.sentences.iter().map(|s| s.triplets.len()).sum()
    }
}

/// Parses one dataset line. `line_no` is 1-based and becomes the sentence id.
pub fn parse_line(line: &str, line_no: usize) -> Result<AnnotatedSentence, ParseError> {
    let err = |cause: String| ParseError::new(line_no, cause);

    let mut parts = line.splitn(2, "####");
    let text = parts.next().unwrap_or_default();
    let annotation = parts
        .next()
        .ok_or_else(|| err("missing `####` separator".into()))?;
    if annotation.contains("####") {
        return Err(err("more than one `####` separator".into()));
    }

    let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
    if tokens.is_empty() {
        return Err(err("sentence has no tokens".into()));
    }

    let raw = AnnotationParser::new(annotation.trim())
        .parse()
        .map_err(&err)?;

    let n = tokens.len();
    let mut triplets = Vec::with_capacity(raw.len());
    for (k, (aspect, opinion, tag)) in raw.into_iter().enumerate() {
        let aspect = index_list_to_span(&aspect).map_err(|c| err(format!("triplet {k}: aspect {c}")))?;
        let opinion =
            index_list_to_span(&opinion).map_err(|c| err(format!("triplet {k}: opinion {c}")))?;
        for (role, span) in [("aspect", aspect), ("opinion", opinion)] {
            if span.end >= n {
                return Err(err(format!(
                    "triplet {k}: {role} index {} out of range for {n} tokens",
                    span.end
                )));
            }
        }
        let sentiment: Sentiment = tag.parse().map_err(|c| err(format!("triplet {k}: {c}")))?;
        triplets.push(Triplet::new(aspect, opinion, sentiment));
    }

    Ok(AnnotatedSentence {
        id: line_no.to_string(),
        tokens,
        triplets,
    })
}

/// Inverse of [`parse_line`] for well-formed sentences. Spans are written as
/// the full list of covered indices.
pub fn serialize_line(sentence: &AnnotatedSentence) -> String {
    let list = |span: TokenSpan| {
        let items: Vec<String> = (span.start..=span.end).map(|i| i.to_string()).collect();
        format!("[{}]", items.join(", "))
    };
    let annotations: Vec<String> = sentence
        .triplets
        .iter()
        .map(|t| format!("({}, {}, '{}')", list(t.aspect), list(t.opinion), t.sentiment.tag()))
        .collect();
    format!("{}####[{}]", sentence.tokens.join(" "), annotations.join(", "))
}

/// A list `[i]` is `[i, i]`; `[i, j]` with `i <= j` is `i..=j`; longer lists
/// must enumerate consecutive indices.
fn index_list_to_span(list: &[usize]) -> std::result::Result<TokenSpan, String> {
    match list {
        [] => Err("index list is empty".into()),
        [i] => Ok(TokenSpan::single(*i)),
        [i, j] if i <= j => Ok(TokenSpan::new(*i, *j)),
        [i, j] => Err(format!("span [{i}, {j}] has start > end")),
        _ => {
            if list.windows(2).all(|w| w[1] == w[0] + 1) {
                Ok(TokenSpan::new(list[0], list[list.len() - 1]))
            } else {
                Err(format!("index list {list:?} is not contiguous"))
            }
        }
    }
}

type RawTriplet = (Vec<usize>, Vec<usize>, String);

struct AnnotationParser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> AnnotationParser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn parse(mut self) -> std::result::Result<Vec<RawTriplet>, String> {
        self.expect('[')?;
        let mut out = Vec::new();
        if self.eat(']') {
            return self.finish(out);
        }
        loop {
            out.push(self.triplet()?);
            if self.eat(',') {
                continue;
            }
            self.expect(']')?;
            return self.finish(out);
        }
    }

    fn finish(mut self, out: Vec<RawTriplet>) -> std::result::Result<Vec<RawTriplet>, String> {
        self.skip_ws();
        if self.pos < self.src.len() {
            return Err(format!("trailing input at column {}", self.pos + 1));
        }
        Ok(out)
    }

    fn triplet(&mut self) -> std::result::Result<RawTriplet, String> {
        self.expect('(')?;
        let aspect = self.index_list()?;
        self.expect(',')?;
        let opinion = self.index_list()?;
        self.expect(',')?;
        let tag = self.quoted()?;
        self.expect(')')?;
        Ok((aspect, opinion, tag))
    }

    fn index_list(&mut self) -> std::result::Result<Vec<usize>, String> {
        self.expect('[')?;
        let mut out = Vec::new();
        if self.eat(']') {
            return Ok(out);
        }
        loop {
            out.push(self.integer()?);
            if self.eat(',') {
                continue;
            }
            self.expect(']')?;
            return Ok(out);
        }
    }

    fn integer(&mut self) -> std::result::Result<usize, String> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let len = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == '.'))
            .unwrap_or(rest.len());
        let text = &rest[..len];
        let value = text
            .parse::<usize>()
            .map_err(|_| format!("non-integer index `{text}` at column {}", self.pos + 1))?;
        self.pos += len;
        Ok(value)
    }

    fn quoted(&mut self) -> std::result::Result<String, String> {
        self.skip_ws();
        let quote = match self.peek() {
            Some(q @ ('\'' | '"')) => q,
            _ => return Err(format!("expected quoted tag at column {}", self.pos + 1)),
        };
        self.pos += 1;
        let rest = &self.src[self.pos..];
        let close = rest
            .find(quote)
            .ok_or_else(|| "unterminated sentiment tag".to_string())?;
        let tag = rest[..close].to_string();
        self.pos += close + 1;
        Ok(tag)
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> std::result::Result<(), String> {
        if self.eat(c) {
            Ok(())
        } else {
            match self.peek() {
                Some(found) => Err(format!(
                    "malformed annotation: expected `{c}` at column {}, found `{found}`",
                    self.pos + 1
                )),
                None => Err(format!("malformed annotation: expected `{c}`, found end of line")),
            }
        }
    }
}

/// Parses a whole file's contents. Blank lines are skipped but still count
/// toward line numbers.
pub fn parse_split(contents: &str, name: SplitName) -> Result<DatasetSplit> {
    let mut sentences = Vec::new();
    for (i, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        sentences.push(parse_line(line, i + 1)?);
    }
    DatasetSplit::new(name, sentences)
}

pub fn load_split(path: impl AsRef<Path>, name: SplitName) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let contents = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split(&contents, name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Aspect,
    Opinion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    NoTokens,
    /// Token index holding an empty string or internal whitespace.
    BadToken(usize),
    OutOfRange(Role),
    SpanOrder(Role),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// `None` for sentence-level violations.
    pub triplet: Option<usize>,
    pub rule: Rule,
}

pub fn validate(sentence: &AnnotatedSentence) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = sentence.tokens.len();
    if n == 0 {
        out.push(Violation {
            triplet: None,
            rule: Rule::NoTokens,
        });
    }
    for (i, tok) in sentence.tokens.iter().enumerate() {
        if tok.is_empty() || tok.chars().any(char::is_whitespace) {
            out.push(Violation {
                triplet: None,
                rule: Rule::BadToken(i),
            });
        }
    }
    for (k, t) in sentence.triplets.iter().enumerate() {
        for (role, span) in [(Role::Aspect, t.aspect), (Role::Opinion, t.opinion)] {
            if span.start > span.end {
                out.push(Violation {
                    triplet: Some(k),
                    rule: Rule::SpanOrder(role),
                });
            }
            if span.start >= n || span.end >= n {
                out.push(Violation {
                    triplet: Some(k),
                    rule: Rule::OutOfRange(role),
                });
            }
        }
    }
    out
}
