use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const BEGIN_TOKEN: &str = "[CLS]";
pub const SEGMENT_TOKEN: &str = "[SEP]";
pub const UNKNOWN_TOKEN: &str = "[UNK]";

/// Words used by every query template, so queries never hit `[UNK]`.
const TEMPLATE_WORDS: &[&str] = &[
    "what", "aspects", "opinions", "?", "given", "the", "aspect", "does", "opinion", "describe",
    "sentiment", "and", "/",
];

/// Lower-cased word vocabulary with dense ids. Ids 0..3 are reserved for
/// the beginning, segment, and unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const BEGIN: usize = 0;
    pub const SEGMENT: usize = 1;
    pub const UNKNOWN: usize = 2;

    /// Reserved ids, template words, then the remaining tokens in sorted order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut list: Vec<String> = [BEGIN_TOKEN, SEGMENT_TOKEN, UNKNOWN_TOKEN]
            .iter()
            .chain(TEMPLATE_WORDS)
            .map(|s| s.to_string())
            .collect();
        let rest: BTreeSet<String> = tokens.into_iter().map(str::to_lowercase).collect();
        for t in rest {
            if !list.contains(&t) {
                list.push(t);
            }
        }
        Self::from_tokens(list).expect("built vocabulary is well-formed")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let reserved = [BEGIN_TOKEN, SEGMENT_TOKEN, UNKNOWN_TOKEN];
        if tokens.len() < reserved.len() || tokens[..3].iter().zip(reserved).any(|(a, b)| a != b) {
            return Err(Error::Checkpoint("vocabulary must start with [CLS], [SEP], [UNK]".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Case-insensitive lookup; unseen words map to [`Vocabulary::UNKNOWN`].
    pub fn id(&self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.index
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(Self::UNKNOWN)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
